import numpy as np
import pytest

from protoreport.backbone import ModelDims
from protoreport.template import Template, build_template


def two_branch_template() -> Template:
    """Two level-1 roots, each with one finding and one attribute question."""
    return build_template(
        "chest-mini",
        [
            {
                "id": "l1_heart",
                "level": 1,
                "text": "any abnormality of the heart",
                "mode": "single-choice",
                "options": ["heart abnormal", "heart normal"],
            },
            {
                "id": "l2_cardio",
                "level": 2,
                "text": "is cardiomegaly present",
                "mode": "single-choice",
                "options": ["cardiomegaly", "no cardiomegaly"],
                "trigger": {
                    "parent_question": "l1_heart",
                    "parent_option": "l1_heart/heart abnormal",
                },
            },
            {
                "id": "l3_sev",
                "level": 3,
                "text": "severity of cardiomegaly",
                "mode": "multi-select",
                "options": ["mild enlargement", "severe enlargement"],
                "trigger": {
                    "parent_question": "l2_cardio",
                    "parent_option": "l2_cardio/cardiomegaly",
                },
            },
            {
                "id": "l1_lung",
                "level": 1,
                "text": "any abnormality of the lungs",
                "mode": "single-choice",
                "options": ["lung abnormal", "lung normal"],
            },
            {
                "id": "l2_eff",
                "level": 2,
                "text": "is a pleural effusion present",
                "mode": "single-choice",
                "options": ["pleural effusion", "no pleural effusion"],
                "trigger": {
                    "parent_question": "l1_lung",
                    "parent_option": "l1_lung/lung abnormal",
                },
            },
            {
                "id": "l3_loc",
                "level": 3,
                "text": "location of the effusion",
                "mode": "multi-select",
                "options": ["right sided effusion", "left sided effusion"],
                "trigger": {
                    "parent_question": "l2_eff",
                    "parent_option": "l2_eff/pleural effusion",
                },
            },
        ],
    )


@pytest.fixture
def template() -> Template:
    return two_branch_template()


@pytest.fixture
def small_dims(template) -> ModelDims:
    return ModelDims(
        feature_dim=5,
        image_dim=6,
        text_buckets=10,
        text_dim=4,
        fused_dim=8,
        proj_dim=5,
        hidden_dim=9,
        n_answers=template.n_answers,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
