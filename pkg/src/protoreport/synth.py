"""Fully controlled synthetic world: template, lexicon, reports, features.

The generator plants a three-level label assignment per study, writes a
sentence naming every selected option (canonical phrase or a synonym), and
shifts the study's image features along a per-option direction for each
positive-polarity label. Gold reports are text-faithful: at zero noise the
rule-based extractor recovers them exactly, because every selected option's
phrase is present and explicit negations are themselves options with their
own phrases.

Prevalence is long-tailed by construction: level-3 values occur only under
a positive finding under an abnormal region, so each value is strictly
rarer than its parents.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ParseError
from .extraction import FreeTextStudy
from .template import (
    MODE_SINGLE,
    StructuredReport,
    Template,
    build_template,
    option_id_for,
    traversal_order,
    write_reports,
    write_template,
)
from .terminology import StaticExpander, TerminologyLexicon, expand_terminology, write_lexicon


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_l1: int = 4
    n_l2_per_l1: int = 3
    n_l3_per_l2: int = 2
    n_values_per_l3: int = 3
    n_studies: int = 200
    feature_dim: int = 32
    label_signal_strength: float = 2.5
    report_noise_rate: float = 0.0
    synonym_count: int = 1
    p_abnormal: float = 0.3
    p_child: float = 0.3
    p_explicit_negative: float = 0.5

    def __post_init__(self):
        counts = (self.n_l1, self.n_l2_per_l1, self.n_l3_per_l2,
                  self.n_values_per_l3, self.n_studies, self.feature_dim)
        if any(c < 1 for c in counts):
            raise ConfigError("all structural counts must be >= 1")
        if not 0.0 <= self.report_noise_rate <= 1.0:
            raise ConfigError("report_noise_rate must be in [0, 1]")
        if self.synonym_count < 0:
            raise ConfigError("synonym_count must be >= 0")
        if self.label_signal_strength < 0:
            raise ConfigError("label_signal_strength must be >= 0")
        for p in (self.p_abnormal, self.p_child, self.p_explicit_negative):
            if not 0.0 <= p <= 1.0:
                raise ConfigError("probabilities must be in [0, 1]")


@dataclass
class SynthWorld:
    config: SynthConfig
    template: Template
    lexicon: TerminologyLexicon
    studies: list[FreeTextStudy]
    gold: list[StructuredReport]
    image_features: dict[str, np.ndarray]
    # per-option feature direction for positive-polarity labels
    directions: dict[str, np.ndarray] = field(default_factory=dict)
    positive_options: frozenset[str] = frozenset()


def build_synth_template(cfg: SynthConfig) -> Template:
    specs: list[dict] = []
    for i in range(cfg.n_l1):
        l1_id = f"l1_{i}"
        abnormal = f"region{i} abnormal"
        specs.append(
            {
                "id": l1_id,
                "level": 1,
                "text": f"any abnormality in region{i}",
                "mode": MODE_SINGLE,
                "options": [abnormal, f"region{i} normal"],
            }
        )
        for j in range(cfg.n_l2_per_l1):
            l2_id = f"l2_{i}_{j}"
            finding = f"lesion{i}x{j}"
            specs.append(
                {
                    "id": l2_id,
                    "level": 2,
                    "text": f"is {finding} present in region{i}",
                    "mode": MODE_SINGLE,
                    "options": [finding, f"no {finding}"],
                    "trigger": {
                        "parent_question": l1_id,
                        "parent_option": option_id_for(l1_id, abnormal),
                    },
                }
            )
            for k in range(cfg.n_l3_per_l2):
                specs.append(
                    {
                        "id": f"l3_{i}_{j}_{k}",
                        "level": 3,
                        "text": f"attribute set {k} of {finding}",
                        "mode": MODE_SINGLE,
                        "options": [
                            f"mark{i}x{j}x{k}v{m}" for m in range(cfg.n_values_per_l3)
                        ],
                        "trigger": {
                            "parent_question": l2_id,
                            "parent_option": option_id_for(l2_id, finding),
                        },
                    }
                )
    return build_template(f"synth-{cfg.seed}", specs)


def synth_synonyms(template: Template, count: int) -> dict[str, list[str]]:
    return {
        oid: [f"{opt.canonical_text} alias{k}" for k in range(count)]
        for oid, opt in template.options.items()
    }


def _polarity_sets(template: Template) -> tuple[frozenset[str], frozenset[str]]:
    """(positive-polarity option ids, negative-polarity option ids).

    Positive: level-1 'abnormal' options, level-2 finding options (those that
    trigger children), and all level-3 values.
    """
    positives: set[str] = set()
    negatives: set[str] = set()
    for q in template.questions:
        for oid in q.option_ids:
            if q.level == 3 or oid in template.children_by_option:
                positives.add(oid)
            else:
                negatives.add(oid)
    return frozenset(positives), frozenset(negatives)


def generate(cfg: SynthConfig) -> SynthWorld:
    """Deterministic world generation; identical configs give identical worlds."""
    rng = np.random.default_rng(cfg.seed)
    template = build_synth_template(cfg)
    lexicon = expand_terminology(
        template, StaticExpander(synth_synonyms(template, cfg.synonym_count))
    )
    positives, _ = _polarity_sets(template)

    directions = {
        oid: _unit(rng.normal(size=cfg.feature_dim))
        for oid in template.label_space
        if oid in positives
    }

    phrase_choices = {
        oid: [template.options[oid].canonical_text]
        + [f"{template.options[oid].canonical_text} alias{k}" for k in range(cfg.synonym_count)]
        for oid in template.label_space
    }

    def phrase_for(oid: str) -> str:
        variants = phrase_choices[oid]
        return variants[int(rng.integers(len(variants)))]

    studies: list[FreeTextStudy] = []
    gold: list[StructuredReport] = []
    features: dict[str, np.ndarray] = {}

    for s in range(cfg.n_studies):
        study_id = f"study{s:05d}"
        answers: dict[str, frozenset[str]] = {}
        for i in range(cfg.n_l1):
            l1 = template.questions_by_id[f"l1_{i}"]
            abnormal_oid, normal_oid = l1.option_ids
            if rng.random() < cfg.p_abnormal:
                answers[l1.id] = frozenset({abnormal_oid})
                n_pos = 1 + int(rng.binomial(cfg.n_l2_per_l1 - 1, cfg.p_child))
                chosen = rng.choice(cfg.n_l2_per_l1, size=n_pos, replace=False)
                chosen_set = {int(j) for j in chosen}
                for j in range(cfg.n_l2_per_l1):
                    l2 = template.questions_by_id[f"l2_{i}_{j}"]
                    pos_oid, neg_oid = l2.option_ids
                    if j in chosen_set:
                        answers[l2.id] = frozenset({pos_oid})
                        for k in range(cfg.n_l3_per_l2):
                            l3 = template.questions_by_id[f"l3_{i}_{j}_{k}"]
                            val = int(rng.integers(cfg.n_values_per_l3))
                            answers[l3.id] = frozenset({l3.option_ids[val]})
                    elif rng.random() < cfg.p_explicit_negative:
                        answers[l2.id] = frozenset({neg_oid})
            elif rng.random() < cfg.p_explicit_negative:
                answers[l1.id] = frozenset({normal_oid})

        report = StructuredReport(study_id=study_id, answers=answers)
        gold.append(report)

        sentences = [
            phrase_for(oid)
            for q in traversal_order(template)
            for oid in sorted(answers.get(q.id, frozenset()))
        ]

        selected = {oid for opts in answers.values() for oid in opts}
        feat = rng.normal(size=cfg.feature_dim)
        for oid in sorted(selected):
            if oid in directions:
                feat = feat + cfg.label_signal_strength * directions[oid]
        features[study_id] = feat

        if cfg.report_noise_rate > 0.0:
            noisy: list[str] = []
            unselected = [oid for oid in sorted(directions) if oid not in selected]
            for sentence in sentences:
                if rng.random() < cfg.report_noise_rate:
                    if rng.random() < 0.5 or not unselected:
                        continue  # phrase dropped
                    noisy.append(sentence)
                    distractor = unselected[int(rng.integers(len(unselected)))]
                    noisy.append(phrase_for(distractor))
                else:
                    noisy.append(sentence)
            sentences = noisy

        text = ". ".join(sentences) + ("." if sentences else "")
        studies.append(
            FreeTextStudy(study_id=study_id, report_text=text, image_ref=f"feat:{study_id}")
        )

    return SynthWorld(
        config=cfg,
        template=template,
        lexicon=lexicon,
        studies=studies,
        gold=gold,
        image_features=features,
        directions=directions,
        positive_options=positives,
    )


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def write_corpus(studies: list[FreeTextStudy], path: str | Path) -> None:
    lines = [
        json.dumps(
            {"image_ref": s.image_ref, "report_text": s.report_text, "study_id": s.study_id},
            sort_keys=True,
        )
        for s in studies
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_corpus(path: str | Path) -> list[FreeTextStudy]:
    studies = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            studies.append(
                FreeTextStudy(
                    study_id=str(doc["study_id"]),
                    report_text=str(doc["report_text"]),
                    image_ref=str(doc.get("image_ref", "")),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed corpus line: {exc}") from exc
    return studies


def write_features(features: dict[str, np.ndarray], path: str | Path) -> None:
    lines = [
        json.dumps(
            {"features": [float(x) for x in features[sid]], "study_id": sid},
            sort_keys=True,
        )
        for sid in sorted(features)
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")


def read_features(path: str | Path) -> dict[str, np.ndarray]:
    features = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
            features[str(doc["study_id"])] = np.asarray(doc["features"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ParseError(f"malformed feature line: {exc}") from exc
    return features


def write_world(world: SynthWorld, out_dir: str | Path) -> None:
    """Materialize the world as the file formats the pipeline consumes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_template(world.template, out / "template.json")
    write_lexicon(world.lexicon, out / "lexicon.tsv")
    write_corpus(world.studies, out / "corpus.jsonl")
    write_features(world.image_features, out / "features.jsonl")
    write_reports(world.gold, out / "gold.jsonl")
    (out / "synth_config.json").write_text(
        json.dumps(
            {
                "feature_dim": world.config.feature_dim,
                "label_signal_strength": world.config.label_signal_strength,
                "n_l1": world.config.n_l1,
                "n_l2_per_l1": world.config.n_l2_per_l1,
                "n_l3_per_l2": world.config.n_l3_per_l2,
                "n_studies": world.config.n_studies,
                "n_values_per_l3": world.config.n_values_per_l3,
                "p_abnormal": world.config.p_abnormal,
                "p_child": world.config.p_child,
                "p_explicit_negative": world.config.p_explicit_negative,
                "report_noise_rate": world.config.report_noise_rate,
                "seed": world.config.seed,
                "synonym_count": world.config.synonym_count,
            },
            sort_keys=True,
            indent=1,
        )
        + "\n",
        encoding="utf-8",
    )
