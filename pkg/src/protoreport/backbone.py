"""Pluggable toy backbone: image/text encoders, fusion, classifier.

The production-scale encoders are out of scope; these stand-ins keep the
interfaces (fixed-width embeddings in, one global logit vector over all
answer options out) while staying small, deterministic, and exactly
differentiable, so the knowledge branch can be verified end to end.

All math is float64. Weight matrices are (out, in); vectors are 1-D.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatchError, ValidationError
from .template import Template, traversal_order


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int  # raw image-feature width
    image_dim: int    # image embedding width == prototype embedding width
    text_buckets: int
    text_dim: int
    fused_dim: int
    proj_dim: int
    hidden_dim: int
    n_answers: int
    # extra text-input columns (answer-support scores in the early-fusion variant)
    text_extra: int = 0

    @property
    def text_in(self) -> int:
        return self.text_buckets + self.text_extra


@dataclass
class BackboneParams:
    w_img: np.ndarray
    b_img: np.ndarray
    w_txt: np.ndarray
    b_txt: np.ndarray
    w_fuse: np.ndarray
    b_fuse: np.ndarray
    w_cls: np.ndarray
    b_cls: np.ndarray

    def named(self) -> dict[str, np.ndarray]:
        return {
            "backbone.w_img": self.w_img,
            "backbone.b_img": self.b_img,
            "backbone.w_txt": self.w_txt,
            "backbone.b_txt": self.b_txt,
            "backbone.w_fuse": self.w_fuse,
            "backbone.b_fuse": self.b_fuse,
            "backbone.w_cls": self.w_cls,
            "backbone.b_cls": self.b_cls,
        }


@dataclass(frozen=True)
class ImageInput:
    study_id: str
    features: np.ndarray


@dataclass(frozen=True)
class QuestionContext:
    question_id: str
    # ((question id, (selected option ids...)), ...) for previously answered questions
    history: tuple[tuple[str, tuple[str, ...]], ...]
    rendered_text: str


@dataclass(frozen=True)
class FusedRepresentation:
    values: np.ndarray


@dataclass(frozen=True)
class BaseLogits:
    values: np.ndarray


def orthogonal_init(rng: np.random.Generator, out_dim: int, in_dim: int) -> np.ndarray:
    """Semi-orthogonal (out, in) matrix: an isometry on its smaller side."""
    a = rng.normal(size=(max(out_dim, in_dim), min(out_dim, in_dim)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if out_dim < in_dim:
        q = q.T
    return np.ascontiguousarray(q[:out_dim, :in_dim])


def init_backbone(dims: ModelDims, rng: np.random.Generator,
                  init_scale: float = 1.0) -> BackboneParams:
    """Scaled semi-orthogonal initialization.

    Orthogonal maps preserve input geometry (no angle distortion), which
    keeps embedding-space similarity faithful to feature-space similarity;
    ``init_scale`` well below 1 additionally keeps tanh units near-linear
    for typical input magnitudes.
    """

    def layer(out_dim: int, in_dim: int) -> tuple[np.ndarray, np.ndarray]:
        return init_scale * orthogonal_init(rng, out_dim, in_dim), np.zeros(out_dim)

    w_img, b_img = layer(dims.image_dim, dims.feature_dim)
    w_txt, b_txt = layer(dims.text_dim, dims.text_in)
    w_fuse, b_fuse = layer(dims.fused_dim, dims.image_dim + dims.text_dim)
    w_cls, b_cls = layer(dims.n_answers, dims.fused_dim)
    return BackboneParams(w_img, b_img, w_txt, b_txt, w_fuse, b_fuse, w_cls, b_cls)


def zero_backbone(dims: ModelDims) -> BackboneParams:
    z = np.zeros
    return BackboneParams(
        z((dims.image_dim, dims.feature_dim)), z(dims.image_dim),
        z((dims.text_dim, dims.text_in)), z(dims.text_dim),
        z((dims.fused_dim, dims.image_dim + dims.text_dim)), z(dims.fused_dim),
        z((dims.n_answers, dims.fused_dim)), z(dims.n_answers),
    )


def _affine_tanh(w: np.ndarray, b: np.ndarray, x: np.ndarray) -> np.ndarray:
    if x.shape[0] != w.shape[1]:
        raise DimensionMismatchError(f"input width {x.shape[0]} != expected {w.shape[1]}")
    return np.tanh(w @ x + b)


def token_histogram(text: str, buckets: int) -> np.ndarray:
    """Hashed token counts: unigrams plus adjacent bigrams, crc32 mod buckets.

    Bigrams make the histogram sensitive to token order, so contexts that
    differ only in history order hash differently.
    """
    hist = np.zeros(buckets)
    tokens = text.split()
    for gram in tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]:
        hist[zlib.crc32(gram.encode("utf-8")) % buckets] += 1.0
    return hist


def render_context(template: Template, question_id: str,
                   history: tuple[tuple[str, tuple[str, ...]], ...]) -> str:
    """Surface form fed to the text encoder: prior Q/A pairs then the question."""
    parts = []
    for qid, oids in history:
        q = template.questions_by_id[qid]
        if oids:
            answers = ", ".join(template.options[oid].canonical_text for oid in oids)
        else:
            answers = "none"
        parts.append(f"Q: {q.text} A: {answers}")
    parts.append(f"Q: {template.questions_by_id[question_id].text}")
    return "; ".join(parts)


def make_question_context(
    template: Template,
    question_id: str,
    history: tuple[tuple[str, tuple[str, ...]], ...] = (),
) -> QuestionContext:
    """Build a QuestionContext, checking that history precedes the question."""
    order = {q.id: i for i, q in enumerate(traversal_order(template))}
    if question_id not in order:
        raise ValidationError(f"unknown question {question_id}")
    for qid, _ in history:
        if qid not in order:
            raise ValidationError(f"unknown history question {qid}")
        if order[qid] >= order[question_id]:
            raise ValidationError(
                f"history question {qid} does not precede {question_id} in traversal order"
            )
    return QuestionContext(
        question_id=question_id,
        history=tuple((qid, tuple(oids)) for qid, oids in history),
        rendered_text=render_context(template, question_id, history),
    )


def encode_image(params: BackboneParams, features: np.ndarray) -> np.ndarray:
    return _affine_tanh(params.w_img, params.b_img, np.asarray(features, dtype=np.float64))


def encode_text(params: BackboneParams, dims: ModelDims, rendered_text: str,
                extra: np.ndarray | None = None) -> np.ndarray:
    hist = token_histogram(rendered_text, dims.text_buckets)
    if dims.text_extra:
        pad = np.zeros(dims.text_extra) if extra is None else np.asarray(extra, dtype=np.float64)
        if pad.shape[0] != dims.text_extra:
            raise DimensionMismatchError(
                f"text extra width {pad.shape[0]} != configured {dims.text_extra}"
            )
        hist = np.concatenate([hist, pad])
    elif extra is not None:
        raise DimensionMismatchError("extra text features supplied but text_extra is 0")
    return _affine_tanh(params.w_txt, params.b_txt, hist)


def fuse_features(params: BackboneParams, img_emb: np.ndarray,
                  txt_emb: np.ndarray) -> FusedRepresentation:
    joint = np.concatenate([np.asarray(img_emb, dtype=np.float64),
                            np.asarray(txt_emb, dtype=np.float64)])
    return FusedRepresentation(values=_affine_tanh(params.w_fuse, params.b_fuse, joint))


def classify(params: BackboneParams, fused: FusedRepresentation) -> BaseLogits:
    if fused.values.shape[0] != params.w_cls.shape[1]:
        raise DimensionMismatchError(
            f"fused width {fused.values.shape[0]} != classifier input {params.w_cls.shape[1]}"
        )
    return BaseLogits(values=params.w_cls @ fused.values + params.b_cls)


@dataclass(frozen=True)
class BaseTrace:
    """Forward-pass intermediates needed for exact backprop."""

    features: np.ndarray
    text_input: np.ndarray
    img_act: np.ndarray
    txt_act: np.ndarray
    fused_act: np.ndarray
    base_logits: np.ndarray


def forward_base(params: BackboneParams, dims: ModelDims, features: np.ndarray,
                 rendered_text: str, text_extra: np.ndarray | None = None) -> BaseTrace:
    features = np.asarray(features, dtype=np.float64)
    hist = token_histogram(rendered_text, dims.text_buckets)
    if dims.text_extra:
        pad = np.zeros(dims.text_extra) if text_extra is None else np.asarray(text_extra, dtype=np.float64)
        hist = np.concatenate([hist, pad])
    img_act = _affine_tanh(params.w_img, params.b_img, features)
    txt_act = _affine_tanh(params.w_txt, params.b_txt, hist)
    fused = fuse_features(params, img_act, txt_act)
    logits = classify(params, fused)
    return BaseTrace(
        features=features,
        text_input=hist,
        img_act=img_act,
        txt_act=txt_act,
        fused_act=fused.values,
        base_logits=logits.values,
    )


def backward_base(params: BackboneParams, trace: BaseTrace,
                  d_logits: np.ndarray, d_fused_extra: np.ndarray | None = None
                  ) -> dict[str, np.ndarray]:
    """Gradients of all backbone parameters given upstream gradients.

    ``d_logits`` flows through the classifier; ``d_fused_extra`` is any
    additional gradient arriving directly at the fused representation
    (the retrieval branch taps it).
    """
    d_fused = params.w_cls.T @ d_logits
    if d_fused_extra is not None:
        d_fused = d_fused + d_fused_extra
    grads = {
        "backbone.w_cls": np.outer(d_logits, trace.fused_act),
        "backbone.b_cls": d_logits.copy(),
    }
    d_pre_fuse = d_fused * (1.0 - trace.fused_act ** 2)
    joint = np.concatenate([trace.img_act, trace.txt_act])
    grads["backbone.w_fuse"] = np.outer(d_pre_fuse, joint)
    grads["backbone.b_fuse"] = d_pre_fuse
    d_joint = params.w_fuse.T @ d_pre_fuse
    d_img = d_joint[: trace.img_act.shape[0]]
    d_txt = d_joint[trace.img_act.shape[0]:]
    d_pre_img = d_img * (1.0 - trace.img_act ** 2)
    d_pre_txt = d_txt * (1.0 - trace.txt_act ** 2)
    grads["backbone.w_img"] = np.outer(d_pre_img, trace.features)
    grads["backbone.b_img"] = d_pre_img
    grads["backbone.w_txt"] = np.outer(d_pre_txt, trace.text_input)
    grads["backbone.b_txt"] = d_pre_txt
    return grads


def flatten_image_encoder(params: BackboneParams) -> np.ndarray:
    """Flat view of the image-encoder parameters (the EMA-tracked subset)."""
    return np.concatenate([params.w_img.ravel(), params.b_img.ravel()])


def set_image_encoder(params: BackboneParams, flat: np.ndarray) -> BackboneParams:
    n_w = params.w_img.size
    if flat.size != n_w + params.b_img.size:
        raise DimensionMismatchError(
            f"flat image-encoder vector has {flat.size} values, expected {n_w + params.b_img.size}"
        )
    return replace(
        params,
        w_img=flat[:n_w].reshape(params.w_img.shape).copy(),
        b_img=flat[n_w:].copy(),
    )
