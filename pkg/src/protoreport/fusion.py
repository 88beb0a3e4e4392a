"""Prototype-conditioned knowledge branch and late fusion.

Given the fused image-question representation, the branch retrieves
prototypes whose options are valid answers for the current question,
weights them by temperature-softmaxed cosine similarity in a learned
projection space, summarizes the retrieved evidence as a pooled embedding
plus a soft answer-support vector, maps that summary through a small MLP to
a per-answer support bias, and adds the bias to the backbone logits through
a learned per-answer scale:

    final_logits = base_logits + scale * support_bias

The scale starts at zero, so an untrained branch leaves the backbone
decision pathway untouched. When no compatible prototype exists the bias is
exactly zero. Backpropagation is analytic (including the paths through the
softmax and the cosine normalization); prototype embeddings are constants
and never receive gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import (
    BackboneParams,
    BaseLogits,
    BaseTrace,
    FusedRepresentation,
    ImageInput,
    ModelDims,
    QuestionContext,
    backward_base,
    forward_base,
    init_backbone,
)
from .bank import PrototypeBank
from .errors import (
    DimensionMismatchError,
    EmptyMaskError,
    NonFiniteGradientError,
    ValidationError,
)
from .template import Question

VARIANT_FULL = "prototype-residual"
VARIANT_NO_KNOWLEDGE = "no-knowledge"
VARIANT_RANDOMIZED = "randomized-prototypes"
VARIANT_EARLY_FUSION = "early-fusion"
VARIANTS = (VARIANT_FULL, VARIANT_NO_KNOWLEDGE, VARIANT_RANDOMIZED, VARIANT_EARLY_FUSION)


@dataclass
class FusionHeadParams:
    w_query: np.ndarray   # proj_dim x fused_dim
    b_query: np.ndarray
    w_proto: np.ndarray   # proj_dim x image_dim
    b_proto: np.ndarray
    w_hidden: np.ndarray  # hidden_dim x (image_dim + n_answers)
    b_hidden: np.ndarray
    w_out: np.ndarray     # n_answers x hidden_dim
    b_out: np.ndarray
    scale: np.ndarray     # n_answers, initialized to zero
    temperature: float = 0.1
    softmax_weights: bool = True  # False: raw-cosine weighting (ablation)

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValidationError(f"temperature must be > 0, got {self.temperature}")

    def named(self) -> dict[str, np.ndarray]:
        return {
            "head.w_query": self.w_query,
            "head.b_query": self.b_query,
            "head.w_proto": self.w_proto,
            "head.b_proto": self.b_proto,
            "head.w_hidden": self.w_hidden,
            "head.b_hidden": self.b_hidden,
            "head.w_out": self.w_out,
            "head.b_out": self.b_out,
            "head.scale": self.scale,
        }


@dataclass(frozen=True)
class RetrievalWeights:
    indices: tuple[int, ...]   # bank prototype indices passing the validity mask
    weights: np.ndarray        # matching nonnegative weights

    @property
    def empty(self) -> bool:
        return not self.indices


@dataclass(frozen=True)
class EvidenceSummary:
    pooled_embedding: np.ndarray  # weighted prototype features, length dim
    answer_support: np.ndarray    # weighted one-hot rows, length n_answers


@dataclass(frozen=True)
class FusedLogits:
    values: np.ndarray


def init_fusion_head(
    dims: ModelDims,
    rng: np.random.Generator,
    temperature: float = 0.1,
    softmax_weights: bool = True,
    fusion_image_block: np.ndarray | None = None,
) -> FusionHeadParams:
    """Seeded head initialization, aligned so retrieval works from step 0.

    Two independent random projections would map the fused representation
    and the prototype embeddings into unrelated subspaces, making the
    initial cosine weights pure noise. Instead the projections start as a
    matched pair: the prototype side is a truncated identity (the shared
    space is the image-embedding space) and, when the fusion layer's image
    block is supplied, the query side starts as its transpose, which
    approximately recovers the image embedding from the fused vector.

    The MLP likewise starts as a near-identity on the answer-support half
    of its input (b_sup ~ u), so the zero-initialized scale receives a
    usefully correlated gradient immediately. The pass-through block uses a
    small tanh gain that the inverse on the output side cancels to first
    order.
    """

    from .backbone import orthogonal_init

    def layer(out_dim: int, in_dim: int) -> tuple[np.ndarray, np.ndarray]:
        return orthogonal_init(rng, out_dim, in_dim), np.zeros(out_dim)

    w_query, b_query = layer(dims.proj_dim, dims.fused_dim)
    w_proto, b_proto = layer(dims.proj_dim, dims.image_dim)
    w_hidden, b_hidden = layer(dims.hidden_dim, dims.image_dim + dims.n_answers)
    w_out, b_out = layer(dims.n_answers, dims.hidden_dim)

    w_proto = np.zeros((dims.proj_dim, dims.image_dim))
    keep = min(dims.proj_dim, dims.image_dim)
    w_proto[np.arange(keep), np.arange(keep)] = 1.0
    if fusion_image_block is not None:
        recover = np.ascontiguousarray(fusion_image_block.T)  # image_dim x fused_dim
        norm = float(np.max(np.abs(recover)))
        if norm > 0:
            w_query = (recover / norm)[:dims.proj_dim, :]
        else:
            w_query = w_query
        if w_query.shape[0] < dims.proj_dim:
            pad = np.zeros((dims.proj_dim - w_query.shape[0], dims.fused_dim))
            w_query = np.vstack([w_query, pad])

    gain = 0.5
    n_pass = min(dims.n_answers, dims.hidden_dim)
    w_hidden[:n_pass, :] = 0.0
    w_hidden[np.arange(n_pass), dims.image_dim + np.arange(n_pass)] = gain
    w_out[:, :n_pass] = 0.0
    w_out[np.arange(n_pass), np.arange(n_pass)] = 1.0 / gain

    return FusionHeadParams(
        w_query, b_query, w_proto, b_proto, w_hidden, b_hidden, w_out, b_out,
        scale=np.zeros(dims.n_answers),
        temperature=temperature,
        softmax_weights=softmax_weights,
    )


@dataclass
class Model:
    dims: ModelDims
    backbone: BackboneParams
    head: FusionHeadParams
    variant: str = VARIANT_FULL

    def named_params(self) -> dict[str, np.ndarray]:
        return {**self.backbone.named(), **self.head.named()}


def init_model(
    dims: ModelDims,
    seed: int,
    variant: str = VARIANT_FULL,
    temperature: float = 0.1,
    softmax_weights: bool = True,
    encoder_init_scale: float = 1.0,
) -> Model:
    """Seeded initialization; the backbone stream is independent of the head
    stream, so variants sharing dims share backbone initialization exactly."""
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    backbone = init_backbone(dims, np.random.default_rng(seed), init_scale=encoder_init_scale)
    head = init_fusion_head(
        dims, np.random.default_rng(seed + 1),
        temperature=temperature, softmax_weights=softmax_weights,
        fusion_image_block=backbone.w_fuse[:, : dims.image_dim],
    )
    return Model(dims=dims, backbone=backbone, head=head, variant=variant)


def valid_mask(question: Question, bank: PrototypeBank) -> tuple[int, ...]:
    """Bank indices of prototypes whose option is an answer of ``question``."""
    allowed = set(question.option_ids)
    return tuple(i for i, p in enumerate(bank.prototypes) if p.option_id in allowed)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - np.max(scores)
    e = np.exp(shifted)
    return e / e.sum()


@dataclass(frozen=True)
class RetrievalTrace:
    indices: tuple[int, ...]
    proj_query: np.ndarray
    proj_protos: np.ndarray   # n_valid x proj_dim
    query_norm: float
    proto_norms: np.ndarray
    cosines: np.ndarray
    weights: np.ndarray


def retrieve(
    fused: FusedRepresentation,
    bank: PrototypeBank,
    mask: tuple[int, ...],
    head: FusionHeadParams,
) -> RetrievalWeights:
    weights = _retrieve_traced(fused.values, bank, mask, head)
    if weights is None:
        return RetrievalWeights(indices=(), weights=np.zeros(0))
    return RetrievalWeights(indices=weights.indices, weights=weights.weights.copy())


def _retrieve_traced(
    fused_values: np.ndarray,
    bank: PrototypeBank,
    mask: tuple[int, ...],
    head: FusionHeadParams,
) -> RetrievalTrace | None:
    if not mask:
        return None
    if any(i < 0 or i >= bank.size for i in mask):
        raise ValidationError("mask index outside bank")
    proj_query = head.w_query @ fused_values + head.b_query
    protos = np.stack([bank.prototypes[i].embedding for i in mask])
    proj_protos = protos @ head.w_proto.T + head.b_proto
    query_norm = float(np.linalg.norm(proj_query))
    proto_norms = np.linalg.norm(proj_protos, axis=1)
    cosines = np.zeros(len(mask))
    if query_norm > 0.0:
        nonzero = proto_norms > 0.0
        cosines[nonzero] = (proj_protos[nonzero] @ proj_query) / (
            proto_norms[nonzero] * query_norm
        )
    if head.softmax_weights:
        weights = _softmax(cosines / head.temperature)
    else:
        weights = cosines.copy()
    return RetrievalTrace(
        indices=tuple(mask),
        proj_query=proj_query,
        proj_protos=proj_protos,
        query_norm=query_norm,
        proto_norms=proto_norms,
        cosines=cosines,
        weights=weights,
    )


def summarize(retrieval: RetrievalWeights, bank: PrototypeBank) -> EvidenceSummary:
    """Weighted sums of prototype embeddings and their one-hot answer rows."""
    pooled = np.zeros(bank.dim)
    support = np.zeros(bank.answer_dim)
    for idx, w in zip(retrieval.indices, retrieval.weights):
        proto = bank.prototypes[idx]
        pooled += w * proto.embedding
        support += w * proto.answer_onehot
    return EvidenceSummary(pooled_embedding=pooled, answer_support=support)


def support_bias(summary: EvidenceSummary | None, head: FusionHeadParams) -> np.ndarray:
    """MLP over the concatenated evidence summary; zero without retrieval."""
    if summary is None:
        return np.zeros(head.b_out.shape[0])
    joint = np.concatenate([summary.pooled_embedding, summary.answer_support])
    if joint.shape[0] != head.w_hidden.shape[1]:
        raise DimensionMismatchError(
            f"summary width {joint.shape[0]} != MLP input {head.w_hidden.shape[1]}"
        )
    hidden = np.tanh(head.w_hidden @ joint + head.b_hidden)
    return head.w_out @ hidden + head.b_out


def fuse(base: BaseLogits, bias: np.ndarray, head: FusionHeadParams) -> FusedLogits:
    """final = base + scale * bias, elementwise."""
    if base.values.shape != bias.shape or bias.shape != head.scale.shape:
        raise DimensionMismatchError(
            f"logit shapes differ: base {base.values.shape}, bias {bias.shape}, "
            f"scale {head.scale.shape}"
        )
    return FusedLogits(values=base.values + head.scale * bias)


@dataclass(frozen=True)
class ForwardTrace:
    question: Question
    base: BaseTrace
    retrieval: RetrievalTrace | None
    summary: EvidenceSummary | None
    hidden_act: np.ndarray | None
    bias: np.ndarray
    final_logits: np.ndarray
    knowledge_on: bool


def forward(
    model: Model,
    bank: PrototypeBank | None,
    image: ImageInput,
    context: QuestionContext,
    question: Question,
) -> tuple[FusedLogits, ForwardTrace]:
    """Full forward pass for one (image, question) pair.

    The trace keeps every intermediate needed for exact backprop and for the
    identity/ablation checks.
    """
    knowledge_on = (
        model.variant in (VARIANT_FULL, VARIANT_RANDOMIZED)
        and bank is not None
        and bank.size > 0
    )

    text_extra = None
    if model.variant == VARIANT_EARLY_FUSION and model.dims.text_extra:
        # Stub: the question's valid prototypes contribute an unweighted
        # answer-support vector appended to the text-encoder input. The
        # vector is parameter-free, so it is a constant input feature.
        text_extra = np.zeros(model.dims.text_extra)
        if bank is not None and bank.size > 0:
            mask_idx = valid_mask(question, bank)
            if mask_idx:
                text_extra = np.mean(
                    [bank.prototypes[i].answer_onehot for i in mask_idx], axis=0
                )

    base = forward_base(
        model.backbone, model.dims, image.features, context.rendered_text, text_extra
    )

    retrieval = None
    summary = None
    hidden_act = None
    bias = np.zeros(model.dims.n_answers)
    if knowledge_on:
        retrieval = _retrieve_traced(base.fused_act, bank, valid_mask(question, bank), model.head)
        if retrieval is not None:
            summary = summarize(RetrievalWeights(retrieval.indices, retrieval.weights), bank)
            joint = np.concatenate([summary.pooled_embedding, summary.answer_support])
            hidden_act = np.tanh(model.head.w_hidden @ joint + model.head.b_hidden)
            bias = model.head.w_out @ hidden_act + model.head.b_out

    if retrieval is None:
        final = base.base_logits.copy()
    else:
        final = base.base_logits + model.head.scale * bias

    trace = ForwardTrace(
        question=question,
        base=base,
        retrieval=retrieval,
        summary=summary,
        hidden_act=hidden_act,
        bias=bias,
        final_logits=final,
        knowledge_on=knowledge_on,
    )
    return FusedLogits(values=final), trace


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def masked_bce_loss(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> float:
    """Mean binary cross-entropy with logits over active mask positions."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != targets.shape or logits.shape != mask.shape:
        raise DimensionMismatchError(
            f"loss shapes differ: logits {logits.shape}, targets {targets.shape}, "
            f"mask {mask.shape}"
        )
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("loss mask has no active positions")
    z = logits[mask]
    t = targets[mask]
    # Stable BCE-with-logits: max(z,0) - z*t + log(1 + exp(-|z|))
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    return float(per.sum() / n)


def loss_gradient_wrt_logits(logits: np.ndarray, targets: np.ndarray,
                             mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    n = int(mask.sum())
    if n == 0:
        raise EmptyMaskError("loss mask has no active positions")
    grad = np.zeros_like(np.asarray(logits, dtype=np.float64))
    grad[mask] = (_sigmoid(logits[mask]) - targets[mask]) / n
    return grad


def zero_grads(model: Model) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in model.named_params().items()}


def backward(
    model: Model,
    bank: PrototypeBank | None,
    trace: ForwardTrace,
    targets: np.ndarray,
    mask: np.ndarray,
) -> dict[str, np.ndarray]:
    """Exact gradients of the masked BCE loss for every trainable parameter.

    Prototype embeddings are external memory and receive no gradient. Raises
    NonFiniteGradientError if any gradient entry is NaN or infinite.
    """
    head = model.head
    grads = zero_grads(model)

    d_final = loss_gradient_wrt_logits(trace.final_logits, targets, mask)
    d_base_logits = d_final.copy()
    d_fused_extra = None

    if trace.retrieval is not None:
        retrieval = trace.retrieval
        summary = trace.summary
        assert summary is not None and trace.hidden_act is not None

        grads["head.scale"] = d_final * trace.bias
        d_bias = d_final * head.scale

        # MLP backward
        grads["head.w_out"] = np.outer(d_bias, trace.hidden_act)
        grads["head.b_out"] = d_bias
        d_hidden = head.w_out.T @ d_bias
        d_pre_hidden = d_hidden * (1.0 - trace.hidden_act ** 2)
        joint = np.concatenate([summary.pooled_embedding, summary.answer_support])
        grads["head.w_hidden"] = np.outer(d_pre_hidden, joint)
        grads["head.b_hidden"] = d_pre_hidden
        d_joint = head.w_hidden.T @ d_pre_hidden
        dim = summary.pooled_embedding.shape[0]
        d_pooled = d_joint[:dim]
        d_support = d_joint[dim:]

        # Weighted sums: d weight_i = d_pooled . P_i + d_support . A_i
        d_weights = np.array(
            [
                d_pooled @ bank.prototypes[i].embedding
                + d_support @ bank.prototypes[i].answer_onehot
                for i in retrieval.indices
            ]
        )

        if head.softmax_weights:
            w = retrieval.weights
            d_cos = w * (d_weights - float(w @ d_weights)) / head.temperature
        else:
            d_cos = d_weights

        # Cosine backward. cos_i = q.p_i / (|q||p_i|); zero-norm pairs were
        # defined as cos=0 and get zero gradient.
        d_query = np.zeros_like(retrieval.proj_query)
        d_proj_protos = np.zeros_like(retrieval.proj_protos)
        qn = retrieval.query_norm
        if qn > 0.0:
            q = retrieval.proj_query
            for row, (dc, pn) in enumerate(zip(d_cos, retrieval.proto_norms)):
                if pn <= 0.0 or dc == 0.0:
                    continue
                p = retrieval.proj_protos[row]
                c = retrieval.cosines[row]
                d_query += dc * (p / (qn * pn) - c * q / (qn * qn))
                d_proj_protos[row] = dc * (q / (qn * pn) - c * p / (pn * pn))

        # Projection layers. Prototype embeddings are constants.
        protos = np.stack([bank.prototypes[i].embedding for i in retrieval.indices])
        grads["head.w_proto"] = d_proj_protos.T @ protos
        grads["head.b_proto"] = d_proj_protos.sum(axis=0)
        grads["head.w_query"] = np.outer(d_query, trace.base.fused_act)
        grads["head.b_query"] = d_query
        d_fused_extra = head.w_query.T @ d_query

    grads.update(backward_base(model.backbone, trace.base, d_base_logits, d_fused_extra))

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    return grads


def loss_and_gradients(
    model: Model,
    bank: PrototypeBank | None,
    image: ImageInput,
    context: QuestionContext,
    question: Question,
    targets: np.ndarray,
    mask: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    logits, trace = forward(model, bank, image, context, question)
    loss = masked_bce_loss(logits.values, targets, mask)
    grads = backward(model, bank, trace, targets, mask)
    return loss, grads


def question_mask(dims: ModelDims, question: Question, option_index: dict[str, int]) -> np.ndarray:
    mask = np.zeros(dims.n_answers, dtype=bool)
    for oid in question.option_ids:
        mask[option_index[oid]] = True
    return mask
