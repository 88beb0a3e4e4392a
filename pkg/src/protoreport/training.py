"""End-to-end training of the fusion head and toy backbone.

One optimizer step accumulates per-sample gradients over the whole
effective batch (micro-batching changes nothing: the running sum is divided
by the total sample count only at update time, so chunked and unchunked
accumulation produce bit-identical updates), applies Adam, advances the EMA
copy of the image encoder, and refreshes the prototype bank at the
configured cadence.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .backbone import (
    ImageInput,
    ModelDims,
    QuestionContext,
    flatten_image_encoder,
    make_question_context,
    render_context,
)
from .bank import (
    EmaEncoderState,
    FeatureEncoderEmbedder,
    PrototypeBank,
    ema_update,
    randomize_bank,
    refresh_bank,
)
from .errors import ConfigError, ParseError, ValidationError
from .fusion import (
    VARIANT_EARLY_FUSION,
    VARIANT_FULL,
    VARIANT_NO_KNOWLEDGE,
    VARIANT_RANDOMIZED,
    VARIANTS,
    Model,
    backward,
    forward,
    init_model,
    masked_bce_loss,
    question_mask,
)
from .template import Question, StructuredReport, Template, traversal_order

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3  # toy-scale default; full-scale runs use 1e-5
    batch_size: int = 8
    accumulation: int = 4
    n_steps: int = 1000
    refresh_cadence: int = 10_000
    ema_decay: float = 0.999
    weight_decay: float = 0.0  # decoupled (AdamW-style)
    sample_size: int = 5  # K exemplars per prototype
    temperature: float = 0.1
    softmax_weights: bool = True
    encoder_init_scale: float = 1.0
    # start the classifier bias at per-option prior log-odds, so training does
    # not spend its early steps violently recalibrating through the encoders
    prior_logit_init: bool = True
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.accumulation < 1:
            raise ConfigError("batch_size and accumulation must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must be in [0, 1]")


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def init_adam(params: dict[str, np.ndarray]) -> AdamState:
    return AdamState(
        step=0,
        m={k: np.zeros_like(p) for k, p in params.items()},
        v={k: np.zeros_like(p) for k, p in params.items()},
    )


def adam_apply(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> None:
    """In-place Adam update with decoupled weight decay (zero by default)."""
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    bias1 = 1.0 - b1 ** state.step
    bias2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        p -= cfg.learning_rate * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
                                  + cfg.weight_decay * p)


@dataclass(frozen=True)
class TrainSample:
    """One supervised question instance."""

    study_id: str
    question: Question
    features: np.ndarray
    context: QuestionContext
    targets: np.ndarray
    mask: np.ndarray


@dataclass
class BankRefresher:
    """Rebuilds prototype embeddings from pools with the EMA image encoder."""

    pools: dict[str, list[str]]
    features: dict[str, np.ndarray]
    template: Template

    def __call__(self, bank: PrototypeBank, model: Model,
                 ema: EmaEncoderState, step: int) -> PrototypeBank:
        from .backbone import encode_image, set_image_encoder

        ema_backbone = set_image_encoder(model.backbone, ema.parameters)
        embedder = FeatureEncoderEmbedder(
            self.features,
            lambda x: encode_image(ema_backbone, x),
            dim=model.dims.image_dim,
        )
        return refresh_bank(bank, self.pools, embedder, self.template, step)


@dataclass
class TrainState:
    model: Model
    bank: PrototypeBank | None
    optimizer: AdamState
    ema: EmaEncoderState
    cfg: TrainConfig
    step: int = 0
    refresher: BankRefresher | None = None
    losses: list[float] = field(default_factory=list)


def init_train_state(
    model: Model,
    bank: PrototypeBank | None,
    cfg: TrainConfig,
    refresher: BankRefresher | None = None,
) -> TrainState:
    return TrainState(
        model=model,
        bank=bank,
        optimizer=init_adam(model.named_params()),
        ema=EmaEncoderState(
            parameters=flatten_image_encoder(model.backbone).copy(),
            decay=cfg.ema_decay,
        ),
        cfg=cfg,
        refresher=refresher,
    )


def accumulate_gradients(
    model: Model,
    bank: PrototypeBank | None,
    batch: list[TrainSample],
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean loss and mean gradients over the batch, in stable sample order."""
    if not batch:
        raise ValidationError("empty training batch")
    total = {name: np.zeros_like(p) for name, p in model.named_params().items()}
    loss_sum = 0.0
    for sample in batch:
        image = ImageInput(study_id=sample.study_id, features=sample.features)
        logits, trace = forward(model, bank, image, sample.context, sample.question)
        loss_sum += masked_bce_loss(logits.values, sample.targets, sample.mask)
        grads = backward(model, bank, trace, sample.targets, sample.mask)
        for name in total:
            total[name] += grads[name]
    n = float(len(batch))
    return loss_sum / n, {name: g / n for name, g in total.items()}


def train_step(state: TrainState, batch: list[TrainSample]) -> float:
    """One optimizer step over an effective batch (already accumulation-sized)."""
    mean_loss, grads = accumulate_gradients(state.model, state.bank, batch)
    adam_apply(state.model.named_params(), grads, state.optimizer, state.cfg)
    state.ema = ema_update(flatten_image_encoder(state.model.backbone), state.ema)
    state.step += 1
    state.losses.append(mean_loss)

    if (
        state.refresher is not None
        and state.bank is not None
        and state.bank.size > 0
        and state.model.variant not in (VARIANT_RANDOMIZED,)
        and state.cfg.refresh_cadence > 0
        and state.step % state.cfg.refresh_cadence == 0
    ):
        state.bank = state.refresher(state.bank, state.model, state.ema, state.step)
        log.info("bank refreshed at step %d", state.step)
    return mean_loss


def make_training_samples(
    template: Template,
    gold: list[StructuredReport],
    features: dict[str, np.ndarray],
    dims: ModelDims,
) -> list[TrainSample]:
    """Teacher-forced samples: walk the template with gold gating, appending
    gold answers of preceding answered questions to the context.

    Questions whose trigger is met but which gold leaves unanswered are
    supervised as all-negative.
    """
    order = traversal_order(template)
    samples: list[TrainSample] = []
    for report in gold:
        feats = features[report.study_id]
        history: list[tuple[str, tuple[str, ...]]] = []
        for question in order:
            if question.trigger is not None:
                parent_q, parent_opt = question.trigger
                if parent_opt not in report.answers.get(parent_q, frozenset()):
                    continue
            selected = sorted(report.answers.get(question.id, frozenset()))
            targets = np.zeros(dims.n_answers)
            for oid in selected:
                targets[template.option_index[oid]] = 1.0
            context = QuestionContext(
                question_id=question.id,
                history=tuple(history),
                rendered_text=render_context(template, question.id, tuple(history)),
            )
            samples.append(
                TrainSample(
                    study_id=report.study_id,
                    question=question,
                    features=feats,
                    context=context,
                    targets=targets,
                    mask=question_mask(dims, question, template.option_index),
                )
            )
            if selected:
                history.append((question.id, tuple(selected)))
    return samples


@dataclass
class TrainResult:
    model: Model
    bank: PrototypeBank | None
    ema: EmaEncoderState
    losses: list[float]


def prepare_variant_bank(
    bank: PrototypeBank | None,
    variant: str,
    seed: int,
) -> PrototypeBank | None:
    if variant == VARIANT_NO_KNOWLEDGE:
        return None
    if variant == VARIANT_RANDOMIZED and bank is not None:
        return randomize_bank(bank, seed)
    return bank


def run_training(
    template: Template,
    gold: list[StructuredReport],
    features: dict[str, np.ndarray],
    bank: PrototypeBank | None,
    dims: ModelDims,
    cfg: TrainConfig,
    variant: str = VARIANT_FULL,
    pools: dict[str, list[str]] | None = None,
) -> TrainResult:
    """Train a fresh model for ``cfg.n_steps`` optimizer steps."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if variant == VARIANT_EARLY_FUSION:
        dims = replace(dims, text_extra=dims.n_answers)
    model = init_model(
        dims, cfg.seed, variant=variant,
        temperature=cfg.temperature, softmax_weights=cfg.softmax_weights,
        encoder_init_scale=cfg.encoder_init_scale,
    )

    bank = prepare_variant_bank(bank, variant, cfg.seed)
    refresher = None
    if pools is not None and bank is not None:
        refresher = BankRefresher(pools=pools, features=features, template=template)
    state = init_train_state(model, bank, cfg, refresher)

    samples = make_training_samples(template, gold, features, dims)
    if not samples:
        raise ValidationError("no training samples; gold reports are empty")

    if cfg.prior_logit_init:
        asked = np.zeros(dims.n_answers)
        positives = np.zeros(dims.n_answers)
        for s in samples:
            asked += s.mask
            positives += s.targets
        prior = (positives + 0.5) / (asked + 1.0)
        model.backbone.b_cls[:] = np.log(prior / (1.0 - prior))

    rng = np.random.default_rng(cfg.seed + 7)
    effective = cfg.batch_size * cfg.accumulation
    queue: list[int] = []
    for _ in range(cfg.n_steps):
        while len(queue) < effective:
            queue.extend(rng.permutation(len(samples)).tolist())
        batch_idx, queue = queue[:effective], queue[effective:]
        train_step(state, [samples[i] for i in batch_idx])

    return TrainResult(model=state.model, bank=state.bank, ema=state.ema, losses=state.losses)


def checkpoint_to_json(model: Model, optimizer: AdamState | None = None,
                       step: int = 0) -> str:
    """Named parameter tensors with shapes, plus head scalars and step."""
    doc: dict = {
        "dims": {
            "feature_dim": model.dims.feature_dim,
            "image_dim": model.dims.image_dim,
            "text_buckets": model.dims.text_buckets,
            "text_dim": model.dims.text_dim,
            "fused_dim": model.dims.fused_dim,
            "proj_dim": model.dims.proj_dim,
            "hidden_dim": model.dims.hidden_dim,
            "n_answers": model.dims.n_answers,
            "text_extra": model.dims.text_extra,
        },
        "variant": model.variant,
        "temperature": model.head.temperature,
        "softmax_weights": model.head.softmax_weights,
        "step": step,
        "params": {
            name: {"shape": list(arr.shape), "data": [float(x) for x in arr.ravel()]}
            for name, arr in sorted(model.named_params().items())
        },
    }
    if optimizer is not None:
        doc["optimizer"] = {
            "step": optimizer.step,
            "m": {k: [float(x) for x in v.ravel()] for k, v in sorted(optimizer.m.items())},
            "v": {k: [float(x) for x in v.ravel()] for k, v in sorted(optimizer.v.items())},
        }
    return json.dumps(doc, sort_keys=True, indent=1) + "\n"


def model_from_checkpoint(text: str) -> Model:
    from .backbone import BackboneParams
    from .fusion import FusionHeadParams

    try:
        doc = json.loads(text)
        d = doc["dims"]
        dims = ModelDims(
            feature_dim=d["feature_dim"], image_dim=d["image_dim"],
            text_buckets=d["text_buckets"], text_dim=d["text_dim"],
            fused_dim=d["fused_dim"], proj_dim=d["proj_dim"],
            hidden_dim=d["hidden_dim"], n_answers=d["n_answers"],
            text_extra=d.get("text_extra", 0),
        )
        params = {
            name: np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
            for name, rec in doc["params"].items()
        }
        backbone = BackboneParams(
            w_img=params["backbone.w_img"], b_img=params["backbone.b_img"],
            w_txt=params["backbone.w_txt"], b_txt=params["backbone.b_txt"],
            w_fuse=params["backbone.w_fuse"], b_fuse=params["backbone.b_fuse"],
            w_cls=params["backbone.w_cls"], b_cls=params["backbone.b_cls"],
        )
        head = FusionHeadParams(
            w_query=params["head.w_query"], b_query=params["head.b_query"],
            w_proto=params["head.w_proto"], b_proto=params["head.b_proto"],
            w_hidden=params["head.w_hidden"], b_hidden=params["head.b_hidden"],
            w_out=params["head.w_out"], b_out=params["head.b_out"],
            scale=params["head.scale"],
            temperature=float(doc["temperature"]),
            softmax_weights=bool(doc["softmax_weights"]),
        )
        return Model(dims=dims, backbone=backbone, head=head, variant=doc["variant"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from exc


def write_checkpoint(model: Model, path: str | Path,
                     optimizer: AdamState | None = None, step: int = 0) -> None:
    Path(path).write_text(checkpoint_to_json(model, optimizer, step), encoding="utf-8")


def read_checkpoint(path: str | Path) -> Model:
    return model_from_checkpoint(Path(path).read_text(encoding="utf-8"))
