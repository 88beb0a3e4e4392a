"""Prototype bank: one max-pooled exemplar embedding per covered answer option.

The bank is external read-only memory for the fusion head. Construction
samples up to K exemplar studies per option with a per-option seeded
generator, so a later refresh with an updated encoder re-embeds exactly the
same studies. Banks are immutable; refresh returns a new bank that callers
swap in atomically.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .errors import DimensionMismatchError, EmptyInputError, ParseError, ValidationError
from .template import Template

log = logging.getLogger(__name__)


class ImageEmbedder(Protocol):
    """Maps a study id to its image embedding (length ``dim``)."""

    dim: int

    def embed_study(self, study_id: str) -> np.ndarray: ...


class FeatureEncoderEmbedder:
    """Embeds stored raw feature vectors through an image-encoder function."""

    def __init__(self, features: dict[str, np.ndarray],
                 encode: Callable[[np.ndarray], np.ndarray], dim: int):
        self.features = features
        self.encode = encode
        self.dim = dim

    def embed_study(self, study_id: str) -> np.ndarray:
        return self.encode(self.features[study_id])


@dataclass(frozen=True)
class Prototype:
    option_id: str
    embedding: np.ndarray        # length dim
    answer_onehot: np.ndarray    # length answer_dim, exactly one 1
    support_count: int
    sampled_study_ids: tuple[str, ...]


@dataclass(frozen=True)
class PrototypeBank:
    prototypes: tuple[Prototype, ...]
    dim: int
    answer_dim: int
    built_at_step: int
    seed: int
    sample_size: int  # K

    @property
    def size(self) -> int:
        return len(self.prototypes)

    def option_ids(self) -> tuple[str, ...]:
        return tuple(p.option_id for p in self.prototypes)

    def embedding_matrix(self) -> np.ndarray:
        if not self.prototypes:
            return np.zeros((0, self.dim))
        return np.stack([p.embedding for p in self.prototypes])

    def answer_matrix(self) -> np.ndarray:
        if not self.prototypes:
            return np.zeros((0, self.answer_dim))
        return np.stack([p.answer_onehot for p in self.prototypes])


def empty_bank(dim: int, answer_dim: int, seed: int = 0, sample_size: int = 5) -> PrototypeBank:
    return PrototypeBank(
        prototypes=(), dim=dim, answer_dim=answer_dim,
        built_at_step=0, seed=seed, sample_size=sample_size,
    )


def aggregate_maxpool(embeddings: list[np.ndarray]) -> np.ndarray:
    """Element-wise maximum across exemplar embeddings.

    Commutative and idempotent over the input multiset; keeps the strongest
    per-coordinate signal.
    """
    if not embeddings:
        raise EmptyInputError("cannot max-pool zero embeddings")
    first = np.asarray(embeddings[0], dtype=np.float64)
    for e in embeddings[1:]:
        if np.asarray(e).shape != first.shape:
            raise DimensionMismatchError(
                f"embedding shape {np.asarray(e).shape} != {first.shape}"
            )
    return np.max(np.stack([np.asarray(e, dtype=np.float64) for e in embeddings]), axis=0)


def _option_rng(seed: int, option_id: str) -> np.random.Generator:
    """Per-option generator derived from the global seed, stable across calls."""
    digest = hashlib.sha256(f"{seed}|{option_id}".encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


def sample_pool(pool: list[str], option_id: str, sample_size: int, seed: int) -> list[str]:
    """Uniform sample without replacement of min(K, |pool|) study ids."""
    take = min(sample_size, len(pool))
    rng = _option_rng(seed, option_id)
    idx = rng.choice(len(pool), size=take, replace=False)
    return [pool[i] for i in idx]


def build_bank(
    pools: dict[str, list[str]],
    encoder: ImageEmbedder,
    sample_size: int,
    seed: int,
    template: Template,
    built_at_step: int = 0,
) -> PrototypeBank:
    """Assemble one prototype per non-empty pool.

    Deterministic given (pools, encoder parameters, K, seed). Studies whose
    embedding fails are skipped; an option whose every pick fails gets no
    prototype and is logged.
    """
    if sample_size < 1:
        raise ValidationError(f"sample size must be >= 1, got {sample_size}")
    answer_dim = template.n_answers
    prototypes: list[Prototype] = []
    for option_id in sorted(pools):
        pool = pools[option_id]
        if not pool:
            continue
        if option_id not in template.option_index:
            raise ValidationError(f"pool option {option_id} not in template label space")
        picked = sample_pool(pool, option_id, sample_size, seed)
        embeddings = []
        kept_ids = []
        for study_id in picked:
            try:
                emb = np.asarray(encoder.embed_study(study_id), dtype=np.float64)
            except Exception as exc:  # provider failure for one study
                log.warning("embedding failed for study %s (option %s): %s",
                            study_id, option_id, exc)
                continue
            if emb.shape != (encoder.dim,):
                raise DimensionMismatchError(
                    f"encoder returned shape {emb.shape}, expected ({encoder.dim},)"
                )
            embeddings.append(emb)
            kept_ids.append(study_id)
        if not embeddings:
            log.warning("option %s: all sampled embeddings failed; no prototype", option_id)
            continue
        onehot = np.zeros(answer_dim)
        onehot[template.option_index[option_id]] = 1.0
        prototypes.append(
            Prototype(
                option_id=option_id,
                embedding=aggregate_maxpool(embeddings),
                answer_onehot=onehot,
                support_count=len(embeddings),
                sampled_study_ids=tuple(kept_ids),
            )
        )
    return PrototypeBank(
        prototypes=tuple(prototypes),
        dim=encoder.dim,
        answer_dim=answer_dim,
        built_at_step=built_at_step,
        seed=seed,
        sample_size=sample_size,
    )


def refresh_bank(
    bank: PrototypeBank,
    pools: dict[str, list[str]],
    encoder: ImageEmbedder,
    template: Template,
    step: int,
) -> PrototypeBank:
    """Re-embed every prototype with the current (EMA) encoder.

    Membership is fixed: sampling is re-derived from (seed, option id), so the
    same studies are pooled. Option set, one-hots, and support counts never
    change; only embeddings and built_at_step do.
    """
    refreshed: list[Prototype] = []
    for proto in bank.prototypes:
        pool = pools.get(proto.option_id)
        if not pool:
            raise ValidationError(f"refresh: pool for {proto.option_id} missing")
        if proto.sampled_study_ids:
            study_ids = proto.sampled_study_ids
        else:
            # Bank loaded from file: membership is re-derived from the seed.
            study_ids = tuple(sample_pool(pool, proto.option_id, bank.sample_size, bank.seed))
        embeddings = [
            np.asarray(encoder.embed_study(study_id), dtype=np.float64)
            for study_id in study_ids
        ]
        if len(embeddings) != proto.support_count:
            raise ValidationError(
                f"refresh: option {proto.option_id} sample changed "
                f"({len(embeddings)} vs {proto.support_count} studies)"
            )
        refreshed.append(
            Prototype(
                option_id=proto.option_id,
                embedding=aggregate_maxpool(embeddings),
                answer_onehot=proto.answer_onehot,
                support_count=proto.support_count,
                sampled_study_ids=proto.sampled_study_ids,
            )
        )
    return PrototypeBank(
        prototypes=tuple(refreshed),
        dim=bank.dim,
        answer_dim=bank.answer_dim,
        built_at_step=step,
        seed=bank.seed,
        sample_size=bank.sample_size,
    )


def randomize_bank(bank: PrototypeBank, seed: int) -> PrototypeBank:
    """Ablation helper: replace embeddings with unit-variance Gaussian noise."""
    rng = np.random.default_rng(seed)
    noised = [
        Prototype(
            option_id=p.option_id,
            embedding=rng.normal(0.0, 1.0, size=bank.dim),
            answer_onehot=p.answer_onehot,
            support_count=p.support_count,
            sampled_study_ids=p.sampled_study_ids,
        )
        for p in bank.prototypes
    ]
    return PrototypeBank(
        prototypes=tuple(noised),
        dim=bank.dim,
        answer_dim=bank.answer_dim,
        built_at_step=bank.built_at_step,
        seed=bank.seed,
        sample_size=bank.sample_size,
    )


@dataclass(frozen=True)
class EmaEncoderState:
    parameters: np.ndarray
    decay: float

    def __post_init__(self):
        if not 0.0 <= self.decay <= 1.0:
            raise ValidationError(f"EMA decay must be in [0, 1], got {self.decay}")


def ema_update(live: np.ndarray, state: EmaEncoderState) -> EmaEncoderState:
    """new = decay * old + (1 - decay) * live, elementwise."""
    live = np.asarray(live, dtype=np.float64)
    if live.shape != state.parameters.shape:
        raise DimensionMismatchError(
            f"live parameter shape {live.shape} != EMA shape {state.parameters.shape}"
        )
    new = state.decay * state.parameters + (1.0 - state.decay) * live
    return EmaEncoderState(parameters=new, decay=state.decay)


def kb_coverage(bank: PrototypeBank, template: Template) -> dict[int, tuple[int, int, int]]:
    """Per level: (covered options, total options, whole-percent coverage).

    The percentage is floored to a whole percent.
    """
    covered_options = set(bank.option_ids())
    out: dict[int, tuple[int, int, int]] = {}
    for level in (1, 2, 3):
        level_options = template.options_at_level(level)
        total = len(level_options)
        covered = sum(1 for oid in level_options if oid in covered_options)
        pct = (100 * covered) // total if total else 0
        out[level] = (covered, total, pct)
    return out


def coverage_table(coverage: dict[int, tuple[int, int, int]]) -> str:
    """Three-row text table: level, total, covered, coverage percent."""
    lines = ["Level  Total  Covered  Coverage"]
    for level in (1, 2, 3):
        covered, total, pct = coverage[level]
        lines.append(f"L{level:<5d} {total:>6d} {covered:>8d} {pct:>8d}%")
    return "\n".join(lines) + "\n"


def serialize_bank(bank: PrototypeBank) -> str:
    """Header line then one record per prototype, ordered by option id.

    Floats are emitted with full round-trip precision, so identical banks
    serialize to identical bytes.
    """
    header = {
        "answer_dim": bank.answer_dim,
        "built_at_step": bank.built_at_step,
        "dim": bank.dim,
        "k": bank.sample_size,
        "seed": bank.seed,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for proto in sorted(bank.prototypes, key=lambda p: p.option_id):
        lines.append(
            json.dumps(
                {
                    "embedding": [float(x) for x in proto.embedding],
                    "option_id": proto.option_id,
                    "support_count": proto.support_count,
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + "\n"


def load_bank(text: str, template: Template) -> PrototypeBank:
    """Inverse of serialize_bank; one-hot rows are rebuilt from the template."""
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines:
        raise ParseError("empty bank document")
    try:
        header = json.loads(lines[0])
        dim = int(header["dim"])
        answer_dim = int(header["answer_dim"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed bank header: {exc}") from exc
    if answer_dim != template.n_answers:
        raise ValidationError(
            f"bank answer_dim {answer_dim} != template option count {template.n_answers}"
        )
    prototypes = []
    for line in lines[1:]:
        try:
            rec = json.loads(line)
            option_id = rec["option_id"]
            embedding = np.asarray(rec["embedding"], dtype=np.float64)
            support = int(rec["support_count"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed bank record: {exc}") from exc
        if option_id not in template.option_index:
            raise ValidationError(f"bank option {option_id} not in template")
        if embedding.shape != (dim,):
            raise ValidationError(f"bank embedding for {option_id} has wrong width")
        onehot = np.zeros(answer_dim)
        onehot[template.option_index[option_id]] = 1.0
        prototypes.append(
            Prototype(
                option_id=option_id,
                embedding=embedding,
                answer_onehot=onehot,
                support_count=support,
                sampled_study_ids=(),
            )
        )
    return PrototypeBank(
        prototypes=tuple(prototypes),
        dim=dim,
        answer_dim=answer_dim,
        built_at_step=int(header["built_at_step"]),
        seed=int(header["seed"]),
        sample_size=int(header["k"]),
    )


def write_bank(bank: PrototypeBank, path: str | Path) -> None:
    Path(path).write_text(serialize_bank(bank), encoding="utf-8")


def read_bank(path: str | Path, template: Template) -> PrototypeBank:
    return load_bank(Path(path).read_text(encoding="utf-8"), template)
