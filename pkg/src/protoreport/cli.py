"""Command-line pipeline: synth, expand-terms, mine, build-bank, train,
populate, evaluate.

Every command is a thin composition of library operations. Configuration
comes from one JSON file plus flag overrides; each run writes its resolved
configuration next to its outputs so runs are comparable and repeatable.
Identical configurations (including the seed) produce byte-identical
artifacts.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from . import bank as bank_mod
from . import evaluate as eval_mod
from .backbone import ImageInput, ModelDims, encode_image
from .errors import ConfigError, ProtoreportError
from .extraction import RuleBasedExtractor, build_example_pools, mine_corpus
from .fusion import VARIANT_FULL, VARIANTS, init_model
from .llm_client import ChatClient, ChatEndpointConfig, RemoteExpander, RemoteExtractor
from .synth import (
    SynthConfig,
    generate,
    read_corpus,
    read_features,
    write_world,
)
from .template import read_reports, read_template, write_reports
from .terminology import (
    NullExpander,
    StaticExpander,
    expand_terminology,
    read_lexicon,
    write_lexicon,
)
from .training import (
    TrainConfig,
    read_checkpoint,
    run_training,
    write_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DimsConfig:
    feature_dim: int = 32
    image_dim: int = 24
    text_buckets: int = 64
    text_dim: int = 16
    fused_dim: int = 24
    proj_dim: int = 16
    hidden_dim: int = 0  # 0 -> 2 * n_answers

    def to_model_dims(self, n_answers: int, text_extra: int = 0) -> ModelDims:
        hidden = self.hidden_dim if self.hidden_dim > 0 else 2 * n_answers
        return ModelDims(
            feature_dim=self.feature_dim,
            image_dim=self.image_dim,
            text_buckets=self.text_buckets,
            text_dim=self.text_dim,
            fused_dim=self.fused_dim,
            proj_dim=self.proj_dim,
            hidden_dim=hidden,
            n_answers=n_answers,
            text_extra=text_extra,
        )


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    variant: str = VARIANT_FULL
    extractor: str = "rule"  # rule | remote
    expander: str = "null"   # null | static:<path> | remote
    endpoint_url: str = ""
    endpoint_model: str = ""
    endpoint_timeout_s: float = 30.0
    train: TrainConfig = TrainConfig()
    dims: DimsConfig = DimsConfig()
    synth: SynthConfig = SynthConfig()


def load_run_config(path: str | None, overrides: dict) -> RunConfig:
    doc: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            doc = json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    merged = {**doc, **{k: v for k, v in overrides.items() if v is not None}}

    def sub(cls, key):
        fields = merged.pop(key, {})
        if not isinstance(fields, dict):
            raise ConfigError(f"config section '{key}' must be an object")
        try:
            return cls(**fields)
        except TypeError as exc:
            raise ConfigError(f"bad '{key}' section: {exc}") from exc

    train_cfg = sub(TrainConfig, "train")
    dims_cfg = sub(DimsConfig, "dims")
    synth_cfg = sub(SynthConfig, "synth")
    if "seed" in merged and merged["seed"] is not None:
        seed = int(merged["seed"])
        train_cfg = replace(train_cfg, seed=seed)
        synth_cfg = replace(synth_cfg, seed=seed)
    try:
        cfg = RunConfig(train=train_cfg, dims=dims_cfg, synth=synth_cfg,
                        **{k: v for k, v in merged.items() if k not in ("train", "dims", "synth")})
    except TypeError as exc:
        raise ConfigError(f"unknown configuration key: {exc}") from exc
    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r}; choose from {VARIANTS}")
    if cfg.extractor not in ("rule", "remote"):
        raise ConfigError(f"unknown extractor backend {cfg.extractor!r}")
    return cfg


def write_resolved_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(asdict(cfg), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )


def _require_files(*paths: str | Path) -> None:
    missing = [str(p) for p in paths if not Path(p).is_file()]
    if missing:
        raise ConfigError(f"input path(s) do not exist: {', '.join(missing)}")


def _chat_client(cfg: RunConfig) -> ChatClient:
    endpoint = ChatEndpointConfig(
        url=cfg.endpoint_url, model=cfg.endpoint_model, timeout_s=cfg.endpoint_timeout_s
    )
    return ChatClient(endpoint)


def cmd_synth(cfg: RunConfig, out: str) -> int:
    out_dir = Path(out)
    world = generate(cfg.synth)
    write_world(world, out_dir)
    write_resolved_config(cfg, out_dir)
    print(f"world written to {out_dir} "
          f"({len(world.studies)} studies, {world.template.n_answers} options)")
    return 0


def cmd_expand_terms(cfg: RunConfig, template_path: str, out: str) -> int:
    _require_files(template_path)
    template = read_template(template_path)
    if cfg.expander == "null":
        expander = NullExpander()
    elif cfg.expander.startswith("static:"):
        seed_path = cfg.expander.split(":", 1)[1]
        _require_files(seed_path)
        expander = StaticExpander.from_file(seed_path)
    elif cfg.expander == "remote":
        expander = RemoteExpander(_chat_client(cfg))
    else:
        raise ConfigError(f"unknown expander {cfg.expander!r}")
    lexicon = expand_terminology(template, expander)
    write_lexicon(lexicon, out)
    status = "degraded to canonical-only" if lexicon.degraded else "ok"
    print(f"lexicon with {len(lexicon.entries)} entries written to {out} ({status})")
    return 0


def cmd_mine(cfg: RunConfig, corpus: str, template_path: str, lexicon_path: str, out: str) -> int:
    _require_files(corpus, template_path, lexicon_path)
    template = read_template(template_path)
    lexicon = read_lexicon(lexicon_path, template)
    studies = read_corpus(corpus)
    if cfg.extractor == "rule":
        extractor = RuleBasedExtractor(template, lexicon)
    else:
        extractor = RemoteExtractor(_chat_client(cfg))
    results = mine_corpus(studies, template, lexicon, extractor)
    pools = build_example_pools(results)

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for r in results:
        lines.append(
            json.dumps(
                {
                    "assertions": [
                        [a.question_id, a.option_id, a.certainty] for a in r.assertions
                    ],
                    "study_id": r.study_id,
                },
                sort_keys=True,
            )
        )
    (out_dir / "extractions.jsonl").write_text(
        "\n".join(lines) + ("\n" if lines else ""), encoding="utf-8"
    )
    (out_dir / "pools.json").write_text(
        json.dumps(pools, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    sizes = sorted((len(v) for v in pools.values()), reverse=True)
    stats = {
        "studies": len(studies),
        "extracted": len(results),
        "options_with_examples": len(pools),
        "largest_pool": sizes[0] if sizes else 0,
        "median_pool": sizes[len(sizes) // 2] if sizes else 0,
    }
    (out_dir / "pool_stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    write_resolved_config(cfg, out_dir)
    print(f"mined {len(results)}/{len(studies)} studies; "
          f"{len(pools)} options have examples")
    return 0


def cmd_build_bank(cfg: RunConfig, pools_path: str, features_path: str,
                   template_path: str, out: str, checkpoint: str | None) -> int:
    _require_files(pools_path, features_path, template_path)
    if checkpoint is not None:
        _require_files(checkpoint)
    template = read_template(template_path)
    pools = json.loads(Path(pools_path).read_text(encoding="utf-8"))
    features = read_features(features_path)

    if checkpoint is not None:
        model = read_checkpoint(checkpoint)
    else:
        dims = cfg.dims.to_model_dims(template.n_answers)
        model = init_model(dims, cfg.train.seed, temperature=cfg.train.temperature,
                           softmax_weights=cfg.train.softmax_weights,
                           encoder_init_scale=cfg.train.encoder_init_scale)
    embedder = bank_mod.FeatureEncoderEmbedder(
        features, lambda x: encode_image(model.backbone, x), dim=model.dims.image_dim
    )
    built = bank_mod.build_bank(
        pools, embedder, cfg.train.sample_size, cfg.train.seed, template
    )
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    bank_mod.write_bank(built, out_dir / "bank.json")
    coverage = bank_mod.kb_coverage(built, template)
    table = bank_mod.coverage_table(coverage)
    (out_dir / "coverage.txt").write_text(table, encoding="utf-8")
    write_resolved_config(cfg, out_dir)
    print(table, end="")
    print(f"bank with {built.size} prototypes written to {out_dir / 'bank.json'}")
    return 0


def cmd_train(cfg: RunConfig, world: str, bank_path: str | None, out: str) -> int:
    world_dir = Path(world)
    template_path = world_dir / "template.json"
    features_path = world_dir / "features.jsonl"
    gold_path = world_dir / "gold.jsonl"
    _require_files(template_path, features_path, gold_path)
    template = read_template(template_path)
    features = read_features(features_path)
    gold = read_reports(gold_path)

    proto_bank = None
    pools = None
    if bank_path is not None:
        _require_files(bank_path)
        proto_bank = bank_mod.read_bank(bank_path, template)
        pools_path = world_dir / "pools.json"
        if pools_path.is_file():
            pools = json.loads(pools_path.read_text(encoding="utf-8"))

    dims = cfg.dims.to_model_dims(template.n_answers)
    if proto_bank is not None and proto_bank.dim != dims.image_dim:
        raise ConfigError(
            f"bank dim {proto_bank.dim} != configured image_dim {dims.image_dim}"
        )
    result = run_training(
        template, gold, features, proto_bank, dims, cfg.train,
        variant=cfg.variant, pools=pools,
    )

    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_checkpoint(result.model, out_dir / "checkpoint.json", step=cfg.train.n_steps)
    if result.bank is not None:
        bank_mod.write_bank(result.bank, out_dir / "final_bank.json")
    log_lines = [
        json.dumps({"loss": loss, "step": i + 1}, sort_keys=True)
        for i, loss in enumerate(result.losses)
    ]
    (out_dir / "train_log.jsonl").write_text(
        "\n".join(log_lines) + ("\n" if log_lines else ""), encoding="utf-8"
    )
    write_resolved_config(cfg, out_dir)
    final_loss = result.losses[-1] if result.losses else float("nan")
    print(f"trained {cfg.train.n_steps} steps (variant={cfg.variant}); "
          f"final loss {final_loss:.6f}")
    return 0


def cmd_populate(cfg: RunConfig, features_path: str, template_path: str,
                 checkpoint: str, bank_path: str | None, out: str) -> int:
    _require_files(features_path, template_path, checkpoint)
    if bank_path is not None:
        _require_files(bank_path)
    template = read_template(template_path)
    features = read_features(features_path)
    model = read_checkpoint(checkpoint)
    proto_bank = bank_mod.read_bank(bank_path, template) if bank_path else None

    reports = [
        eval_mod.populate_report(
            ImageInput(study_id=sid, features=vec), template, model, proto_bank
        )
        for sid, vec in sorted(features.items())
    ]
    write_reports(reports, out)
    print(f"{len(reports)} reports written to {out}")
    return 0


def cmd_evaluate(cfg: RunConfig, pred_path: str, gold_path: str,
                 template_path: str, out: str) -> int:
    _require_files(pred_path, gold_path, template_path)
    template = read_template(template_path)
    predicted = read_reports(pred_path)
    gold = read_reports(gold_path)
    metrics = eval_mod.compute_metrics(predicted, gold, template)
    counts = eval_mod.included_option_counts(predicted, gold, template)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = eval_mod.metrics_report(metrics, counts)
    (out_dir / "metrics.txt").write_text(text, encoding="utf-8")
    (out_dir / "metrics.json").write_text(
        eval_mod.metrics_to_json(metrics, counts), encoding="utf-8"
    )
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="protoreport",
        description="Prototype-bank knowledge retrieval for structured report population.",
    )
    parser.add_argument("--config", help="JSON configuration file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="override the run seed")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic experiment directory")
    p.add_argument("--out", required=True)

    p = sub.add_parser("expand-terms", help="build the terminology lexicon")
    p.add_argument("--template", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expander", default=None, help="null | static:<file> | remote")

    p = sub.add_parser("mine", help="extract template-aligned labels from a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--lexicon", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--extractor", default=None, help="rule | remote")

    p = sub.add_parser("build-bank", help="build the prototype bank from example pools")
    p.add_argument("--pools", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="encoder checkpoint (else seeded init)")

    p = sub.add_parser("train", help="train a model variant on a world directory")
    p.add_argument("--world", required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default=None, help=" | ".join(VARIANTS))

    p = sub.add_parser("populate", help="populate structured reports from image features")
    p.add_argument("--features", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score predicted reports against gold")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--out", required=True)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "variant": getattr(args, "variant", None),
        "extractor": getattr(args, "extractor", None),
        "expander": getattr(args, "expander", None),
    }
    try:
        cfg = load_run_config(args.config, overrides)
        if args.command == "synth":
            return cmd_synth(cfg, args.out)
        if args.command == "expand-terms":
            return cmd_expand_terms(cfg, args.template, args.out)
        if args.command == "mine":
            return cmd_mine(cfg, args.corpus, args.template, args.lexicon, args.out)
        if args.command == "build-bank":
            return cmd_build_bank(cfg, args.pools, args.features, args.template,
                                  args.out, args.checkpoint)
        if args.command == "train":
            return cmd_train(cfg, args.world, args.bank, args.out)
        if args.command == "populate":
            return cmd_populate(cfg, args.features, args.template, args.checkpoint,
                                args.bank, args.out)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, args.pred, args.gold, args.template, args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ProtoreportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
