"""
Command-line entry point: one subcommand per pipeline.

    python -m src.pipeline.run_pipeline [--config dev.yml] [--seed N] [--threads N] <subcommand> ...

Exit codes: 0 success, 1 contract error, 2 data/format/training error or
missing input, 64 usage error. Every run writes a provenance record
run_<timestamp>.json into the metrics directory.
"""
import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from datetime import datetime
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
import pandas as pd
import yaml

from src.embeddings.store import EmbeddingMatrix, normalize, subset
from src.ingestion.load_embeddings import FORMATS, load, load_captions, load_pairs, save
from src.logging_config import setup_logging
from src.metrics.bootstrap_eval import bootstrap, sample_size_sweep, write_sweep_csv
from src.metrics.kl_metrics import (
    compute_metric,
    metric_correlations,
    moment_summary,
    other_modality,
    write_correlations_json,
)
from src.metrics.metric_vector import MetricVector
from src.ratio.ratio_core import CALIBRATIONS, FLAVORS, ScoreModel, iwl_weights, ratio_matrix, write_ratio_csv
from src.toy.encoders import init_params
from src.toy.lab import evaluate, evaluation_grid, iwl_demo
from src.toy.losses import GRADIENT_TOL, check_gradients
from src.toy.trainer import TrainConfig, load_params, save_params, train
from src.toy.world import MixtureWorld, sample_pairs
from src.transforms.curation import COMPOSE_MODES, TIE_RULES, Filter, compose_filters, rank_and_filter, write_manifest
from src.transforms.ngram_analysis import GROUP_BY, coverage_table, decile_groups
from src.validation.validate_embeddings import ContractError, DataError, FormatError, TrainingDivergedError

VERSION = "0.1.0"
PROJECT_ROOT = Path(__file__).resolve().parents[2]
DEFAULT_CONFIG = PROJECT_ROOT / "config" / "dev.yml"
SEED_ENV = "DENSRATIO_SEED"
DEFAULT_SCALE = 100.0

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_DATA = 2
EXIT_USAGE = 64

logger = logging.getLogger("densratio.cli")


class UsageError(Exception):
    pass


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises on bad usage so run() can map it to exit 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def load_config(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")
    with path.open("r", encoding="utf-8") as f:
        try:
            doc = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise FormatError(f"Unreadable YAML in {path}: {e}") from e
    if not isinstance(doc, dict):
        raise FormatError(f"{path} must hold a mapping, got {type(doc).__name__}")
    return doc


def write_run_metrics(metrics_dir: Path, payload: Dict[str, Any]) -> Path:
    metrics_dir.mkdir(parents=True, exist_ok=True)

    ts = datetime.now().strftime("%Y%m%d_%H%M%S_%f")
    out_path = metrics_dir / f"run_{ts}.json"

    with out_path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, default=str)

    return out_path


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunContext:
    config: dict
    seed: int
    threads: int
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)
    extra: Dict[str, Any] = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return self.config.get(name) or {}

    def input(self, path: Path) -> Path:
        if not path.exists():
            raise FileNotFoundError(f"File not found: {path}")
        self.inputs[str(path)] = file_sha256(path)
        return path

    def output(self, path: Path) -> Path:
        self.outputs.append(str(path))
        return path


def resolve_seed(flag: Optional[int], config: dict) -> int:
    if flag is not None:
        return flag
    env = os.getenv(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError as e:
            raise ContractError(f"{SEED_ENV} must be an integer, got {env!r}") from e
    return int((config.get("defaults") or {}).get("seed", 0))


# --- Shared loaders ---


def _embeddings(ctx: RunContext, path: Path, modality: str, fmt: Optional[str] = None) -> EmbeddingMatrix:
    m = load(ctx.input(path), format=fmt, modality=modality)
    return normalize(m)


def _optional(ctx: RunContext, path: Optional[Path], modality: str) -> Optional[EmbeddingMatrix]:
    return None if path is None else _embeddings(ctx, path, modality)


def _model(args, ctx: RunContext) -> ScoreModel:
    """Score model from the flags; --scale falls back to defaults.scale in the config."""
    if args.scale is None:
        args.scale = float(ctx.section("defaults").get("scale", DEFAULT_SCALE))
    return ScoreModel(args.scale, args.bias, args.flavor, args.nu)


def _toy_docs(ctx: RunContext, path: Optional[Path]) -> tuple:
    """World document and train settings: config defaults, then the given file."""
    toy = ctx.section("toy")
    world_doc = dict(toy.get("world") or {})
    train_doc = dict(toy.get("train") or {})
    if path is not None:
        doc = load_config(ctx.input(path))
        if "world" in doc or "train" in doc:
            world_doc = dict(doc.get("world") or world_doc)
            train_doc.update(doc.get("train") or {})
        else:
            world_doc = doc
    return MixtureWorld.from_dict(world_doc), train_doc


def _train_config(ctx: RunContext, train_doc: dict, args) -> TrainConfig:
    doc = dict(train_doc)
    for key in ("objective", "steps", "batch_size", "learning_rate"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    doc["seed"] = ctx.seed
    return TrainConfig.from_dict(doc)


def _write_json(ctx: RunContext, payload: Dict[str, Any], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
    return ctx.output(path)


# --- Subcommands ---


def cmd_ingest(args, ctx: RunContext) -> None:
    quarantine = args.quarantine or bool(ctx.section("ingestion").get("quarantine_enabled", False))
    m, metrics = load(ctx.input(args.input), format=args.format, modality=args.modality,
                      quarantine=quarantine, return_metrics=True)
    ctx.extra["ingestion"] = metrics
    if args.normalize:
        m = normalize(m)
    save(m, ctx.output(args.out), args.out_format)
    if args.norms_out:
        compute_metric("raw_norm", m, ScoreModel(1.0)).write_csv(ctx.output(args.norms_out))


def cmd_score(args, ctx: RunContext) -> None:
    texts = _embeddings(ctx, args.texts, "text")
    images = _embeddings(ctx, args.images, "image")
    model = _model(args, ctx)
    calibration = args.calibration or model.default_calibration
    ratios = ratio_matrix(texts, images, model, calibration)
    write_ratio_csv(ctx.output(args.out), texts.ids, images.ids, ratios, model, calibration)


def cmd_kl(args, ctx: RunContext) -> None:
    queries = _embeddings(ctx, args.queries, args.modality)
    other = _optional(ctx, args.refs, other_modality(args.modality))
    same = _optional(ctx, args.same, args.modality)
    metric = compute_metric(
        args.metric,
        queries,
        _model(args, ctx),
        other=other,
        same=same,
        exclude_self=args.exclude_self,
        chunk_size=int(ctx.section("defaults").get("chunk_size", 1024)),
        threads=ctx.threads,
    )
    metric.write_csv(ctx.output(args.out))


def cmd_moments(args, ctx: RunContext) -> None:
    summary = moment_summary(_embeddings(ctx, args.texts, "text"), _embeddings(ctx, args.images, "image"))
    payload = {
        "mean_text": summary.mean_text.tolist(),
        "mean_image": summary.mean_image.tolist(),
        "cov_text": summary.cov_text.tolist(),
        "cov_image": summary.cov_image.tolist(),
        "counts": summary.counts,
        "fingerprints": summary.fingerprints,
    }
    _write_json(ctx, payload, args.out)


def _bootstrap_inputs(args, ctx: RunContext):
    queries = _embeddings(ctx, args.queries, args.modality)
    ref_modality = args.modality if args.metric == "d_c" else other_modality(args.modality)
    refs = _embeddings(ctx, args.refs, ref_modality)
    same = _optional(ctx, args.same, args.modality)
    return queries, refs, same


def cmd_bootstrap(args, ctx: RunContext) -> None:
    queries, refs, same = _bootstrap_inputs(args, ctx)
    B = args.B or int(ctx.section("bootstrap").get("B", 100))
    report = bootstrap(queries, refs, args.metric, _model(args, ctx), B, ctx.seed, same=same, threads=ctx.threads)
    report.write_csv(ctx.output(args.out))


def cmd_sweep(args, ctx: RunContext) -> None:
    queries, refs, same = _bootstrap_inputs(args, ctx)
    section = ctx.section("bootstrap")
    sizes = args.sizes or list(section.get("sizes", [100, 500, 1000, 5000]))
    repeats = args.repeats or int(section.get("repeats", 10))
    B = args.B or int(section.get("B", 100))
    sweep = sample_size_sweep(queries, refs, args.metric, _model(args, ctx), sizes, repeats, ctx.seed,
                              B=B, same=same, threads=ctx.threads)
    header = {"metric": args.metric, "B": B, "repeats": repeats, "seed": ctx.seed, "scale": args.scale}
    write_sweep_csv(sweep, ctx.output(args.out), header)


def cmd_curate(args, ctx: RunContext) -> None:
    section = ctx.section("curation")
    metric = MetricVector.read_csv(ctx.input(args.metric))
    ids = list(load_pairs(ctx.input(args.pairs)).ids) if args.pairs else list(metric.ids)
    keep = args.keep if args.keep is not None else float(section.get("keep_fraction", 0.25))
    tie_rule = args.tie_rule or section.get("tie_rule", "by_id")

    if args.threshold_metric is None:
        manifest = rank_and_filter(ids, metric, keep, tie_rule)
    else:
        if args.min_value is None:
            raise ContractError("--threshold-metric needs --min-value")
        gate = MetricVector.read_csv(ctx.input(args.threshold_metric))
        stages = [Filter(gate, min_value=args.min_value), Filter(metric, keep_fraction=keep, tie_rule=tie_rule)]
        manifest = compose_filters(stages, mode=args.mode, ids=ids)

    write_manifest(manifest, ctx.output(args.out), args.id_list and ctx.output(args.id_list))
    ctx.extra["curation"] = {"input_ids": len(ids), "kept": len(manifest)}


def cmd_ngram(args, ctx: RunContext) -> None:
    section = ctx.section("ngram")
    metric = MetricVector.read_csv(ctx.input(args.metric))
    captions = load_captions(ctx.input(args.captions)).reset_index(drop=True)
    groups = decile_groups(metric, captions, args.group_by)
    texts = dict(zip(captions["id"], captions["text"]))
    orders = args.orders or list(section.get("orders", [1, 2, 3]))
    k_max = args.k_max or section.get("k_max")
    table = coverage_table(groups, texts, orders, k_max, ctx.threads)
    out = ctx.output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(out, index=False, float_format="%.17g")


def cmd_toy_gen(args, ctx: RunContext) -> None:
    world, _ = _toy_docs(ctx, args.world)
    labels, images = sample_pairs(world, args.n, ctx.seed)
    df = pd.DataFrame({"id": [str(k) for k in range(args.n)], "label": labels, "image": images.tolist()})
    out = ctx.output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    df.to_json(out, orient="records", lines=True, double_precision=15)
    if args.world_out:
        _write_json(ctx, world.to_dict(), args.world_out)


def cmd_toy_train(args, ctx: RunContext) -> None:
    world, train_doc = _toy_docs(ctx, args.world)
    config = _train_config(ctx, train_doc, args)

    if args.check_gradients:
        rng = np.random.default_rng(ctx.seed)
        params = init_params(world.d, world.K, rng, config.objective, config.hidden, config.embed_dim,
                             config.init_scale, config.batch_size)
        labels, images = sample_pairs(world, 4, rng)
        errors = check_gradients(params, images, labels)
        ctx.extra["gradient_check"] = errors
        if max(errors.values()) > GRADIENT_TOL:
            raise ContractError(f"Gradient check failed: {max(errors.values()):.2e} > {GRADIENT_TOL}")

    result = train(world, config)
    save_params(result.params, ctx.output(args.out))
    if args.losses_out:
        out = ctx.output(args.losses_out)
        pd.DataFrame({"step": np.arange(len(result.losses)), "loss": result.losses}).to_csv(
            out, index=False, float_format="%.17g"
        )
    ctx.extra["train"] = {"final_loss": float(result.losses[-1]), "logit_scale": result.params.logit_scale}


def cmd_toy_eval(args, ctx: RunContext) -> None:
    params = load_params(ctx.input(args.params))
    if args.world is not None:
        world, _ = _toy_docs(ctx, args.world)
    else:
        world = MixtureWorld.from_dict(params.meta["world"])
    n_test = args.n_test or int(ctx.section("toy").get("eval", {}).get("n_test", 2000))
    result = evaluate(world, params, n_test, ctx.seed, args.calibration)
    _write_json(ctx, result, args.out)

    if args.grid_out:
        grid = dict(ctx.section("toy").get("eval", {}).get("grid") or {})
        frame = evaluation_grid(world, params, calibration=args.calibration, **grid)
        frame.to_csv(ctx.output(args.grid_out), index=False, float_format="%.17g")


def cmd_iwl_weights(args, ctx: RunContext) -> None:
    images = _embeddings(ctx, args.images, "image")
    prompts = _embeddings(ctx, args.prompt, "text")
    prompt = subset(prompts, [args.prompt_id]) if args.prompt_id else prompts
    a = args.iwl_scale or float(ctx.section("iwl").get("scale", 10.0))
    iwl_weights(images, prompt.rows[0], a).write_csv(ctx.output(args.out))


def cmd_iwl_demo(args, ctx: RunContext) -> None:
    section = ctx.section("iwl")
    demo = section.get("demo") or {}
    world, train_doc = _toy_docs(ctx, args.world)
    reference = replace(_train_config(ctx, train_doc, argparse.Namespace()), seed=ctx.seed + 10_000)
    config = _train_config(ctx, {**train_doc, **(demo.get("trial") or {})}, args)
    scale = args.iwl_scale if args.iwl_scale is not None else demo.get("scale")
    result = iwl_demo(
        world,
        args.prompt_label,
        config,
        trials=args.trials or int(section.get("trials", 1)),
        a=None if scale is None else float(scale),
        normalize_weights=bool(section.get("normalize_weights", True)),
        n_test=int(section.get("n_test", 5000)),
        reference_config=reference,
    )
    _write_json(ctx, result, args.out)


def cmd_correlate(args, ctx: RunContext) -> None:
    metrics = [MetricVector.read_csv(ctx.input(p)) for p in args.metrics]
    write_correlations_json(metric_correlations(metrics), ctx.output(args.out))


# --- Parser ---


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--scale", type=float, default=None, help="Logit scale a (default: defaults.scale in the config)")
    p.add_argument("--bias", type=float, default=0.0, help="Logit bias b (sigmoid flavor)")
    p.add_argument("--flavor", choices=FLAVORS, default="softmax_contrastive")
    p.add_argument("--nu", type=int, default=1, help="Negatives per positive for nu_eb calibration")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", "--world", dest="world", type=Path, default=None,
                   help="World/train JSON or YAML document (defaults to the toy section of the config)")
    p.add_argument("--objective", choices=["clip", "siglip", *FLAVORS], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)


def build_parser() -> CliParser:
    parser = CliParser(prog="densratio", description="Similarity-as-density-ratio toolkit.")
    parser.add_argument("--config", type=Path, default=DEFAULT_CONFIG, help="Path to YAML config file")
    parser.add_argument("--seed", type=int, default=None, help=f"Seed (falls back to ${SEED_ENV}, then config)")
    parser.add_argument("--threads", type=int, default=None, help="Worker threads; results do not depend on it")
    parser.add_argument("--metrics-dir", type=Path, default=None, help="Where provenance records go")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="Load, validate and re-save an embedding matrix")
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--format", choices=FORMATS, default=None)
    p.add_argument("--modality", choices=["image", "text"], default="image")
    p.add_argument("--quarantine", action="store_true", help="Drop non-finite rows instead of failing")
    p.add_argument("--normalize", action="store_true")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--out-format", choices=FORMATS, default=None)
    p.add_argument("--norms-out", type=Path, default=None, help="Write pre-normalization row norms")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("score", help="Calibrated density-ratio matrix")
    p.add_argument("--texts", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--calibration", choices=CALIBRATIONS, default=None)
    p.add_argument("--out", type=Path, required=True)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("kl", help="Per-sample metric vector")
    p.add_argument("--metric", choices=["d_kl", "d_klr", "d_c", "d_w", "conformity", "raw_norm"], required=True)
    p.add_argument("--queries", type=Path, required=True)
    p.add_argument("--refs", type=Path, default=None, help="Reference set of the other modality")
    p.add_argument("--same", type=Path, default=None, help="Reference set of the query modality")
    p.add_argument("--modality", choices=["image", "text"], default="image")
    p.add_argument("--exclude-self", action="store_true", help="Leave-one-out mean for d_c")
    p.add_argument("--out", type=Path, required=True)
    _add_model_flags(p)
    p.set_defaults(handler=cmd_kl)

    p = sub.add_parser("moments", help="Means and covariances of both reference sets")
    p.add_argument("--texts", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_moments)

    for name, handler in (("bootstrap", cmd_bootstrap), ("sweep", cmd_sweep)):
        p = sub.add_parser(name, help="Bootstrap estimation error" if name == "bootstrap" else "Error vs sample size")
        p.add_argument("--metric", choices=["d_kl", "d_klr", "d_c", "d_w"], required=True)
        p.add_argument("--queries", type=Path, required=True)
        p.add_argument("--refs", type=Path, required=True)
        p.add_argument("--same", type=Path, default=None)
        p.add_argument("--modality", choices=["image", "text"], default="image")
        p.add_argument("--B", type=int, default=None)
        p.add_argument("--out", type=Path, required=True)
        if name == "sweep":
            p.add_argument("--sizes", type=int, nargs="+", default=None)
            p.add_argument("--repeats", type=int, default=None)
        _add_model_flags(p)
        p.set_defaults(handler=handler)

    p = sub.add_parser("curate", help="Top-fraction manifest by a metric")
    p.add_argument("--metric", type=Path, required=True)
    p.add_argument("--keep", type=float, default=None)
    p.add_argument("--tie-rule", choices=TIE_RULES, default=None)
    p.add_argument("--pairs", type=Path, default=None, help="Pair JSONL whose ids define the pool")
    p.add_argument("--threshold-metric", type=Path, default=None, help="Alignment scores for a minimum threshold")
    p.add_argument("--min-value", type=float, default=None)
    p.add_argument("--mode", choices=COMPOSE_MODES, default="sequential")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--id-list", type=Path, default=None)
    p.set_defaults(handler=cmd_curate)

    p = sub.add_parser("ngram", help="N-gram coverage curves per metric decile")
    p.add_argument("--metric", type=Path, required=True)
    p.add_argument("--captions", type=Path, required=True)
    p.add_argument("--group-by", choices=GROUP_BY, default="own_metric")
    p.add_argument("--orders", type=int, nargs="+", default=None)
    p.add_argument("--k-max", type=int, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_ngram)

    p = sub.add_parser("toy-gen", help="Sample (label, image) pairs from the toy world")
    p.add_argument("--config", "--world", dest="world", type=Path, default=None)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--world-out", type=Path, default=None)
    p.set_defaults(handler=cmd_toy_gen)

    p = sub.add_parser("toy-train", help="Train toy contrastive encoders")
    _add_train_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--losses-out", type=Path, default=None)
    p.add_argument("--check-gradients", action="store_true")
    p.set_defaults(handler=cmd_toy_train)

    p = sub.add_parser("toy-eval", help="Ratio recovery against the analytic oracle")
    p.add_argument("--params", type=Path, required=True)
    p.add_argument("--config", "--world", dest="world", type=Path, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--calibration", choices=CALIBRATIONS, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--grid-out", type=Path, default=None)
    p.set_defaults(handler=cmd_toy_eval)

    p = sub.add_parser("iwl-weights", help="Importance weights toward a text prompt")
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--prompt", type=Path, required=True, help="Text embedding file holding the prompt")
    p.add_argument("--prompt-id", default=None)
    p.add_argument("--iwl-scale", type=float, default=None, help="Scale a for the weights (default 10)")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_iwl_weights)

    p = sub.add_parser("iwl-demo", help="Weighted vs unweighted toy training on a prompt component")
    _add_train_flags(p)
    p.add_argument("--prompt-label", type=int, required=True)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--iwl-scale", type=float, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_iwl_demo)

    p = sub.add_parser("correlate", help="Pearson correlations between metric files")
    p.add_argument("--metrics", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_correlate)

    return parser


def run(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"{parser.prog}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    config: Dict[str, Any] = {}
    config_error: Optional[Exception] = None
    try:
        config = load_config(args.config)
    except (DataError, FileNotFoundError) as e:
        config_error = e

    setup_logging("densratio", (config.get("logging") or {}).get("level"))
    started = datetime.now()
    exit_code = EXIT_OK
    error: Optional[str] = None
    ctx: Optional[RunContext] = None

    try:
        if config_error is not None:
            raise config_error
        seed = resolve_seed(args.seed, config)
        threads = args.threads or int((config.get("defaults") or {}).get("threads", 1))
        ctx = RunContext(config=config, seed=seed, threads=threads)
        logger.info("Starting %s (seed=%d, threads=%d)", args.command, seed, threads)
        handler: Callable = args.handler
        handler(args, ctx)
    except ContractError as e:
        logger.error("Contract error: %s", e)
        exit_code, error = EXIT_CONTRACT, str(e)
    except (DataError, TrainingDivergedError, FileNotFoundError) as e:
        logger.error("%s: %s", type(e).__name__, e)
        exit_code, error = EXIT_DATA, str(e)

    metrics_dir = args.metrics_dir or Path((config.get("paths") or {}).get("metrics_dir", "metrics"))
    params = {k: v for k, v in vars(args).items() if k != "handler"}
    record: Dict[str, Any] = {
        "run": {
            "timestamp": started.isoformat(timespec="seconds"),
            "duration_s": round((datetime.now() - started).total_seconds(), 3),
            "command": args.command,
            "argv": argv,
            "config_path": str(args.config),
            "version": VERSION,
            "exit_code": exit_code,
            "error": error,
        },
        "params": params,
    }
    if ctx is not None:
        record["seeds"] = {"seed": ctx.seed, "source": _seed_source(args.seed)}
        record["threads"] = ctx.threads
        record["inputs"] = ctx.inputs
        record["outputs"] = ctx.outputs
        record.update(ctx.extra)

    record_path = write_run_metrics(metrics_dir, record)
    logger.info("Wrote run record to: %s", record_path)
    return exit_code


def _seed_source(flag: Optional[int]) -> str:
    if flag is not None:
        return "flag"
    return "env" if os.getenv(SEED_ENV) else "config"


if __name__ == "__main__":
    sys.exit(run())
