"""Command-line pipeline: synthesize fixtures, train, evaluate, sweep, export.

Every subcommand reads an optional JSON config document (--config) whose
fields individual flags override; each report echoes the settings that
produced it, so a report plus the config reproduces the run.  Exit codes:
0 success, 2 usage error, 1 runtime failure with a diagnostic naming the
failing stage on stderr.

The synth subcommand writes a complete fixture directory (observations,
expert ranges, vision matrix, eval items, taxonomy) in the formats the
other subcommands consume, so the whole pipeline runs end to end from
one seed.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .evaluation import (
    EvalItem,
    GeoPriorEvalSet,
    SweepRow,
    TrainingJob,
    eval_geo_prior,
    mean_average_precision,
    sweep,
)
from .fusion import FusionConfig, TaxonomyMap, UNMAPPED
from .grids import GridSpec
from .io import (
    DirectoryCheckpointSink,
    FileFormatError,
    compile_taxonomy,
    export_range_map,
    load_eval_items,
    load_matrix,
    load_model,
    load_observations,
    load_ranges,
    load_species_ids,
    load_species_sidecar,
    load_taxonomy_json,
    save_eval_items,
    save_matrix,
    save_model,
    save_observations,
    save_ranges,
    save_taxonomy_json,
    species_sidecar_path,
    save_species_sidecar,
)
from .model import ModelConfig
from .synthworld import (
    generate_world,
    make_confusion_plan,
    sample_eval_items,
    sample_observations,
    synth_vision_predictions,
)
from .training import TrainConfig, train

__all__ = ["main"]


class _Stage:
    """Names the pipeline stage currently running, for diagnostics."""

    def __init__(self) -> None:
        self.name = "startup"

    def __call__(self, name: str) -> None:
        self.name = name


def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FileFormatError(f"cannot read config {path}: {exc}") from exc
    except ValueError as exc:
        raise FileFormatError(f"config {path}: bad JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FileFormatError(f"config {path}: expected a JSON object")
    return doc


def _cfg(cfg: dict, key: str, default, cast):
    if key not in cfg or cfg[key] is None:
        return default
    try:
        return cast(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ValueError(f"config field {key!r}: {exc}") from exc


def _model_config(cfg: dict, args: argparse.Namespace, num_species: int) -> ModelConfig:
    hidden = args.hidden_dim or _cfg(cfg, "hidden_dim", 256, int)
    return ModelConfig(
        num_species=num_species,
        hidden_dim=hidden,
        num_residual_blocks=_cfg(cfg, "num_blocks", 4, int),
        dropout_rate=_cfg(cfg, "dropout", 0.5, float),
    )


def _train_config(cfg: dict, args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs or _cfg(cfg, "epochs", 10, int),
        batch_size=_cfg(cfg, "batch_size", 2048, int),
        learning_rate=_cfg(cfg, "learning_rate", 5e-4, float),
        pos_weight_lambda=_cfg(cfg, "pos_weight_lambda", None, float),
        obs_cap=_cfg(cfg, "obs_cap", 100, int),
        seed=args.seed if args.seed is not None else _cfg(cfg, "seed", 0, int),
        checkpoint_every=_cfg(cfg, "checkpoint_every", 5, int),
    )


def _fusion_config(cfg: dict, args: argparse.Namespace) -> FusionConfig:
    delta = args.delta if args.delta is not None else _cfg(cfg, "delta", 0.0, float)
    k = args.k if args.k is not None else _cfg(cfg, "k_default", 1.0, float)
    return FusionConfig(delta=delta, k_default=k)


def _emit_report(doc: dict, out: Optional[str]) -> None:
    text = json.dumps(doc, sort_keys=True, indent=2) + "\n"
    sys.stdout.write(text)
    if out:
        Path(out).write_text(text, encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def _cmd_synth(args: argparse.Namespace, stage: _Stage) -> int:
    cfg = _load_config(args.config)
    stage("generate-world")
    seed = args.seed if args.seed is not None else _cfg(cfg, "seed", 0, int)
    n_species = _cfg(cfg, "n_species", 20, int)
    grid = GridSpec(_cfg(cfg, "grid_rows", 60, int), _cfg(cfg, "grid_cols", 120, int))
    sigma_range = (
        _cfg(cfg, "sigma_min", 10.0, float),
        _cfg(cfg, "sigma_max", 25.0, float),
    )
    unmapped_fraction = _cfg(cfg, "unmapped_fraction", 0.25, float)
    world, taxonomy = generate_world(
        seed, n_species, grid, sigma_range, unmapped_fraction
    )

    stage("sample-observations")
    per_species = _cfg(cfg, "per_species", 200, int)
    obs = sample_observations(world, per_species, seed)

    stage("sample-eval-items")
    n_items = _cfg(cfg, "n_eval_items", 2000, int)
    items = sample_eval_items(world, n_items, seed)
    n_pairs = _cfg(cfg, "n_confusion_pairs", 3, int)
    weight = _cfg(cfg, "confusion_weight", 0.6, float)
    plan = make_confusion_plan(world, n_pairs, weight, seed)
    base_accuracy = _cfg(cfg, "base_accuracy", 0.75, float)
    evalset = synth_vision_predictions(world, items, plan, base_accuracy, seed)

    stage("write-fixtures")
    outdir = Path(args.out or "fixtures")
    outdir.mkdir(parents=True, exist_ok=True)
    vision_ids = [f"sp{v:03d}" for v in range(world.num_species)]
    geo_ids = [vision_ids[int(v)] for v in world.mapped_vision_indices()]

    save_observations(obs, geo_ids, outdir / "observations.csv")
    save_ranges(world.mapped_ranges(), outdir / "expert_ranges.bin")
    save_ranges(world.truth_rasters, outdir / "truth_ranges.bin")
    matrix = np.stack([item.vision for item in evalset.items])
    save_matrix(matrix, outdir / "vision.f32m")
    save_species_sidecar(outdir / "vision.f32m", vision_ids)
    save_eval_items(items, vision_ids, outdir / "eval_items.csv")
    mapping = {
        vision_ids[v]: (
            None
            if taxonomy.vision_to_geo[v] == UNMAPPED
            else geo_ids[int(taxonomy.vision_to_geo[v])]
        )
        for v in range(world.num_species)
    }
    save_taxonomy_json(mapping, outdir / "taxonomy.json")
    manifest = {
        "base_accuracy": base_accuracy,
        "confusion_pairs": [[p.a, p.b, p.weight] for p in plan.pairs],
        "grid_cols": grid.n_cols,
        "grid_rows": grid.n_rows,
        "n_eval_items": n_items,
        "n_species": n_species,
        "per_species": per_species,
        "seed": seed,
        "sigma_range": list(sigma_range),
        "unmapped_fraction": unmapped_fraction,
    }
    (outdir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
    print(f"fixtures written to {outdir}")
    return 0


def _cmd_train(args: argparse.Namespace, stage: _Stage) -> int:
    cfg = _load_config(args.config)
    stage("load-observations")
    obs, geo_ids = load_observations(args.obs)
    if not species_sidecar_path(args.obs).exists():
        save_species_sidecar(args.obs, geo_ids)

    stage("train")
    model_cfg = _model_config(cfg, args, obs.num_species)
    train_cfg = _train_config(cfg, args)
    sink = DirectoryCheckpointSink(args.checkpoint_dir) if args.checkpoint_dir else None
    model, history = train(obs, model_cfg, train_cfg, checkpoint_sink=sink)

    stage("save-model")
    out = args.out or "model.sinr"
    save_model(model, out)
    report = {
        "config_echo": {
            "batch_size": train_cfg.batch_size,
            "dropout": model_cfg.dropout_rate,
            "epochs": train_cfg.epochs,
            "hidden_dim": model_cfg.hidden_dim,
            "learning_rate": train_cfg.learning_rate,
            "num_blocks": model_cfg.num_residual_blocks,
            "obs_cap": train_cfg.obs_cap,
            "seed": train_cfg.seed,
        },
        "loss_history": [
            {
                "epoch": i + 1,
                "negative_term": h.negative_term,
                "positive_term": h.positive_term,
                "random_negative_term": h.random_negative_term,
                "total": h.total,
            }
            for i, h in enumerate(history)
        ],
        "model_path": str(out),
        "num_observations": len(obs.records),
        "num_species": obs.num_species,
    }
    _emit_report(report, args.report)
    return 0


def _load_evalset(
    args: argparse.Namespace, stage: _Stage
) -> tuple[GeoPriorEvalSet, TaxonomyMap]:
    stage("load-vision-matrix")
    matrix = load_matrix(args.vision)
    vision_ids = load_species_sidecar(args.vision)
    if len(vision_ids) != matrix.shape[1]:
        raise FileFormatError(
            f"vision matrix has {matrix.shape[1]} columns but sidecar lists "
            f"{len(vision_ids)} species"
        )
    stage("load-eval-items")
    items = load_eval_items(args.items, vision_ids)
    if len(items) != matrix.shape[0]:
        raise FileFormatError(
            f"{len(items)} eval items but vision matrix has {matrix.shape[0]} rows"
        )
    stage("load-taxonomy")
    geo_ids = load_species_ids(args.geo_species)
    mapping = load_taxonomy_json(args.taxonomy)
    taxonomy = compile_taxonomy(mapping, vision_ids, geo_ids)
    evalset = GeoPriorEvalSet(
        [
            EvalItem(matrix[i].astype(np.float64), coord, t)
            for i, (coord, t) in enumerate(items)
        ]
    )
    return evalset, taxonomy


def _cmd_eval_geoprior(args: argparse.Namespace, stage: _Stage) -> int:
    cfg = _load_config(args.config)
    stage("load-model")
    model = load_model(args.model)
    evalset, taxonomy = _load_evalset(args, stage)
    stage("evaluate")
    report = eval_geo_prior(model, evalset, taxonomy, _fusion_config(cfg, args))
    _emit_report(report.to_json_dict(), args.out)
    return 0


def _cmd_eval_range(args: argparse.Namespace, stage: _Stage) -> int:
    _load_config(args.config)
    stage("load-model")
    model = load_model(args.model)
    stage("load-ranges")
    ranges = load_ranges(args.ranges)
    stage("evaluate")
    result = mean_average_precision(model, ranges)
    report = {
        "map": result.map_value,
        "num_evaluated": len(result.per_species_ap),
        "per_species_ap": {str(k): v for k, v in result.per_species_ap.items()},
        "skipped_species_ids": result.skipped_species_ids,
    }
    _emit_report(report, args.out)
    return 0


_PARAM_BY_FLAG = {
    "k": "k_default",
    "delta": "delta",
    "epochs": "epochs",
    "hidden-dim": "hidden_dim",
}


def _sweep_table(rows: list[SweepRow]) -> str:
    headers = ["param", "value", "vision_top1", "fused_top1", "gain_pp", "status"]
    cells = [headers]
    for row in rows:
        if row.report is None:
            cells.append(
                [row.parameter, str(row.value), "-", "-", "-", f"failed: {row.error}"]
            )
        else:
            r = row.report
            cells.append(
                [
                    row.parameter,
                    str(row.value),
                    f"{r.vision_only_top1:.4f}",
                    f"{r.fused_top1:.4f}",
                    f"{r.gain_pp:+.3f}",
                    "ok",
                ]
            )
    widths = [max(len(c[i]) for c in cells) for i in range(len(headers))]
    lines = ["  ".join(c[i].ljust(widths[i]) for i in range(len(headers))) for c in cells]
    return "\n".join(lines)


def _cmd_sweep(args: argparse.Namespace, stage: _Stage) -> int:
    cfg = _load_config(args.config)
    parameter = _PARAM_BY_FLAG[args.param]
    stage("parse-values")
    try:
        if parameter in ("epochs", "hidden_dim"):
            values = [int(v) for v in args.values.split(",") if v]
        else:
            values = [float(v) for v in args.values.split(",") if v]
    except ValueError as exc:
        raise ValueError(f"bad --values {args.values!r}: {exc}") from exc

    evalset, taxonomy = _load_evalset(args, stage)
    ranges = None
    if args.ranges:
        stage("load-ranges")
        ranges = {Path(args.ranges).stem: load_ranges(args.ranges)}

    if parameter in ("k_default", "delta"):
        stage("load-model")
        if not args.model:
            raise ValueError(f"{args.param} sweep requires --model")
        base = load_model(args.model)
    else:
        stage("load-observations")
        if not args.obs:
            raise ValueError(f"{args.param} sweep requires --obs")
        obs, _ = load_observations(args.obs)
        base = TrainingJob(
            obs=obs,
            model_config=_model_config(cfg, args, obs.num_species),
            train_config=_train_config(cfg, args),
            checkpoint_dir=Path(args.checkpoint_dir) if args.checkpoint_dir else None,
        )

    stage("sweep")
    rows = sweep(
        base,
        parameter,
        values,
        evalset,
        taxonomy,
        fusion_config=_fusion_config(cfg, args),
        ranges=ranges,
    )
    doc = [row.to_json_dict() for row in rows]
    _emit_report(doc, args.out)
    sys.stdout.write(_sweep_table(rows) + "\n")
    return 0


def _cmd_export_map(args: argparse.Namespace, stage: _Stage) -> int:
    cfg = _load_config(args.config)
    stage("load-model")
    model = load_model(args.model)
    stage("export")
    rows = args.rows if args.rows is not None else _cfg(cfg, "grid_rows", 180, int)
    cols = args.cols if args.cols is not None else _cfg(cfg, "grid_cols", 360, int)
    grid = GridSpec(rows, cols)
    out = args.out or f"species{args.species}.png"
    export_range_map(model, args.species, grid, out)
    print(f"map written to {out}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config document; flags override its fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None, help="output path")


def _add_eval_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--items", required=True, help="eval items CSV")
    p.add_argument("--vision", required=True, help="vision probability matrix (F32M)")
    p.add_argument("--taxonomy", required=True, help="taxonomy JSON")
    p.add_argument(
        "--geo-species",
        required=True,
        help="geo species sidecar JSON (e.g. observations.csv.species.json)",
    )
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--k", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="geoprior",
        description="Train and evaluate geographic priors for species classification.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic fixture directory")
    _add_common(p)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train a model on an observation CSV")
    _add_common(p)
    p.add_argument("--obs", required=True, help="observation CSV")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--report", default=None, help="also write the JSON report here")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval-geoprior", help="Top-1 gain of the fused predictions")
    _add_common(p)
    p.add_argument("--model", required=True)
    _add_eval_inputs(p)
    p.set_defaults(func=_cmd_eval_geoprior)

    p = sub.add_parser("eval-range", help="MAP against expert range rasters")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--ranges", required=True, help="range fixture file")
    p.set_defaults(func=_cmd_eval_range)

    p = sub.add_parser("sweep", help="evaluate one knob over a list of values")
    _add_common(p)
    p.add_argument("--param", required=True, choices=sorted(_PARAM_BY_FLAG))
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--model", default=None, help="trained model (k/delta sweeps)")
    p.add_argument("--obs", default=None, help="observation CSV (epochs/hidden-dim)")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--checkpoint-dir", default=None)
    p.add_argument("--ranges", default=None, help="optional range fixture for MAP")
    _add_eval_inputs(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("export-map", help="export one species' range map as PNG")
    _add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--species", type=int, required=True)
    p.add_argument("--rows", type=int, default=None)
    p.add_argument("--cols", type=int, default=None)
    p.set_defaults(func=_cmd_export_map)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    stage = _Stage()
    try:
        return args.func(args, stage)
    except (FileFormatError, ValueError, KeyError, OSError) as exc:
        print(f"error at stage '{stage.name}': {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
