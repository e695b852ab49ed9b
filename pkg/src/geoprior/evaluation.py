"""Benchmark tasks: Top-1 gain from a geographic prior, and range MAP.

Two measurements back every claim here:

* Geo-prior evaluation: for each item (vision probability vector, the
  photo's coordinate, the true species), compare vision-only Top-1
  against Top-1 of the fused scores.  The headline number is the gain,
  fused minus vision-only.
* Range evaluation: score every evaluable grid cell for each species,
  rank cells by score against the expert presence raster, and report
  per-species average precision plus their unweighted mean (MAP).

Average precision uses a fully deterministic ranking (descending score,
ties broken by ascending index) and compensated summation, so results
are reproducible to the bit and independently checkable by brute-force
enumeration of the same ranking.

A sweep harness re-evaluates one knob (k_default, delta, epochs, or
hidden_dim) over a list of values while holding everything else fixed;
the epochs axis reuses stored checkpoints instead of retraining.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

from .fusion import FusionConfig, TaxonomyMap, build_prior, fuse
from .grids import ExpertRangeSet
from .model import GeoCoordinate, ModelConfig, SinrModel
from .training import ObservationSet, TrainConfig, train

__all__ = [
    "EvalItem",
    "GeoPriorEvalSet",
    "EvalReport",
    "MapResult",
    "TrainingJob",
    "SweepRow",
    "average_precision",
    "map_from_scores",
    "mean_average_precision",
    "eval_geo_prior",
    "sweep",
]

SWEEP_PARAMETERS = ("k_default", "delta", "epochs", "hidden_dim")


class EvalItem(NamedTuple):
    vision: np.ndarray
    coord: GeoCoordinate
    true_vision_index: int


@dataclass
class GeoPriorEvalSet:
    items: list[EvalItem]

    def __post_init__(self) -> None:
        if not self.items:
            raise ValueError("evaluation set must contain at least one item")
        v = len(self.items[0].vision)
        for i, item in enumerate(self.items):
            if len(item.vision) != v:
                raise ValueError(
                    f"item {i}: vision length {len(item.vision)} != {v}"
                )
            if not 0 <= item.true_vision_index < v:
                raise ValueError(
                    f"item {i}: true index {item.true_vision_index} "
                    f"outside [0, {v})"
                )

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_vision_species(self) -> int:
        return len(self.items[0].vision)


@dataclass(frozen=True)
class EvalReport:
    """gain is a fraction (fused_top1 - vision_only_top1), not rescaled."""

    vision_only_top1: float
    fused_top1: float
    gain: float
    map_scores: Optional[dict[str, float]] = None
    config_echo: dict = field(default_factory=dict)

    @property
    def gain_pp(self) -> float:
        """gain in percentage points, for display."""
        return 100.0 * self.gain

    def to_json_dict(self) -> dict:
        return {
            "vision_only_top1": self.vision_only_top1,
            "fused_top1": self.fused_top1,
            "gain": self.gain,
            "gain_pp": self.gain_pp,
            "map_scores": self.map_scores,
            "config_echo": self.config_echo,
        }


@dataclass(frozen=True)
class MapResult:
    map_value: float
    per_species_ap: dict[int, float]
    skipped_species_ids: list[int]


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of a ranked list: mean over positives of precision at their rank.

    Ranking is by descending score with ties broken by ascending index.
    Summation uses math.fsum, so the value is identical regardless of
    how the equal-score items happen to be arranged in memory.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels, dtype=bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.shape[0]} scores vs {y.shape[0]} labels")
    if s.size == 0:
        raise ValueError("average precision of an empty list is undefined")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if not y.any():
        raise ValueError("no positive labels: average precision is undefined")
    order = np.argsort(-s, kind="stable")
    ranked = y[order]
    pos_ranks = np.nonzero(ranked)[0] + 1
    hits = np.arange(1, len(pos_ranks) + 1)
    return math.fsum((hits / pos_ranks).tolist()) / len(pos_ranks)


def _map_over_cells(scores_eval: np.ndarray, ranges: ExpertRangeSet) -> MapResult:
    """Core MAP: scores_eval row i scores the evaluable cells of range i."""
    cells = ranges.grid.evaluable_indices()
    if len(cells) == 0:
        raise ValueError("grid mask excludes every cell")
    per_species: dict[int, float] = {}
    skipped: list[int] = []
    for i, sid in enumerate(ranges.species_ids):
        labels = ranges.presence[i, cells]
        if not labels.any():
            skipped.append(sid)
            continue
        per_species[sid] = average_precision(scores_eval[i], labels)
    if not per_species:
        raise ValueError("every species is unevaluable (no presence cells)")
    map_value = math.fsum(per_species.values()) / len(per_species)
    return MapResult(map_value, per_species, skipped)


def map_from_scores(scores: np.ndarray, ranges: ExpertRangeSet) -> MapResult:
    """MAP of externally supplied cell scores, shape (num_ranges, num_cells)."""
    s = np.asarray(scores, dtype=np.float64)
    if s.shape != (ranges.num_ranges, ranges.grid.num_cells):
        raise ValueError(
            f"scores shape {s.shape} != "
            f"({ranges.num_ranges}, {ranges.grid.num_cells})"
        )
    cells = ranges.grid.evaluable_indices()
    return _map_over_cells(s[:, cells], ranges)


def mean_average_precision(model: SinrModel, ranges: ExpertRangeSet) -> MapResult:
    """MAP of the model's probabilities against expert presence rasters.

    Each range's species id selects the model output scored for it;
    only evaluable (unmasked) cells participate.
    """
    if ranges.num_ranges == 0:
        raise ValueError("empty range set")
    bad = [s for s in ranges.species_ids if s >= model.num_species]
    if bad:
        raise ValueError(
            f"species ids {bad} outside model range [0, {model.num_species})"
        )
    cells = ranges.grid.evaluable_indices()
    lons, lats = ranges.grid.cell_centers()
    probs = model.forward_grid(lons[cells], lats[cells])
    ids = np.asarray(ranges.species_ids, dtype=np.int64)
    return _map_over_cells(probs[:, ids].T, ranges)


def eval_geo_prior(
    model: SinrModel,
    evalset: GeoPriorEvalSet,
    taxonomy: TaxonomyMap,
    config: FusionConfig,
) -> EvalReport:
    """Top-1 accuracy with and without the geographic prior."""
    if len(evalset) == 0:
        raise ValueError("empty evaluation set")
    if evalset.num_vision_species != taxonomy.num_vision_species:
        raise ValueError(
            f"eval set has {evalset.num_vision_species} vision species, "
            f"taxonomy {taxonomy.num_vision_species}"
        )
    n = len(evalset)
    vision_correct = 0
    fused_correct = 0
    for item in evalset.items:
        if int(np.argmax(item.vision)) == item.true_vision_index:
            vision_correct += 1
        prior = build_prior(model, item.coord, taxonomy, config)
        if fuse(prior, item.vision).top1 == item.true_vision_index:
            fused_correct += 1
    vision_top1 = vision_correct / n
    fused_top1 = fused_correct / n
    return EvalReport(
        vision_only_top1=vision_top1,
        fused_top1=fused_top1,
        gain=fused_top1 - vision_top1,
        config_echo={"delta": config.delta, "k_default": config.k_default},
    )


@dataclass
class TrainingJob:
    """Inputs a sweep needs to (re)train models.

    checkpoint_dir, when set, is both a cache to read existing epoch
    snapshots from (files named model_epoch{N}.sinr) and the place
    newly trained snapshots are written for reuse.  Cached files must
    come from the same observations and configs; the sweep trusts them.
    """

    obs: ObservationSet
    model_config: ModelConfig
    train_config: TrainConfig
    checkpoint_dir: Optional[Path] = None


@dataclass(frozen=True)
class SweepRow:
    parameter: str
    value: Union[int, float]
    report: Optional[EvalReport]
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_json_dict(self) -> dict:
        return {
            "parameter": self.parameter,
            "value": self.value,
            "report": None if self.report is None else self.report.to_json_dict(),
            "error": self.error,
        }


def _with_map_scores(
    report: EvalReport,
    model: SinrModel,
    ranges: Optional[dict[str, ExpertRangeSet]],
) -> EvalReport:
    if not ranges:
        return report
    scores = {
        name: mean_average_precision(model, rs).map_value
        for name, rs in ranges.items()
    }
    return replace(report, map_scores=scores)


def _epoch_snapshots(job: TrainingJob, epochs: Sequence[int]) -> dict[int, SinrModel]:
    needed = sorted({int(e) for e in epochs})
    if needed[0] < 1:
        raise ValueError("epoch values must be >= 1")
    snaps: dict[int, SinrModel] = {}
    if job.checkpoint_dir is not None:
        from .io import checkpoint_filename, load_model

        for e in needed:
            path = Path(job.checkpoint_dir) / checkpoint_filename(e)
            if path.exists():
                snaps[e] = load_model(path)
    missing = [e for e in needed if e not in snaps]
    if missing:
        wanted = set(missing)
        captured: dict[int, SinrModel] = {}

        def sink(epoch: int, model: SinrModel) -> None:
            if epoch in wanted:
                captured[epoch] = model

        run_cfg = replace(job.train_config, epochs=max(missing), checkpoint_every=1)
        train(job.obs, job.model_config, run_cfg, checkpoint_sink=sink)
        snaps.update(captured)
        if job.checkpoint_dir is not None:
            from .io import checkpoint_filename, save_model

            for e, m in captured.items():
                save_model(m, Path(job.checkpoint_dir) / checkpoint_filename(e))
    return snaps


def sweep(
    base: Union[SinrModel, TrainingJob],
    parameter: str,
    values: Sequence[Union[int, float]],
    evalset: GeoPriorEvalSet,
    taxonomy: TaxonomyMap,
    fusion_config: Optional[FusionConfig] = None,
    ranges: Optional[dict[str, ExpertRangeSet]] = None,
) -> list[SweepRow]:
    """One EvalReport per value, everything else held fixed.

    k_default and delta sweeps re-evaluate a trained model; epochs and
    hidden_dim sweeps require a TrainingJob.  A failing value yields a
    row with its error recorded while the remaining values still run.
    Output rows follow the input value order.
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(
            f"unknown sweep parameter {parameter!r}; expected one of {SWEEP_PARAMETERS}"
        )
    if len(values) == 0:
        raise ValueError("values must be non-empty")
    cfg = FusionConfig() if fusion_config is None else fusion_config
    rows: list[SweepRow] = []

    if parameter in ("k_default", "delta"):
        if not isinstance(base, SinrModel):
            raise ValueError(f"{parameter} sweep requires a trained model")
        for v in values:
            try:
                row_cfg = replace(cfg, **{parameter: float(v)})
                report = eval_geo_prior(base, evalset, taxonomy, row_cfg)
                report = _with_map_scores(report, base, ranges)
                rows.append(SweepRow(parameter, v, report))
            except Exception as exc:
                rows.append(SweepRow(parameter, v, None, error=str(exc)))
        return rows

    if not isinstance(base, TrainingJob):
        raise ValueError(f"{parameter} sweep requires a TrainingJob")

    if parameter == "epochs":
        try:
            snaps = _epoch_snapshots(base, [int(v) for v in values])
        except Exception as exc:
            return [SweepRow(parameter, v, None, error=str(exc)) for v in values]
        for v in values:
            try:
                model = snaps[int(v)]
                report = eval_geo_prior(model, evalset, taxonomy, cfg)
                report = _with_map_scores(report, model, ranges)
                rows.append(SweepRow(parameter, v, report))
            except Exception as exc:
                rows.append(SweepRow(parameter, v, None, error=str(exc)))
        return rows

    for v in values:  # hidden_dim: fresh training per value
        try:
            mc = replace(base.model_config, hidden_dim=int(v))
            model, _ = train(base.obs, mc, base.train_config)
            report = eval_geo_prior(model, evalset, taxonomy, cfg)
            report = _with_map_scores(report, model, ranges)
            rows.append(SweepRow(parameter, v, report))
        except Exception as exc:
            rows.append(SweepRow(parameter, v, None, error=str(exc)))
    return rows
