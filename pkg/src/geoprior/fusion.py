"""Geographic priors over a vision classifier's species probabilities.

The vision model scores V species; the geographic model scores S of
them (its own taxonomy).  A taxonomy map ties the two: each vision
index is either mapped to a geo index or unmapped.  At a coordinate,
the prior for a mapped species is the geo model's probability there
plus a small floor delta (clamped at 1), and every unmapped species
receives the constant k_default.  Fusion multiplies the prior into the
vision probabilities elementwise and takes the argmax.

delta keeps a mapped species from being vetoed outright where the geo
model says (near) zero; k_default < 1 down-weights species the geo
model knows nothing about so they stop outcompeting mapped species
that carry real geographic evidence.  delta is not added to k_default.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .model import GeoCoordinate, SinrModel, encode_location

__all__ = [
    "TaxonomyMap",
    "FusionConfig",
    "VisionPrediction",
    "FusedPrediction",
    "UNMAPPED",
    "build_prior",
    "fuse",
]

#: sentinel geo index for vision species outside the geo taxonomy
UNMAPPED = -1


@dataclass(eq=False)
class TaxonomyMap:
    """vision_to_geo[v] is a geo species index or UNMAPPED."""

    vision_to_geo: np.ndarray
    num_geo_species: int

    def __post_init__(self) -> None:
        self.vision_to_geo = np.asarray(self.vision_to_geo, dtype=np.int64).reshape(-1)
        if self.num_geo_species < 0:
            raise ValueError("num_geo_species must be >= 0")
        v = self.vision_to_geo
        bad = (v != UNMAPPED) & ((v < 0) | (v >= self.num_geo_species))
        if bad.any():
            raise ValueError(
                f"geo indices out of range at vision indices {np.nonzero(bad)[0].tolist()}"
            )
        mapped = v[v != UNMAPPED]
        if len(np.unique(mapped)) != len(mapped):
            raise ValueError("mapped geo indices must be unique")

    @property
    def num_vision_species(self) -> int:
        return len(self.vision_to_geo)

    @property
    def mapped_count(self) -> int:
        return int((self.vision_to_geo != UNMAPPED).sum())

    @property
    def unmapped_count(self) -> int:
        return self.num_vision_species - self.mapped_count

    @staticmethod
    def all_unmapped(num_vision: int, num_geo: int = 0) -> "TaxonomyMap":
        return TaxonomyMap(np.full(num_vision, UNMAPPED, dtype=np.int64), num_geo)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TaxonomyMap):
            return NotImplemented
        return self.num_geo_species == other.num_geo_species and bool(
            np.array_equal(self.vision_to_geo, other.vision_to_geo)
        )


@dataclass(frozen=True)
class FusionConfig:
    delta: float = 0.0
    k_default: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.delta < 1.0:
            raise ValueError(f"delta must be in [0, 1), got {self.delta}")
        if not 0.0 < self.k_default <= 1.0:
            raise ValueError(f"k_default must be in (0, 1], got {self.k_default}")


VisionPrediction = Union[np.ndarray, Sequence[float]]


@dataclass(frozen=True)
class FusedPrediction:
    scores: np.ndarray
    top1: int


def _as_vision_vector(vision: VisionPrediction) -> np.ndarray:
    v = np.asarray(vision, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("vision probabilities must be finite")
    if (v < 0).any():
        raise ValueError("vision probabilities must be >= 0")
    return v


def build_prior(
    model: SinrModel,
    coord: GeoCoordinate,
    taxonomy: TaxonomyMap,
    config: FusionConfig,
) -> np.ndarray:
    """Per-vision-species prior vector at a coordinate, entries in (0, 1]."""
    if taxonomy.num_geo_species != model.num_species:
        raise ValueError(
            f"taxonomy expects {taxonomy.num_geo_species} geo species, "
            f"model has {model.num_species}"
        )
    geo_probs = model.forward(encode_location(coord))
    prior = np.full(taxonomy.num_vision_species, config.k_default, dtype=np.float64)
    mapped = taxonomy.vision_to_geo != UNMAPPED
    prior[mapped] = np.minimum(
        geo_probs[taxonomy.vision_to_geo[mapped]] + config.delta, 1.0
    )
    return prior


def fuse(prior: np.ndarray, vision: VisionPrediction) -> FusedPrediction:
    """Elementwise product of prior and vision; top1 breaks ties at the lowest index."""
    p = np.asarray(prior, dtype=np.float64).reshape(-1)
    v = _as_vision_vector(vision)
    if p.shape != v.shape:
        raise ValueError(f"prior length {p.shape[0]} != vision length {v.shape[0]}")
    if (p < 0).any():
        raise ValueError("prior entries must be >= 0")
    scores = p * v
    return FusedPrediction(scores=scores, top1=int(np.argmax(scores)))
