"""Deterministic synthetic ground truth for end-to-end checks.

A synthetic world holds V species, each a Gaussian presence bump on
the sphere: probability peak * exp(-d^2 / (2 sigma^2)) at great-circle
distance d (degrees of arc) from the species center.  Thresholding the
bump at half its peak yields a binary truth raster per species, the
stand-in for an expert range map.

A seeded taxonomy split leaves a chosen fraction of species unmapped:
they exist in the vision label space and in eval items but never in
geo training data, which is exactly the scenario the k_default knob
exists for.  Observation sampling draws presence-only records from the
bumps by rejection; the synthetic vision classifier puts most mass on
the true species unless it sits in a confusion pair, in which case the
pair's partner gets the larger share and vision-only Top-1 errs.
Pairs are range-disjoint by construction, so a trained geographic
prior has the information needed to correct those errors.

Everything is bit-deterministic per seed; observation and eval-item
locations use per-species derived streams so one species' draw count
does not perturb another's.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .evaluation import EvalItem, GeoPriorEvalSet
from .fusion import UNMAPPED, TaxonomyMap
from .grids import ExpertRangeSet, GridSpec
from .model import GeoCoordinate, _validate_coordinate
from .training import Observation, ObservationSet

__all__ = [
    "SyntheticSpecies",
    "SyntheticWorld",
    "ConfusionPair",
    "ConfusionPlan",
    "great_circle_deg",
    "generate_world",
    "sample_observations",
    "sample_eval_items",
    "make_confusion_plan",
    "synth_vision_predictions",
]

# proposals per species before rejection sampling gives up
_MAX_PROPOSALS = 2_000_000
_CHUNK = 4096


def great_circle_deg(
    lon1: np.ndarray, lat1: np.ndarray, lon2: float, lat2: float
) -> np.ndarray:
    """Great-circle distance in degrees of arc (haversine)."""
    p1 = np.radians(np.asarray(lat1, dtype=np.float64))
    p2 = np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(lon2 - np.asarray(lon1, dtype=np.float64))
    a = np.sin(dphi / 2.0) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2.0) ** 2
    return np.degrees(2.0 * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0))))


@dataclass(frozen=True)
class SyntheticSpecies:
    center: GeoCoordinate
    sigma_deg: float
    peak: float

    def __post_init__(self) -> None:
        _validate_coordinate(self.center)
        if self.sigma_deg <= 0:
            raise ValueError(f"sigma_deg must be positive, got {self.sigma_deg}")
        if not 0.0 < self.peak <= 1.0:
            raise ValueError(f"peak must be in (0, 1], got {self.peak}")

    def presence_probability(self, lon_deg: np.ndarray, lat_deg: np.ndarray) -> np.ndarray:
        d = great_circle_deg(lon_deg, lat_deg, self.center.lon_deg, self.center.lat_deg)
        return self.peak * np.exp(-(d**2) / (2.0 * self.sigma_deg**2))


@dataclass
class SyntheticWorld:
    """V species with truth rasters on a grid plus the taxonomy split.

    truth_rasters uses world species indices (0..V-1) as its ids; use
    mapped_ranges() for a range set keyed by geo model indices.
    """

    species: list[SyntheticSpecies]
    grid: GridSpec
    truth_rasters: ExpertRangeSet
    taxonomy: TaxonomyMap

    @property
    def num_species(self) -> int:
        return len(self.species)

    def mapped_vision_indices(self) -> np.ndarray:
        """Vision indices with a geo counterpart, in geo-index order."""
        order = np.argsort(self.taxonomy.vision_to_geo)
        mapped = order[self.taxonomy.vision_to_geo[order] != UNMAPPED]
        return mapped

    def mapped_ranges(self) -> ExpertRangeSet:
        """Truth rasters of mapped species, keyed by geo index."""
        vis = self.mapped_vision_indices()
        geo_ids = self.taxonomy.vision_to_geo[vis]
        return ExpertRangeSet(
            grid=self.grid,
            presence=self.truth_rasters.presence[vis],
            species_ids=[int(g) for g in geo_ids],
        )


class ConfusionPair(NamedTuple):
    a: int
    b: int
    weight: float


@dataclass(frozen=True)
class ConfusionPlan:
    pairs: list[ConfusionPair]

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for p in self.pairs:
            if p.a == p.b:
                raise ValueError(f"species {p.a} confused with itself")
            if not 0.0 <= p.weight < 1.0:
                raise ValueError(f"confusion weight must be in [0, 1), got {p.weight}")
            if p.a in seen or p.b in seen:
                raise ValueError("a species may appear in at most one confusion pair")
            seen.update((p.a, p.b))

    def partner_of(self) -> dict[int, tuple[int, float]]:
        out: dict[int, tuple[int, float]] = {}
        for p in self.pairs:
            out[p.a] = (p.b, p.weight)
            out[p.b] = (p.a, p.weight)
        return out


def _draw_species(
    rng: np.random.Generator, sigma_range: tuple[float, float]
) -> SyntheticSpecies:
    lon = rng.uniform(-180.0, 180.0)
    lat = float(np.degrees(np.arcsin(2.0 * rng.uniform(0.0, 1.0) - 1.0)))
    sigma = rng.uniform(sigma_range[0], sigma_range[1])
    peak = rng.uniform(0.7, 1.0)
    return SyntheticSpecies(GeoCoordinate(float(lon), lat), float(sigma), float(peak))


def generate_world(
    seed: int,
    n_species: int,
    grid: GridSpec,
    sigma_range: tuple[float, float] = (10.0, 25.0),
    unmapped_fraction: float = 0.0,
) -> tuple[SyntheticWorld, TaxonomyMap]:
    """Seeded world: random bump species, truth rasters, taxonomy split.

    round(n_species * unmapped_fraction) species are left unmapped;
    the rest get geo indices 0..M-1 in ascending vision-index order.
    A species whose truth raster would be empty is redrawn.
    """
    if n_species < 2:
        raise ValueError("n_species must be >= 2")
    if not 0.0 <= unmapped_fraction < 1.0:
        raise ValueError(f"unmapped_fraction must be in [0, 1), got {unmapped_fraction}")
    if not 0.0 < sigma_range[0] <= sigma_range[1]:
        raise ValueError(f"invalid sigma_range {sigma_range}")

    rng = np.random.default_rng(seed)
    lons, lats = grid.cell_centers()
    species: list[SyntheticSpecies] = []
    presence = np.zeros((n_species, grid.num_cells), dtype=bool)
    for i in range(n_species):
        for _ in range(100):
            sp = _draw_species(rng, sigma_range)
            row = sp.presence_probability(lons, lats) >= 0.5 * sp.peak
            if row.any():
                break
        else:
            raise ValueError(
                f"species {i}: no draw produced a non-empty truth raster "
                f"(grid too coarse for sigma_range {sigma_range})"
            )
        species.append(sp)
        presence[i] = row

    n_unmapped = int(round(n_species * unmapped_fraction))
    unmapped = set(
        int(v) for v in rng.choice(n_species, size=n_unmapped, replace=False)
    )
    vision_to_geo = np.full(n_species, UNMAPPED, dtype=np.int64)
    g = 0
    for v in range(n_species):
        if v not in unmapped:
            vision_to_geo[v] = g
            g += 1
    taxonomy = TaxonomyMap(vision_to_geo, num_geo_species=g)

    rasters = ExpertRangeSet(grid, presence, list(range(n_species)))
    world = SyntheticWorld(species, grid, rasters, taxonomy)
    return world, taxonomy


def _species_rng(seed: int, stream: int, species_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, species_index])


def _sample_from_bump(
    sp: SyntheticSpecies, n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Rejection sampling from the bump's normalized presence surface."""
    got_lon: list[np.ndarray] = []
    got_lat: list[np.ndarray] = []
    got = 0
    proposed = 0
    while got < n:
        if proposed >= _MAX_PROPOSALS:
            raise ValueError(
                f"degenerate species (sigma {sp.sigma_deg}): rejection sampling "
                f"accepted {got}/{n} after {proposed} proposals"
            )
        lon = rng.uniform(-180.0, 180.0, size=_CHUNK)
        lat = np.degrees(np.arcsin(2.0 * rng.uniform(0.0, 1.0, size=_CHUNK) - 1.0))
        accept = rng.uniform(0.0, 1.0, size=_CHUNK) * sp.peak < sp.presence_probability(
            lon, lat
        )
        got_lon.append(lon[accept])
        got_lat.append(lat[accept])
        got += int(accept.sum())
        proposed += _CHUNK
    lon_all = np.concatenate(got_lon)[:n]
    lat_all = np.concatenate(got_lat)[:n]
    return lon_all, lat_all


def sample_observations(
    world: SyntheticWorld, per_species: int, seed: int
) -> ObservationSet:
    """per_species presence-only records for every mapped species.

    Records carry geo species indices and are grouped in ascending geo
    order; unmapped species contribute nothing (they have no geo
    training data by construction).
    """
    if per_species < 1:
        raise ValueError("per_species must be >= 1")
    records: list[Observation] = []
    for vis in world.mapped_vision_indices():
        geo = int(world.taxonomy.vision_to_geo[vis])
        rng = _species_rng(seed, 0, int(vis))
        lons, lats = _sample_from_bump(world.species[vis], per_species, rng)
        records.extend(
            Observation(geo, GeoCoordinate(float(x), float(y)))
            for x, y in zip(lons, lats)
        )
    return ObservationSet(records, num_species=world.taxonomy.num_geo_species)


def sample_eval_items(
    world: SyntheticWorld, n_items: int, seed: int
) -> list[tuple[GeoCoordinate, int]]:
    """(coordinate, true vision index) pairs covering all V species.

    Species cycle round-robin (item i belongs to species i mod V), so
    every species including unmapped ones appears; each coordinate is
    drawn from its species' presence surface.
    """
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    v = world.num_species
    counts = [len(range(s, n_items, v)) for s in range(v)]
    draws: list[tuple[np.ndarray, np.ndarray]] = []
    for s in range(v):
        rng = _species_rng(seed, 1, s)
        draws.append(
            _sample_from_bump(world.species[s], counts[s], rng)
            if counts[s]
            else (np.empty(0), np.empty(0))
        )
    items: list[tuple[GeoCoordinate, int]] = []
    for i in range(n_items):
        s = i % v
        k = i // v
        lon, lat = draws[s][0][k], draws[s][1][k]
        items.append((GeoCoordinate(float(lon), float(lat)), s))
    return items


def make_confusion_plan(
    world: SyntheticWorld,
    n_pairs: int,
    weight: float,
    seed: int,
) -> ConfusionPlan:
    """n_pairs range-disjoint confusion pairs, each species used once.

    When unmapped species exist the first pair crosses the taxonomy
    boundary (one mapped, one unmapped): items of its mapped member are
    the cases where only a down-weighted k_default lets the fused
    scores recover, which is what a k sweep is meant to expose.
    Remaining pairs are mapped-mapped.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng([seed, 2])
    pres = world.truth_rasters.presence
    mapped = [int(v) for v in world.mapped_vision_indices()]
    unmapped = [v for v in range(world.num_species) if v not in set(mapped)]

    def disjoint(a: int, b: int) -> bool:
        return not bool((pres[a] & pres[b]).any())

    used: set[int] = set()
    pairs: list[ConfusionPair] = []

    def pick(cands: list[tuple[int, int]]) -> Optional[ConfusionPair]:
        order = rng.permutation(len(cands))
        for j in order:
            a, b = cands[j]
            if a not in used and b not in used and disjoint(a, b):
                used.update((a, b))
                return ConfusionPair(a, b, weight)
        return None

    if unmapped:
        mixed = [(a, b) for a in mapped for b in unmapped]
        pair = pick(mixed)
        if pair is not None:
            pairs.append(pair)
    while len(pairs) < n_pairs:
        mm = [
            (a, b)
            for i, a in enumerate(mapped)
            for b in mapped[i + 1 :]
            if a not in used and b not in used
        ]
        pair = pick(mm)
        if pair is None:
            raise ValueError(
                f"found only {len(pairs)} of {n_pairs} disjoint confusion pairs"
            )
        pairs.append(pair)
    return ConfusionPlan(pairs[:n_pairs])


def synth_vision_predictions(
    world: SyntheticWorld,
    items: Sequence[tuple[GeoCoordinate, int]],
    plan: ConfusionPlan,
    base_accuracy: float,
    seed: int,
) -> GeoPriorEvalSet:
    """Vision probability vectors with controlled confusions.

    The true species t receives mass base_accuracy, except when t sits
    in a confusion pair with weight w: then t gets (1-w)*base_accuracy
    and its partner w*base_accuracy (w > 0.5 makes vision-only err).
    The remaining mass spreads uniformly over the other species with a
    tiny seeded jitter so argmax ties cannot occur among them; each
    vector sums to 1 within 1e-9.
    """
    if not 0.0 < base_accuracy <= 1.0:
        raise ValueError(f"base_accuracy must be in (0, 1], got {base_accuracy}")
    v = world.num_species
    partner = plan.partner_of()
    rng = np.random.default_rng([seed, 3])
    out: list[EvalItem] = []
    for coord, t in items:
        if not 0 <= t < v:
            raise ValueError(f"true species {t} outside [0, {v})")
        vec = np.zeros(v, dtype=np.float64)
        if t in partner:
            p, w = partner[t]
            vec[t] = (1.0 - w) * base_accuracy
            vec[p] = w * base_accuracy
            others = [j for j in range(v) if j != t and j != p]
        else:
            vec[t] = base_accuracy
            others = [j for j in range(v) if j != t]
        if others:
            fill = np.full(len(others), 1.0 / len(others)) + rng.uniform(
                0.0, 1e-9, size=len(others)
            )
            vec[others] = fill * ((1.0 - base_accuracy) / fill.sum())
        out.append(EvalItem(vec, coord, t))
    return GeoPriorEvalSet(out)
