"""Presence-only training with the full assume-negative loss.

Every observation contributes one weighted positive (its own species at
its location) and S-1 implied negatives (all other species at that
location); each observation is paired with a pseudo-negative location
sampled uniformly on the sphere where all S species count as absent.
Per example, with predicted probabilities y at the observed location x
and r at the random location:

    L = (1/S) * [ lambda * -log y[z]
                  + sum_{j != z} -log(1 - y[j])
                  + sum_j       -log(1 - r[j]) ]

and the batch loss is the mean over examples.  Probabilities are
clamped to [1e-7, 1 - 1e-7] before the logs.

Gradients are exact reverse-mode derivatives of that expression for the
fixed architecture; the optimizer is Adam.  The whole loop consumes a
single seeded generator in a fixed order (init, then per epoch: shuffle,
per batch: negatives, dropout), so a run is fully reproducible and the
state after epoch N does not depend on how many epochs follow.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .model import (
    GeoCoordinate,
    ModelConfig,
    SinrModel,
    _sigmoid,
    encode_batch,
    init_model,
)

__all__ = [
    "Observation",
    "ObservationSet",
    "TrainConfig",
    "LossBreakdown",
    "ModelGradients",
    "cap_observations",
    "sample_random_locations",
    "an_full_loss",
    "loss_gradients",
    "train",
]

LOG_EPS = 1e-7

CheckpointSink = Callable[[int, SinrModel], None]


class Observation(NamedTuple):
    species_index: int
    coord: GeoCoordinate


@dataclass
class ObservationSet:
    """Presence-only records against a dense species indexing."""

    records: list[Observation]
    num_species: int

    def __post_init__(self) -> None:
        if self.num_species < 1:
            raise ValueError("num_species must be >= 1")
        for rec in self.records:
            if not 0 <= rec.species_index < self.num_species:
                raise ValueError(
                    f"species index {rec.species_index} outside [0, {self.num_species})"
                )

    def __len__(self) -> int:
        return len(self.records)

    def species_array(self) -> np.ndarray:
        return np.array([r.species_index for r in self.records], dtype=np.int64)

    def lonlat_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lons = np.array([r.coord.lon_deg for r in self.records], dtype=np.float64)
        lats = np.array([r.coord.lat_deg for r in self.records], dtype=np.float64)
        return lons, lats

    def counts_per_species(self) -> np.ndarray:
        return np.bincount(self.species_array(), minlength=self.num_species)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 2048
    learning_rate: float = 5e-4
    #: positive-term weight; None means num_species, balancing the single
    #: positive against the S-1 implied negatives.
    pos_weight_lambda: Optional[float] = None
    obs_cap: int = 100
    seed: int = 0
    #: checkpoint every N epochs through the sink; 0 disables.
    checkpoint_every: int = 5
    #: None inherits the model config's dropout_rate.
    dropout_rate: Optional[float] = None

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.obs_cap < 1:
            raise ValueError("obs_cap must be >= 1")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


@dataclass(frozen=True)
class LossBreakdown:
    """total == positive_term + negative_term + random_negative_term."""

    total: float
    positive_term: float
    negative_term: float
    random_negative_term: float

    @staticmethod
    def mean(parts: Sequence["LossBreakdown"]) -> "LossBreakdown":
        n = len(parts)
        p = sum(x.positive_term for x in parts) / n
        g = sum(x.negative_term for x in parts) / n
        r = sum(x.random_negative_term for x in parts) / n
        return LossBreakdown(p + g + r, p, g, r)


@dataclass
class BlockGradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class ModelGradients:
    """d(total)/d(weight) for every weight, same shapes as the model."""

    input_w: np.ndarray
    input_b: np.ndarray
    blocks: list[BlockGradients]
    head_w: np.ndarray
    head_b: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        out = [self.input_w, self.input_b]
        for blk in self.blocks:
            out.extend([blk.w1, blk.b1, blk.w2, blk.b2])
        out.extend([self.head_w, self.head_b])
        return out


def cap_observations(obs: ObservationSet, cap: int, seed: int) -> ObservationSet:
    """Subsample each species to at most `cap` records.

    Retained records are a seeded uniform draw without replacement; the
    original record order is preserved.  Species at or under the cap
    pass through untouched and do not consume randomness.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    rng = np.random.default_rng(seed)
    species = obs.species_array()
    keep = np.ones(len(obs.records), dtype=bool)
    for s in range(obs.num_species):
        idx = np.nonzero(species == s)[0]
        if len(idx) > cap:
            chosen = rng.choice(len(idx), size=cap, replace=False)
            drop = np.setdiff1d(np.arange(len(idx)), chosen)
            keep[idx[drop]] = False
    kept = [rec for rec, k in zip(obs.records, keep) if k]
    return ObservationSet(records=kept, num_species=obs.num_species)


def _sample_random_lonlat(
    n: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    lons = rng.uniform(-180.0, 180.0, size=n)
    u = rng.uniform(0.0, 1.0, size=n)
    lats = np.degrees(np.arcsin(2.0 * u - 1.0))
    return lons, lats


def sample_random_locations(n: int, rng: np.random.Generator) -> list[GeoCoordinate]:
    """n i.i.d. uniform-on-the-sphere coordinates (area-uniform latitude)."""
    if n < 0:
        raise ValueError("n must be >= 0")
    lons, lats = _sample_random_lonlat(n, rng)
    return [GeoCoordinate(float(x), float(y)) for x, y in zip(lons, lats)]


# ---------------------------------------------------------------------------
# vectorized forward/backward over raw weight arrays
#
# These helpers are dtype-agnostic so tests can run them on float64
# weight copies; the model stores float32 and numpy promotes to float64
# against the float64 feature matrices.
# ---------------------------------------------------------------------------


class _Weights(NamedTuple):
    input_w: np.ndarray
    input_b: np.ndarray
    blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]
    head_w: np.ndarray
    head_b: np.ndarray


def _weights_of(model: SinrModel) -> _Weights:
    return _Weights(
        model.input_w,
        model.input_b,
        [(b.w1, b.b1, b.w2, b.b2) for b in model.blocks],
        model.head_w,
        model.head_b,
    )


class _ForwardCache(NamedTuple):
    feats: np.ndarray
    z0: np.ndarray
    hs: list[np.ndarray]  # block inputs, len = num_blocks + 1 (last = head input)
    z1s: list[np.ndarray]
    a1s: list[np.ndarray]
    z2s: list[np.ndarray]
    keeps: list[Optional[np.ndarray]]
    probs: np.ndarray


def _forward_cached(
    w: _Weights,
    feats: np.ndarray,
    dropout_rate: float,
    rng: Optional[np.random.Generator],
) -> _ForwardCache:
    z0 = feats @ w.input_w.T + w.input_b
    h = np.maximum(0.0, z0)
    hs, z1s, a1s, z2s, keeps = [h], [], [], [], []
    for w1, b1, w2, b2 in w.blocks:
        z1 = h @ w1.T + b1
        a1 = np.maximum(0.0, z1)
        z2 = a1 @ w2.T + b2
        branch = np.maximum(0.0, z2)
        keep = None
        if dropout_rate > 0.0:
            keep = rng.random(branch.shape) >= dropout_rate
            branch = branch * keep / (1.0 - dropout_rate)
        h = h + branch
        hs.append(h)
        z1s.append(z1)
        a1s.append(a1)
        z2s.append(z2)
        keeps.append(keep)
    probs = _sigmoid(h @ w.head_w.T + w.head_b)
    return _ForwardCache(feats, z0, hs, z1s, a1s, z2s, keeps, probs)


def _loss_terms(
    probs: np.ndarray, labels: np.ndarray, lam: float
) -> tuple[float, float, float]:
    """(positive, negative, random_negative) means; first half of `probs`
    rows are observation locations, second half their random pairs."""
    n = labels.shape[0]
    s = probs.shape[1]
    pc = np.clip(probs, LOG_EPS, 1.0 - LOG_EPS)
    obs, rand = pc[:n], pc[n:]
    rows = np.arange(n)
    log_pos = -np.log(obs[rows, labels])
    log_neg = -np.log1p(-obs)
    neg_sum = log_neg.sum(axis=1) - log_neg[rows, labels]
    rand_sum = -np.log1p(-rand).sum(axis=1)
    scale = 1.0 / (n * s)
    return (
        float(lam * log_pos.sum() * scale),
        float(neg_sum.sum() * scale),
        float(rand_sum.sum() * scale),
    )


def _loss_and_grads(
    w: _Weights,
    obs_lon: np.ndarray,
    obs_lat: np.ndarray,
    labels: np.ndarray,
    rand_lon: np.ndarray,
    rand_lat: np.ndarray,
    lam: float,
    dropout_rate: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    want_grads: bool = True,
) -> tuple[LossBreakdown, Optional[ModelGradients]]:
    n = labels.shape[0]
    feats = np.concatenate(
        [encode_batch(obs_lon, obs_lat), encode_batch(rand_lon, rand_lat)]
    )
    cache = _forward_cached(w, feats, dropout_rate, rng)
    pos, neg, rand = _loss_terms(cache.probs, labels, lam)
    breakdown = LossBreakdown(pos + neg + rand, pos, neg, rand)
    if not want_grads:
        return breakdown, None

    p = cache.probs
    s = p.shape[1]
    inside = (p > LOG_EPS) & (p < 1.0 - LOG_EPS)
    # d total / d logits; clamped entries contribute zero slope
    dlogits = np.where(inside, p, 0.0)
    rows = np.arange(n)
    dlogits[rows, labels] = np.where(
        inside[rows, labels], -lam * (1.0 - p[rows, labels]), 0.0
    )
    dlogits /= n * s

    h_last = cache.hs[-1]
    d_head_w = dlogits.T @ h_last
    d_head_b = dlogits.sum(axis=0)
    dh = dlogits @ w.head_w

    block_grads: list[BlockGradients] = []
    for k in range(len(w.blocks) - 1, -1, -1):
        w1, _, w2, _ = w.blocks[k]
        h_in = cache.hs[k]
        dbranch = dh
        if cache.keeps[k] is not None:
            dbranch = dbranch * cache.keeps[k] / (1.0 - dropout_rate)
        dz2 = dbranch * (cache.z2s[k] > 0)
        dw2 = dz2.T @ cache.a1s[k]
        db2 = dz2.sum(axis=0)
        da1 = dz2 @ w2
        dz1 = da1 * (cache.z1s[k] > 0)
        dw1 = dz1.T @ h_in
        db1 = dz1.sum(axis=0)
        dh = dh + dz1 @ w1
        block_grads.append(BlockGradients(dw1, db1, dw2, db2))
    block_grads.reverse()

    dz0 = dh * (cache.z0 > 0)
    grads = ModelGradients(
        input_w=dz0.T @ cache.feats,
        input_b=dz0.sum(axis=0),
        blocks=block_grads,
        head_w=d_head_w,
        head_b=d_head_b,
    )
    return breakdown, grads


def _batch_arrays(
    batch: Sequence[Observation], random_locs: Sequence[GeoCoordinate], lam: float
) -> tuple[np.ndarray, ...]:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if len(batch) != len(random_locs):
        raise ValueError(
            f"batch size {len(batch)} != random location count {len(random_locs)}"
        )
    if lam <= 0:
        raise ValueError("lambda must be positive")
    labels = np.array([b.species_index for b in batch], dtype=np.int64)
    obs_lon = np.array([b.coord.lon_deg for b in batch], dtype=np.float64)
    obs_lat = np.array([b.coord.lat_deg for b in batch], dtype=np.float64)
    rand_lon = np.array([r.lon_deg for r in random_locs], dtype=np.float64)
    rand_lat = np.array([r.lat_deg for r in random_locs], dtype=np.float64)
    return labels, obs_lon, obs_lat, rand_lon, rand_lat


def an_full_loss(
    model: SinrModel,
    batch: Sequence[Observation],
    random_locs: Sequence[GeoCoordinate],
    lam: float,
    rng: Optional[np.random.Generator] = None,
) -> LossBreakdown:
    """Mean assume-negative loss over a batch with its random pairs.

    Dropout is applied only when a generator is supplied and the model's
    dropout_rate is positive; without one the pass is deterministic.
    """
    labels, obs_lon, obs_lat, rand_lon, rand_lat = _batch_arrays(
        batch, random_locs, lam
    )
    drop = model.config.dropout_rate if rng is not None else 0.0
    breakdown, _ = _loss_and_grads(
        _weights_of(model),
        obs_lon,
        obs_lat,
        labels,
        rand_lon,
        rand_lat,
        lam,
        dropout_rate=drop,
        rng=rng,
        want_grads=False,
    )
    return breakdown


def loss_gradients(
    model: SinrModel,
    batch: Sequence[Observation],
    random_locs: Sequence[GeoCoordinate],
    lam: float,
    rng: Optional[np.random.Generator] = None,
) -> ModelGradients:
    """Exact gradients of an_full_loss's total with respect to every weight."""
    labels, obs_lon, obs_lat, rand_lon, rand_lat = _batch_arrays(
        batch, random_locs, lam
    )
    drop = model.config.dropout_rate if rng is not None else 0.0
    _, grads = _loss_and_grads(
        _weights_of(model),
        obs_lon,
        obs_lat,
        labels,
        rand_lon,
        rand_lat,
        lam,
        dropout_rate=drop,
        rng=rng,
    )
    assert grads is not None
    return grads


class _Adam:
    """Adam with bias correction; updates float32 params from float64 grads."""

    def __init__(self, params: list[np.ndarray], lr: float):
        self.params = params
        self.lr = lr
        self.beta1 = 0.9
        self.beta2 = 0.999
        self.eps = 1e-8
        self.t = 0
        self.m = [np.zeros(p.shape, dtype=np.float64) for p in params]
        self.v = [np.zeros(p.shape, dtype=np.float64) for p in params]

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p[...] = (p.astype(np.float64) - update).astype(np.float32)


def train(
    obs: ObservationSet,
    model_config: ModelConfig,
    train_config: TrainConfig,
    checkpoint_sink: Optional[CheckpointSink] = None,
) -> tuple[SinrModel, list[LossBreakdown]]:
    """Full training run; returns the model and per-epoch mean losses.

    Observations are capped per species first, weights start from a
    Glorot draw, and every epoch reshuffles and pairs each batch with
    fresh uniform-sphere negatives.  With a sink and checkpoint_every=k,
    a copy of the model is emitted after epochs k, 2k, ...
    """
    if len(obs.records) == 0:
        raise ValueError("empty observation set")
    if obs.num_species != model_config.num_species:
        raise ValueError(
            f"observation set has {obs.num_species} species, "
            f"model config {model_config.num_species}"
        )
    capped = cap_observations(obs, train_config.obs_cap, train_config.seed)
    lam = (
        float(model_config.num_species)
        if train_config.pos_weight_lambda is None
        else train_config.pos_weight_lambda
    )
    drop = (
        model_config.dropout_rate
        if train_config.dropout_rate is None
        else train_config.dropout_rate
    )

    rng = np.random.default_rng(train_config.seed)
    model = init_model(model_config, rng)
    params = model.weight_arrays()
    adam = _Adam(params, train_config.learning_rate)

    labels_all = capped.species_array()
    lon_all, lat_all = capped.lonlat_arrays()
    n = len(capped.records)
    bs = train_config.batch_size

    history: list[LossBreakdown] = []
    for epoch in range(1, train_config.epochs + 1):
        perm = rng.permutation(n)
        step_losses: list[LossBreakdown] = []
        for start in range(0, n, bs):
            sel = perm[start : start + bs]
            rand_lon, rand_lat = _sample_random_lonlat(len(sel), rng)
            breakdown, grads = _loss_and_grads(
                _weights_of(model),
                lon_all[sel],
                lat_all[sel],
                labels_all[sel],
                rand_lon,
                rand_lat,
                lam,
                dropout_rate=drop,
                rng=rng if drop > 0.0 else None,
            )
            adam.step(grads.arrays())
            step_losses.append(breakdown)
        history.append(LossBreakdown.mean(step_losses))
        if (
            checkpoint_sink is not None
            and train_config.checkpoint_every > 0
            and epoch % train_config.checkpoint_every == 0
        ):
            checkpoint_sink(epoch, model.copy())
    return model, history
