"""Coordinate encoding and the species-distribution network.

The model is a small residual MLP over a 4-dimensional sinusoidal
encoding of (longitude, latitude).  Its output is one independent
presence probability per species (per-species sigmoid, not softmax),
so a single forward pass yields the full P(species | location) vector
used both for range mapping and as a multiplicative prior over a
vision classifier.

Weights are stored as float32 (the serialized format is float32);
all forward arithmetic is carried out in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

__all__ = [
    "GeoCoordinate",
    "EncodedLocation",
    "ModelConfig",
    "ResidualBlockWeights",
    "SinrModel",
    "encode_location",
    "init_model",
]

# Open-interval guard for sigmoid outputs: finite logits can still
# saturate to exactly 0.0 or 1.0 in float64, which would break the
# strict (0, 1) output contract.  The clip only ever alters exact
# 0s and 1s (the smallest positive sigmoid value is far above the
# float64 minimum normal).
_PROB_LO = np.finfo(np.float64).tiny
_PROB_HI = float(np.nextafter(1.0, 0.0))


class GeoCoordinate(NamedTuple):
    """A point on the globe in degrees: lon in [-180, 180], lat in [-90, 90]."""

    lon_deg: float
    lat_deg: float


#: 4-vector [sin(pi*x), cos(pi*x), sin(pi*y), cos(pi*y)] with
#: x = lon/180, y = lat/90.  Kept as a plain ndarray.
EncodedLocation = np.ndarray


def _validate_coordinate(coord: GeoCoordinate) -> None:
    lon, lat = float(coord[0]), float(coord[1])
    if not (math.isfinite(lon) and math.isfinite(lat)):
        raise ValueError(f"non-finite coordinate ({lon}, {lat})")
    if not -180.0 <= lon <= 180.0:
        raise ValueError(f"longitude {lon} outside [-180, 180]")
    if not -90.0 <= lat <= 90.0:
        raise ValueError(f"latitude {lat} outside [-90, 90]")


def encode_location(coord: GeoCoordinate) -> EncodedLocation:
    """Wrap a lon/lat pair onto the unit circle in each axis.

    The sinusoidal pair per axis removes the discontinuity at the
    +/-180 longitude seam: encode(180, lat) and encode(-180, lat)
    agree to floating-point roundoff.

    Raises:
        ValueError: coordinate out of range or non-finite.
    """
    _validate_coordinate(coord)
    x = float(coord[0]) / 180.0
    y = float(coord[1]) / 90.0
    return np.array(
        [
            math.sin(math.pi * x),
            math.cos(math.pi * x),
            math.sin(math.pi * y),
            math.cos(math.pi * y),
        ],
        dtype=np.float64,
    )


def encode_batch(lon_deg: np.ndarray, lat_deg: np.ndarray) -> np.ndarray:
    """Vectorized encoding, shape (n, 4).  Inputs must already be valid."""
    x = np.asarray(lon_deg, dtype=np.float64) / 180.0
    y = np.asarray(lat_deg, dtype=np.float64) / 90.0
    return np.stack(
        [np.sin(np.pi * x), np.cos(np.pi * x), np.sin(np.pi * y), np.cos(np.pi * y)],
        axis=-1,
    )


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs.

    dropout_rate only affects training-mode forward passes; inference
    is always deterministic and dropout-free.
    """

    num_species: int
    hidden_dim: int = 256
    num_residual_blocks: int = 4
    dropout_rate: float = 0.5

    def __post_init__(self) -> None:
        if self.num_species < 1:
            raise ValueError("num_species must be >= 1")
        if self.hidden_dim < 1:
            raise ValueError("hidden_dim must be >= 1")
        if self.num_residual_blocks < 1:
            raise ValueError("num_residual_blocks must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")


@dataclass
class ResidualBlockWeights:
    """One residual block: h <- h + drop(relu(w2 @ relu(w1 @ h + b1) + b2))."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return np.clip(out, _PROB_LO, _PROB_HI)


@dataclass
class SinrModel:
    """The coordinate -> per-species presence-probability network.

    Layout: input linear (hidden x 4), `num_residual_blocks` residual
    blocks of two hidden x hidden linears with ReLU, then a per-species
    sigmoid head (num_species x hidden).  All arrays are float32.
    """

    config: ModelConfig
    input_w: np.ndarray
    input_b: np.ndarray
    blocks: list[ResidualBlockWeights]
    head_w: np.ndarray
    head_b: np.ndarray

    @property
    def num_species(self) -> int:
        return self.config.num_species

    def validate(self) -> None:
        """Check shape consistency and finiteness; raises ValueError."""
        h, s = self.config.hidden_dim, self.config.num_species
        if self.input_w.shape != (h, 4) or self.input_b.shape != (h,):
            raise ValueError("input layer shape inconsistent with config")
        if len(self.blocks) != self.config.num_residual_blocks:
            raise ValueError("block count inconsistent with config")
        for blk in self.blocks:
            if (
                blk.w1.shape != (h, h)
                or blk.b1.shape != (h,)
                or blk.w2.shape != (h, h)
                or blk.b2.shape != (h,)
            ):
                raise ValueError("residual block shape inconsistent with config")
        if self.head_w.shape != (s, h) or self.head_b.shape != (s,):
            raise ValueError("head shape inconsistent with config")
        for arr in self.weight_arrays():
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite weight")

    def weight_arrays(self) -> list[np.ndarray]:
        """Weights in the fixed serialization order (input, blocks, head)."""
        out = [self.input_w, self.input_b]
        for blk in self.blocks:
            out.extend([blk.w1, blk.b1, blk.w2, blk.b2])
        out.extend([self.head_w, self.head_b])
        return out

    def copy(self) -> "SinrModel":
        return SinrModel(
            config=self.config,
            input_w=self.input_w.copy(),
            input_b=self.input_b.copy(),
            blocks=[
                ResidualBlockWeights(b.w1.copy(), b.b1.copy(), b.w2.copy(), b.b2.copy())
                for b in self.blocks
            ],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
        )

    def __eq__(self, other: object) -> bool:
        """Bitwise weight and architecture equality.

        dropout_rate is a training-time knob, not part of the stored
        artifact, so it does not participate in model identity.
        """
        if not isinstance(other, SinrModel):
            return NotImplemented
        if (
            self.config.hidden_dim != other.config.hidden_dim
            or self.config.num_residual_blocks != other.config.num_residual_blocks
            or self.config.num_species != other.config.num_species
        ):
            return False
        return all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(self.weight_arrays(), other.weight_arrays())
        )

    def forward(
        self,
        encoded: EncodedLocation,
        training: bool = False,
        rng: Optional[np.random.Generator] = None,
    ) -> np.ndarray:
        """Presence probabilities at one encoded location, shape (num_species,).

        Inference mode (the default) is pure and deterministic.  In
        training mode with dropout_rate > 0 a generator must be supplied;
        inverted dropout is applied to each block's branch output.
        """
        feats = np.asarray(encoded, dtype=np.float64)
        if feats.shape != (4,):
            raise ValueError(f"expected a 4-vector encoding, got shape {feats.shape}")
        drop = self.config.dropout_rate if training else 0.0
        if drop > 0.0 and rng is None:
            raise ValueError("training-mode forward with dropout requires an rng")

        h = np.maximum(0.0, self.input_w @ feats + self.input_b)
        for blk in self.blocks:
            inner = np.maximum(0.0, blk.w1 @ h + blk.b1)
            branch = np.maximum(0.0, blk.w2 @ inner + blk.b2)
            if drop > 0.0:
                keep = rng.random(branch.shape) >= drop
                branch = branch * keep / (1.0 - drop)
            h = h + branch
        return _sigmoid(self.head_w @ h + self.head_b)

    def forward_batch(self, coords: list[GeoCoordinate]) -> np.ndarray:
        """Inference over a list of coordinates, shape (n, num_species).

        Row i is exactly forward(encode_location(coords[i])): the batch
        path reuses the single-location kernel so rows are bit-identical
        to individual calls (BLAS gemm and gemv round differently, so a
        matrix-matrix formulation would not be).
        """
        if len(coords) == 0:
            return np.empty((0, self.config.num_species), dtype=np.float64)
        return np.stack([self.forward(encode_location(c)) for c in coords])

    def forward_grid(self, lon_deg: np.ndarray, lat_deg: np.ndarray) -> np.ndarray:
        """Vectorized inference over coordinate arrays, shape (n, num_species).

        Matrix-matrix formulation for raster-scale scoring.  Agrees with
        forward() to float64 rounding but not bitwise (BLAS gemm and gemv
        round differently); use forward_batch when rows must be
        bit-identical to single-location calls.
        """
        feats = encode_batch(
            np.asarray(lon_deg, dtype=np.float64),
            np.asarray(lat_deg, dtype=np.float64),
        )
        h = np.maximum(0.0, feats @ self.input_w.T + self.input_b)
        for blk in self.blocks:
            inner = np.maximum(0.0, h @ blk.w1.T + blk.b1)
            branch = np.maximum(0.0, inner @ blk.w2.T + blk.b2)
            h = h + branch
        return _sigmoid(h @ self.head_w.T + self.head_b)


def init_model(
    config: ModelConfig, rng: np.random.Generator
) -> SinrModel:
    """Glorot-uniform weight matrices (bound sqrt(6/(fan_in+fan_out))), zero biases."""

    def glorot(fan_out: int, fan_in: int) -> np.ndarray:
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, size=(fan_out, fan_in)).astype(np.float32)

    h = config.hidden_dim
    model = SinrModel(
        config=config,
        input_w=glorot(h, 4),
        input_b=np.zeros(h, dtype=np.float32),
        blocks=[
            ResidualBlockWeights(
                w1=glorot(h, h),
                b1=np.zeros(h, dtype=np.float32),
                w2=glorot(h, h),
                b2=np.zeros(h, dtype=np.float32),
            )
            for _ in range(config.num_residual_blocks)
        ],
        head_w=glorot(config.num_species, h),
        head_b=np.zeros(config.num_species, dtype=np.float32),
    )
    model.validate()
    return model
