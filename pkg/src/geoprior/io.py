"""File formats: model weights, float32 matrices, range fixtures,
observation CSVs, taxonomy JSON, and grayscale range-map export.

All binary formats are little-endian and round-trip bitwise.  Model
files store weights as float32 in a fixed order (input layer, then
each block's W1, b1, W2, b2, then the head); matrix files carry
row-major float32 payloads; range fixtures pack per-species presence
bitsets (LSB-first within each byte, one byte-aligned bitset per
species) behind a single-line JSON header.

Text formats are UTF-8.  Observation CSVs use the exact header
`species_id,lat,lon`; species ids are arbitrary strings assigned dense
indices in first-appearance order, with the mapping recorded in a
sidecar JSON so taxonomy files can reference rows by id.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from PIL import Image

from .fusion import UNMAPPED, TaxonomyMap
from .grids import ExpertRangeSet, GridSpec
from .model import GeoCoordinate, ModelConfig, ResidualBlockWeights, SinrModel
from .training import Observation, ObservationSet

__all__ = [
    "FileFormatError",
    "MODEL_VERSION",
    "checkpoint_filename",
    "DirectoryCheckpointSink",
    "save_model",
    "load_model",
    "save_matrix",
    "load_matrix",
    "save_ranges",
    "load_ranges",
    "save_observations",
    "load_observations",
    "species_sidecar_path",
    "save_species_sidecar",
    "load_species_ids",
    "load_species_sidecar",
    "save_taxonomy_json",
    "load_taxonomy_json",
    "compile_taxonomy",
    "save_eval_items",
    "load_eval_items",
    "export_range_map",
]

PathLike = Union[str, Path]

MODEL_MAGIC = b"SINR"
MODEL_VERSION = 1
MATRIX_MAGIC = b"F32M"


class FileFormatError(ValueError):
    """A file does not conform to its declared format."""


def checkpoint_filename(epoch: int) -> str:
    return f"model_epoch{epoch}.sinr"


class DirectoryCheckpointSink:
    """Checkpoint sink writing model_epoch{N}.sinr files into a directory."""

    def __init__(self, directory: PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self.saved: list[Path] = []

    def __call__(self, epoch: int, model: SinrModel) -> None:
        path = self.directory / checkpoint_filename(epoch)
        save_model(model, path)
        self.saved.append(path)


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save_model(model: SinrModel, path: PathLike) -> None:
    model.validate()
    cfg = model.config
    parts = [
        MODEL_MAGIC,
        struct.pack(
            "<HIII",
            MODEL_VERSION,
            cfg.hidden_dim,
            cfg.num_residual_blocks,
            cfg.num_species,
        ),
    ]
    parts.extend(_f32_bytes(a) for a in model.weight_arrays())
    Path(path).write_bytes(b"".join(parts))


def load_model(path: PathLike) -> SinrModel:
    """Inverse of save_model; the loaded config uses the default dropout_rate
    (dropout is a training-time knob, not part of the stored artifact)."""
    buf = Path(path).read_bytes()
    header = 4 + struct.calcsize("<HIII")
    if len(buf) < header:
        raise FileFormatError(f"{path}: truncated header ({len(buf)} bytes)")
    if buf[:4] != MODEL_MAGIC:
        raise FileFormatError(f"{path}: bad magic {buf[:4]!r}, expected {MODEL_MAGIC!r}")
    version, hidden, blocks, species = struct.unpack("<HIII", buf[4:header])
    if version != MODEL_VERSION:
        raise FileFormatError(
            f"{path}: unsupported model format version {version}, "
            f"expected {MODEL_VERSION}"
        )
    shapes: list[tuple[int, ...]] = [(hidden, 4), (hidden,)]
    for _ in range(blocks):
        shapes.extend([(hidden, hidden), (hidden,), (hidden, hidden), (hidden,)])
    shapes.extend([(species, hidden), (species,)])
    expected = header + 4 * sum(math.prod(s) for s in shapes)
    if len(buf) != expected:
        raise FileFormatError(
            f"{path}: payload length {len(buf) - header} does not match header "
            f"(hidden={hidden}, blocks={blocks}, species={species} "
            f"needs {expected - header} bytes)"
        )
    offset = header
    arrays: list[np.ndarray] = []
    for shape in shapes:
        n = math.prod(shape)
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=offset)
        arrays.append(arr.astype(np.float32).reshape(shape))
        offset += 4 * n
    try:
        cfg = ModelConfig(
            num_species=species, hidden_dim=hidden, num_residual_blocks=blocks
        )
    except ValueError as exc:
        raise FileFormatError(f"{path}: invalid header dimensions: {exc}") from exc
    block_weights = [
        ResidualBlockWeights(*arrays[2 + 4 * i : 6 + 4 * i]) for i in range(blocks)
    ]
    model = SinrModel(
        config=cfg,
        input_w=arrays[0],
        input_b=arrays[1],
        blocks=block_weights,
        head_w=arrays[-2],
        head_b=arrays[-1],
    )
    model.validate()
    return model


def save_matrix(matrix: np.ndarray, path: PathLike) -> None:
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise ValueError(f"matrix must be 2-d, got shape {m.shape}")
    header = MATRIX_MAGIC + struct.pack("<II", m.shape[0], m.shape[1])
    Path(path).write_bytes(header + _f32_bytes(m))


def load_matrix(path: PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < 12:
        raise FileFormatError(f"{path}: truncated header ({len(buf)} bytes)")
    if buf[:4] != MATRIX_MAGIC:
        raise FileFormatError(
            f"{path}: bad magic {buf[:4]!r}, expected {MATRIX_MAGIC!r}"
        )
    rows, cols = struct.unpack("<II", buf[4:12])
    if len(buf) != 12 + 4 * rows * cols:
        raise FileFormatError(
            f"{path}: payload is {len(buf) - 12} bytes, "
            f"{rows}x{cols} needs exactly {4 * rows * cols}"
        )
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=12)
    return data.astype(np.float32).reshape(rows, cols)


def _bitset_nbytes(num_cells: int) -> int:
    return (num_cells + 7) // 8


def _pack_bitset(bits: np.ndarray) -> bytes:
    return np.packbits(bits.astype(np.uint8), bitorder="little").tobytes()


def _unpack_bitset(buf: bytes, num_cells: int) -> np.ndarray:
    raw = np.frombuffer(buf, dtype=np.uint8)
    return np.unpackbits(raw, count=num_cells, bitorder="little").astype(bool)


def save_ranges(ranges: ExpertRangeSet, path: PathLike) -> None:
    grid = ranges.grid
    header = {
        "has_mask": grid.mask is not None,
        "n_cols": grid.n_cols,
        "n_rows": grid.n_rows,
        "species_ids": list(ranges.species_ids),
    }
    parts = [json.dumps(header, sort_keys=True).encode("utf-8"), b"\n"]
    if grid.mask is not None:
        parts.append(_pack_bitset(grid.mask))
    for row in ranges.presence:
        parts.append(_pack_bitset(row))
    Path(path).write_bytes(b"".join(parts))


def load_ranges(path: PathLike) -> ExpertRangeSet:
    buf = Path(path).read_bytes()
    nl = buf.find(b"\n")
    if nl < 0:
        raise FileFormatError(f"{path}: missing header line")
    try:
        header = json.loads(buf[:nl].decode("utf-8"))
        n_rows = int(header["n_rows"])
        n_cols = int(header["n_cols"])
        has_mask = bool(header["has_mask"])
        species_ids = [int(s) for s in header["species_ids"]]
    except (ValueError, KeyError, TypeError) as exc:
        raise FileFormatError(f"{path}: bad header: {exc}") from exc
    if n_rows < 1 or n_cols < 1:
        raise FileFormatError(f"{path}: degenerate grid {n_rows}x{n_cols}")
    num_cells = n_rows * n_cols
    nb = _bitset_nbytes(num_cells)
    body = buf[nl + 1 :]
    expected = nb * (len(species_ids) + (1 if has_mask else 0))
    if len(body) != expected:
        raise FileFormatError(
            f"{path}: bitset payload is {len(body)} bytes, expected {expected}"
        )
    offset = 0
    mask = None
    if has_mask:
        mask = _unpack_bitset(body[:nb], num_cells)
        offset = nb
    presence = np.zeros((len(species_ids), num_cells), dtype=bool)
    for i in range(len(species_ids)):
        presence[i] = _unpack_bitset(body[offset : offset + nb], num_cells)
        offset += nb
    grid = GridSpec(n_rows, n_cols, mask=mask)
    return ExpertRangeSet(grid, presence, species_ids)


# ---------------------------------------------------------------------------
# observation CSV + species sidecar
# ---------------------------------------------------------------------------

_CSV_HEADER = ["species_id", "lat", "lon"]


def species_sidecar_path(csv_path: PathLike) -> Path:
    return Path(f"{csv_path}.species.json")


def save_species_sidecar(csv_path: PathLike, species_ids: Sequence[str]) -> None:
    payload = {"species_ids": list(species_ids)}
    species_sidecar_path(csv_path).write_text(
        json.dumps(payload, sort_keys=True), encoding="utf-8"
    )


def load_species_ids(path: PathLike) -> list[str]:
    """Read a species-id list document ({"species_ids": [...]}) at path."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        ids = payload["species_ids"]
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise FileFormatError(f"{path}: bad species sidecar: {exc}") from exc
    if not isinstance(ids, list) or not all(isinstance(s, str) for s in ids):
        raise FileFormatError(f"{path}: species_ids must be a list of strings")
    return ids


def load_species_sidecar(csv_path: PathLike) -> list[str]:
    return load_species_ids(species_sidecar_path(csv_path))


def save_observations(
    obs: ObservationSet, species_ids: Sequence[str], path: PathLike
) -> None:
    """CSV (exact float repr, so reloads reproduce coordinates bitwise)
    plus the species sidecar."""
    if len(species_ids) != obs.num_species:
        raise ValueError(
            f"{len(species_ids)} species ids for {obs.num_species} species"
        )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_CSV_HEADER)
        for rec in obs.records:
            writer.writerow(
                [
                    species_ids[rec.species_index],
                    repr(rec.coord.lat_deg),
                    repr(rec.coord.lon_deg),
                ]
            )
    save_species_sidecar(path, species_ids)


def _parse_coord_field(value: str, what: str, row_num: int, path: PathLike) -> float:
    try:
        x = float(value)
    except ValueError:
        raise FileFormatError(
            f"{path}: row {row_num}: unparsable {what} {value!r}"
        ) from None
    if not math.isfinite(x):
        raise FileFormatError(f"{path}: row {row_num}: non-finite {what} {value!r}")
    return x


def load_observations(path: PathLike) -> tuple[ObservationSet, list[str]]:
    """Parse an observation CSV; returns the set and the dense id mapping
    (species id strings in first-appearance order).  Row numbers in
    errors count the header as row 1."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(f"{path}: empty file, expected header") from None
        if header != _CSV_HEADER:
            raise FileFormatError(
                f"{path}: bad header {header!r}, expected {_CSV_HEADER!r}"
            )
        index_of: dict[str, int] = {}
        ids: list[str] = []
        records: list[Observation] = []
        for row_num, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise FileFormatError(
                    f"{path}: row {row_num}: expected 3 fields, got {len(row)}"
                )
            sid, lat_s, lon_s = row
            if not sid:
                raise FileFormatError(f"{path}: row {row_num}: empty species_id")
            lat = _parse_coord_field(lat_s, "lat", row_num, path)
            lon = _parse_coord_field(lon_s, "lon", row_num, path)
            if not -90.0 <= lat <= 90.0:
                raise FileFormatError(
                    f"{path}: row {row_num}: lat {lat} outside [-90, 90]"
                )
            if not -180.0 <= lon <= 180.0:
                raise FileFormatError(
                    f"{path}: row {row_num}: lon {lon} outside [-180, 180]"
                )
            if sid not in index_of:
                index_of[sid] = len(ids)
                ids.append(sid)
            records.append(Observation(index_of[sid], GeoCoordinate(lon, lat)))
    if not records:
        raise FileFormatError(f"{path}: no data rows")
    return ObservationSet(records, num_species=len(ids)), ids


# ---------------------------------------------------------------------------
# taxonomy JSON
# ---------------------------------------------------------------------------


def save_taxonomy_json(
    mapping: dict[str, Optional[str]], path: PathLike
) -> None:
    """{vision_id: geo_id or null} document."""
    Path(path).write_text(
        json.dumps(mapping, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )


def load_taxonomy_json(path: PathLike) -> dict[str, Optional[str]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FileFormatError(f"{path}: taxonomy must be a JSON object")
    out: dict[str, Optional[str]] = {}
    for k, v in doc.items():
        if v is not None and not isinstance(v, str):
            raise FileFormatError(
                f"{path}: taxonomy value for {k!r} must be a string or null"
            )
        out[str(k)] = v
    return out


def compile_taxonomy(
    mapping: dict[str, Optional[str]],
    vision_ids: Sequence[str],
    geo_ids: Sequence[str],
) -> TaxonomyMap:
    """Resolve a string-id taxonomy against the two dense-index sidecars."""
    geo_index = {g: i for i, g in enumerate(geo_ids)}
    if len(geo_index) != len(geo_ids):
        raise ValueError("duplicate geo species ids")
    vision_to_geo = np.full(len(vision_ids), UNMAPPED, dtype=np.int64)
    for v, vid in enumerate(vision_ids):
        if vid not in mapping:
            raise ValueError(f"taxonomy is missing vision species {vid!r}")
        target = mapping[vid]
        if target is None:
            continue
        if target not in geo_index:
            raise ValueError(
                f"taxonomy maps {vid!r} to unknown geo species {target!r}"
            )
        vision_to_geo[v] = geo_index[target]
    return TaxonomyMap(vision_to_geo, num_geo_species=len(geo_ids))


# ---------------------------------------------------------------------------
# eval items CSV (true species, photo coordinate)
# ---------------------------------------------------------------------------

_ITEMS_HEADER = ["true_species_id", "lat", "lon"]


def save_eval_items(
    items: Sequence[tuple[GeoCoordinate, int]],
    vision_ids: Sequence[str],
    path: PathLike,
) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_ITEMS_HEADER)
        for coord, t in items:
            writer.writerow(
                [vision_ids[t], repr(coord.lat_deg), repr(coord.lon_deg)]
            )


def load_eval_items(
    path: PathLike, vision_ids: Sequence[str]
) -> list[tuple[GeoCoordinate, int]]:
    index_of = {v: i for i, v in enumerate(vision_ids)}
    items: list[tuple[GeoCoordinate, int]] = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FileFormatError(f"{path}: empty file, expected header") from None
        if header != _ITEMS_HEADER:
            raise FileFormatError(
                f"{path}: bad header {header!r}, expected {_ITEMS_HEADER!r}"
            )
        for row_num, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise FileFormatError(
                    f"{path}: row {row_num}: expected 3 fields, got {len(row)}"
                )
            sid, lat_s, lon_s = row
            if sid not in index_of:
                raise FileFormatError(
                    f"{path}: row {row_num}: unknown species id {sid!r}"
                )
            lat = _parse_coord_field(lat_s, "lat", row_num, path)
            lon = _parse_coord_field(lon_s, "lon", row_num, path)
            items.append((GeoCoordinate(lon, lat), index_of[sid]))
    if not items:
        raise FileFormatError(f"{path}: no data rows")
    return items


# ---------------------------------------------------------------------------
# range-map image export
# ---------------------------------------------------------------------------


def export_range_map(
    model: SinrModel, species_index: int, grid: GridSpec, path: PathLike
) -> None:
    """8-bit grayscale PNG of one species' probabilities on the grid.

    Row 0 is the northernmost row; each pixel is round(255 * p) at the
    cell center.  A JSON sidecar at <path>.json records the geometry.
    """
    if not 0 <= species_index < model.num_species:
        raise ValueError(
            f"species index {species_index} outside [0, {model.num_species})"
        )
    lons, lats = grid.cell_centers()
    probs = model.forward_grid(lons, lats)[:, species_index]
    pixels = np.rint(255.0 * probs).astype(np.uint8).reshape(grid.n_rows, grid.n_cols)
    Image.fromarray(pixels, mode="L").save(Path(path), format="PNG")
    sidecar = {
        "n_cols": grid.n_cols,
        "n_rows": grid.n_rows,
        "species_index": species_index,
        "cell_center_lat_of_row": "90 - (row + 0.5) * 180 / n_rows",
        "cell_center_lon_of_col": "-180 + (col + 0.5) * 360 / n_cols",
        "pixel_value": "round(255 * probability)",
    }
    Path(f"{path}.json").write_text(
        json.dumps(sidecar, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )
