"""Multi-resolution rasters: block aggregation, land-cover fractions, feature tables.

Grids carry NaN for missing cells in memory and -9999.0 on disk. Origins are
the north-west corner of the grid; cell centres are derived with a flat
equirectangular convention (see :data:`KM_PER_DEG_LAT`).
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

KM_PER_DEG_LAT = 111.2
NODATA = -9999.0
FGRID_MAGIC = b"FGRD"
FGRID_VERSION = 1
_FGRID_HEADER = struct.Struct("<4sIIIdddf")

LC_CLASSES = ("corn", "soybean", "miscellaneous", "forest", "wetland", "developed", "others")


class RasterError(ValueError):
    """Raised for malformed grids, shape mismatches and bad file contents."""


@dataclass(frozen=True)
class Grid:
    """Single-band raster.

    ``values`` is float64 with NaN wherever ``mask`` is False.
    """

    values: np.ndarray
    mask: np.ndarray
    cell_size: float
    origin_lat: float = 43.57
    origin_lon: float = -96.68
    name: str = ""

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 2:
            raise RasterError(f"grid values must be 2-D, got shape {values.shape}")
        if mask.shape != values.shape:
            raise RasterError(f"mask shape {mask.shape} != values shape {values.shape}")
        if not self.cell_size > 0:
            raise RasterError(f"cell_size must be positive, got {self.cell_size}")
        mask &= np.isfinite(values)
        values[~mask] = np.nan
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    @classmethod
    def from_array(cls, values, cell_size: float, origin_lat: float = 43.57,
                   origin_lon: float = -96.68, mask=None, name: str = "") -> "Grid":
        values = np.asarray(values, dtype=np.float64)
        if mask is None:
            mask = np.isfinite(values)
        return cls(values, mask, cell_size, origin_lat, origin_lon, name)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    def with_values(self, values, mask=None, name: str | None = None) -> "Grid":
        values = np.asarray(values, dtype=np.float64)
        if mask is None:
            mask = np.isfinite(values)
        return replace(self, values=values, mask=mask, name=self.name if name is None else name)

    def same_geometry(self, other: "Grid") -> bool:
        return (self.shape == other.shape and self.cell_size == other.cell_size
                and self.origin_lat == other.origin_lat and self.origin_lon == other.origin_lon)


@dataclass(frozen=True)
class FractionStack:
    """Per-class land-cover fractions, one grid per entry of ``class_names``."""

    class_names: tuple[str, ...]
    fractions: tuple[Grid, ...]

    def __post_init__(self):
        if len(self.class_names) != len(self.fractions):
            raise RasterError("one fraction grid per class is required")
        shapes = {g.shape for g in self.fractions}
        if len(shapes) != 1:
            raise RasterError(f"fraction grids disagree in shape: {shapes}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.fractions[0].shape

    @property
    def cell_size(self) -> float:
        return self.fractions[0].cell_size

    @property
    def mask(self) -> np.ndarray:
        return np.logical_and.reduce([g.mask for g in self.fractions])

    def as_array(self) -> np.ndarray:
        """Fractions as a ``(rows, cols, n_classes)`` array."""
        return np.stack([g.values for g in self.fractions], axis=-1)

    def grids(self) -> list[Grid]:
        return [replace(g, name=f"lc_{c}") for c, g in zip(self.class_names, self.fractions)]


@dataclass
class FeatureTable:
    """Samples x features matrix assembled from co-registered grids.

    ``mean`` and ``scale`` hold the standardization that produced ``values``
    (scale 0 marks a constant column, which standardizes to zeros). ``raw``
    keeps the unstandardized values so imputation can work in physical units.
    """

    values: np.ndarray
    raw: np.ndarray
    feature_names: list[str]
    sample_index: np.ndarray
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    @property
    def standardization(self) -> list[tuple[float, float]] | None:
        if self.mean is None:
            return None
        return list(zip(self.mean.tolist(), self.scale.tolist()))


def _check_factor(factor) -> int:
    if int(factor) != factor or factor < 1:
        raise RasterError(f"factor must be a positive integer, got {factor!r}")
    return int(factor)


def _blocks(arr: np.ndarray, factor: int) -> np.ndarray:
    rows, cols = arr.shape[:2]
    return arr.reshape(rows // factor, factor, cols // factor, factor, *arr.shape[2:]).swapaxes(1, 2)


def block_aggregate(fine: Grid, factor: int, min_coverage: float = 0.5) -> Grid:
    """Mean of the valid fine cells in each ``factor`` x ``factor`` block.

    A coarse cell is valid when at least ``min_coverage`` of its block is valid.
    """
    factor = _check_factor(factor)
    if not 0.0 <= min_coverage <= 1.0:
        raise RasterError(f"min_coverage must lie in [0, 1], got {min_coverage}")
    if fine.rows % factor or fine.cols % factor:
        raise RasterError(f"grid shape {fine.shape} is not divisible by factor {factor}")
    vals = _blocks(np.where(fine.mask, fine.values, 0.0), factor)
    counts = _blocks(fine.mask, factor).sum(axis=(2, 3))
    sums = vals.sum(axis=(2, 3))
    coverage = counts / float(factor * factor)
    valid = (counts > 0) & (coverage >= min_coverage)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(valid, sums / np.maximum(counts, 1), np.nan)
    return Grid(means, valid, fine.cell_size * factor, fine.origin_lat, fine.origin_lon, fine.name)


def parent_index(fine_row: int, fine_col: int, factor: int) -> tuple[int, int]:
    return fine_row // factor, fine_col // factor


def upsample_nearest(coarse: Grid, factor: int) -> Grid:
    """Repeat each coarse cell over its ``factor`` x ``factor`` children."""
    factor = _check_factor(factor)
    vals = np.repeat(np.repeat(coarse.values, factor, axis=0), factor, axis=1)
    mask = np.repeat(np.repeat(coarse.mask, factor, axis=0), factor, axis=1)
    return Grid(vals, mask, coarse.cell_size / factor, coarse.origin_lat, coarse.origin_lon, coarse.name)


def landcover_fractions(categorical: Grid, class_map: Mapping[int, str], factor: int,
                        class_names: Sequence[str] = LC_CLASSES) -> FractionStack:
    """Fraction of each land-cover group inside every ``factor`` block.

    Codes missing from ``class_map`` (or mapped to an unknown group) count as
    the last group, ``'others'``.
    """
    factor = _check_factor(factor)
    if categorical.rows % factor or categorical.cols % factor:
        raise RasterError(f"grid shape {categorical.shape} is not divisible by factor {factor}")
    names = tuple(class_names)
    lookup = {name: i for i, name in enumerate(names)}
    other = len(names) - 1
    group = np.full(categorical.shape, -1, dtype=np.int64)
    codes = np.where(categorical.mask, categorical.values, 0).astype(np.int64)
    for code in np.unique(codes[categorical.mask]):
        idx = lookup.get(class_map.get(int(code), names[other]), other)
        group[categorical.mask & (codes == code)] = idx

    counts = _blocks(categorical.mask, factor).sum(axis=(2, 3))
    valid = counts > 0
    grids = []
    for k, name in enumerate(names):
        hits = _blocks(group == k, factor).sum(axis=(2, 3))
        with np.errstate(invalid="ignore", divide="ignore"):
            frac = np.where(valid, hits / np.maximum(counts, 1), np.nan)
        grids.append(Grid(frac, valid, categorical.cell_size * factor,
                          categorical.origin_lat, categorical.origin_lon, f"lc_{name}"))
    return FractionStack(names, tuple(grids))


def km_per_deg_lon(grid: Grid) -> float:
    mid_lat = grid.origin_lat - 0.5 * grid.rows * grid.cell_size / KM_PER_DEG_LAT
    return KM_PER_DEG_LAT * np.cos(np.deg2rad(mid_lat))


def cell_coordinates(grid: Grid, row: int, col: int) -> tuple[float, float]:
    """Latitude/longitude of a cell centre."""
    if not (0 <= row < grid.rows and 0 <= col < grid.cols):
        raise IndexError(f"cell ({row}, {col}) outside grid of shape {grid.shape}")
    lat = grid.origin_lat - (row + 0.5) * grid.cell_size / KM_PER_DEG_LAT
    lon = grid.origin_lon + (col + 0.5) * grid.cell_size / km_per_deg_lon(grid)
    return float(lat), float(lon)


def coordinate_grids(grid: Grid) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`cell_coordinates` over the whole grid."""
    rows = np.arange(grid.rows)[:, None] + 0.5
    cols = np.arange(grid.cols)[None, :] + 0.5
    lat = grid.origin_lat - rows * grid.cell_size / KM_PER_DEG_LAT
    lon = grid.origin_lon + cols * grid.cell_size / km_per_deg_lon(grid)
    return np.broadcast_to(lat, grid.shape).copy(), np.broadcast_to(lon, grid.shape).copy()


def _flatten_inputs(grids) -> list[Grid]:
    out = []
    for g in grids:
        if isinstance(g, FractionStack):
            out.extend(g.grids())
        else:
            out.append(g)
    return out


def fit_standardization(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Column means and population standard deviations, ignoring NaN."""
    if raw.shape[0] == 0:
        raise RasterError("cannot standardize an empty table")
    with np.errstate(invalid="ignore"):
        mean = np.nanmean(raw, axis=0) if raw.size else np.zeros(raw.shape[1])
        scale = np.nanstd(raw, axis=0) if raw.size else np.zeros(raw.shape[1])
    mean = np.nan_to_num(mean)
    scale = np.nan_to_num(scale)
    # near-constant columns are treated as constant to avoid amplifying rounding noise
    scale[scale <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 0.0
    return mean, scale


def apply_standardization(raw: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    safe = np.where(scale > 0, scale, 1.0)
    out = (raw - mean) / safe
    out[:, scale == 0] = np.where(np.isnan(raw[:, scale == 0]), np.nan, 0.0)
    return out


def stack_features(grids, standardize: bool = True, params: tuple | None = None,
                   names: Sequence[str] | None = None, drop_incomplete: bool = True) -> FeatureTable:
    """Stack co-registered layers into a :class:`FeatureTable`.

    Rows are cells where every layer is valid (or every cell when
    ``drop_incomplete`` is False, leaving NaN in place). Pass ``params`` as
    ``(mean, scale)`` to reuse an earlier standardization instead of fitting one.
    """
    layers = _flatten_inputs(grids)
    if not layers:
        raise RasterError("no input grids")
    shape, cell = layers[0].shape, layers[0].cell_size
    for g in layers[1:]:
        if g.shape != shape or g.cell_size != cell:
            raise RasterError(f"layer {g.name!r} has shape {g.shape} / cell {g.cell_size}, "
                              f"expected {shape} / {cell}")
    if names is None:
        names = [g.name or f"f{i}" for i, g in enumerate(layers)]
    elif len(names) != len(layers):
        raise RasterError("one name per layer is required")

    valid = np.logical_and.reduce([g.mask for g in layers])
    keep = valid if drop_incomplete else np.ones(shape, dtype=bool)
    rr, cc = np.nonzero(keep)
    raw = np.column_stack([g.values[rr, cc] for g in layers]) if rr.size else np.empty((0, len(layers)))

    mean = scale = None
    values = raw.copy()
    if params is not None:
        mean, scale = (np.asarray(p, dtype=np.float64) for p in params)
        if mean.shape != (len(layers),):
            raise RasterError("standardization parameters do not match the feature count")
        values = apply_standardization(raw, mean, scale)
    elif standardize:
        mean, scale = fit_standardization(raw)
        values = apply_standardization(raw, mean, scale)
    return FeatureTable(values, raw, list(names), np.column_stack([rr, cc]).astype(np.int64),
                        mean, scale)


def write_fgrid(grid: Grid, path) -> None:
    vals = np.where(grid.mask, grid.values, NODATA).astype("<f4")
    header = _FGRID_HEADER.pack(FGRID_MAGIC, FGRID_VERSION, grid.rows, grid.cols,
                                grid.cell_size, grid.origin_lat, grid.origin_lon, NODATA)
    Path(path).write_bytes(header + vals.tobytes(order="C"))


def read_fgrid(path, name: str = "") -> Grid:
    data = Path(path).read_bytes()
    if len(data) < _FGRID_HEADER.size:
        raise RasterError(f"{path}: truncated FGRID header")
    magic, version, rows, cols, cell, lat, lon, nodata = _FGRID_HEADER.unpack_from(data)
    if magic != FGRID_MAGIC:
        raise RasterError(f"{path}: bad magic {magic!r}")
    if version != FGRID_VERSION:
        raise RasterError(f"{path}: unsupported FGRID version {version}")
    expected = _FGRID_HEADER.size + 4 * rows * cols
    if len(data) != expected:
        raise RasterError(f"{path}: expected {expected} bytes, found {len(data)}")
    vals = np.frombuffer(data, dtype="<f4", offset=_FGRID_HEADER.size).reshape(rows, cols)
    vals = vals.astype(np.float64)
    mask = vals != nodata
    return Grid(vals, mask, cell, lat, lon, name or Path(path).stem)


def write_grid_csv(grid: Grid, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row", "col", "value"])
        for r in range(grid.rows):
            for c in range(grid.cols):
                v = grid.values[r, c] if grid.mask[r, c] else NODATA
                w.writerow([r, c, repr(float(v))])


def read_grid_csv(path, cell_size: float, origin_lat: float = 43.57, origin_lon: float = -96.68,
                  shape: tuple[int, int] | None = None) -> Grid:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["row", "col", "value"]:
            raise RasterError(f"{path}: expected header row,col,value, got {header}")
        entries = [(int(r), int(c), float(v)) for r, c, v in reader]
    if shape is None:
        shape = (max(e[0] for e in entries) + 1, max(e[1] for e in entries) + 1) if entries else (0, 0)
    vals = np.full(shape, np.nan)
    for r, c, v in entries:
        vals[r, c] = np.nan if v == NODATA else v
    return Grid.from_array(vals, cell_size, origin_lat, origin_lon, name=Path(path).stem)
