#!/usr/bin/env python3
"""
Habitat Rasters and Resource Selection
======================================

This module handles the habitat side of the local Gibbs model:
- Loads covariate layers from ESRI ASCII grids listed in a YAML manifest
  (categorical layers are expanded to one-hot indicator layers at load time)
- Evaluates the resource selection function w(c) = exp(beta'c) at points
- Computes the utilisation distribution normalizer and per-category
  utilisation values

Covariates are piecewise constant on cells. Grids are stored with row 0 at
the southern edge, so the cell of a point is found by floor division of its
offset from the lower-left corner. Points outside the raster (or on NODATA
cells) have no covariates and w = 0 there.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple, Union

import numpy as np
import rasterio
import yaml
from rasterio.errors import RasterioError
from rasterio.transform import from_origin
from scipy.ndimage import gaussian_filter
from scipy.special import logsumexp

from errors import InputError, ModelError

logger = logging.getLogger(__name__)

MANIFEST_FORMAT_VERSION = 1
DEFAULT_NODATA = -9999.0
DEFAULT_CATEGORIES = ("G", "BG", "B", "W")

# Returned by covariates_at for points without covariates
OUTSIDE = None


@dataclass(frozen=True, eq=False)
class HabitatRaster:
    """Gridded covariate layers over the study region (a bounding rectangle)"""

    origin_x: float
    origin_y: float
    cell_size: float
    layers: np.ndarray
    layer_names: Tuple[str, ...]
    categorical_groups: Tuple[Tuple[int, ...], ...] = ()
    valid: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.cell_size > 0:
            raise InputError(f"cell_size must be positive, got {self.cell_size}")

        layers = np.array(self.layers, dtype=float)
        if layers.ndim != 3 or layers.shape[1] < 1 or layers.shape[2] < 1:
            raise InputError(f"layers must have shape (n_layers, n_rows, n_cols), got {layers.shape}")
        if len(self.layer_names) != layers.shape[0]:
            raise InputError(f"{len(self.layer_names)} layer names for {layers.shape[0]} layers")
        if len(set(self.layer_names)) != len(self.layer_names):
            raise InputError(f"duplicate layer names: {list(self.layer_names)}")

        valid = np.ones(layers.shape[1:], dtype=bool) if self.valid is None else np.array(self.valid, dtype=bool)
        if valid.shape != layers.shape[1:]:
            raise InputError("valid mask does not match layer dimensions")

        for group in self.categorical_groups:
            if any(i < 0 or i >= layers.shape[0] for i in group):
                raise InputError(f"categorical group {group} references unknown layers")
            total = layers[list(group)].sum(axis=0)
            if not np.allclose(total[valid], 1.0):
                names = [self.layer_names[i] for i in group]
                raise InputError(f"one-hot layers {names} do not sum to 1 in every cell")

        layers.setflags(write=False)
        valid.setflags(write=False)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "layer_names", tuple(self.layer_names))
        object.__setattr__(self, "categorical_groups", tuple(tuple(g) for g in self.categorical_groups))

    @property
    def n_layers(self) -> int:
        return self.layers.shape[0]

    @property
    def n_rows(self) -> int:
        return self.layers.shape[1]

    @property
    def n_cols(self) -> int:
        return self.layers.shape[2]

    @property
    def cell_area(self) -> float:
        return self.cell_size ** 2

    @property
    def extent(self) -> Tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of the bounding rectangle"""
        return (self.origin_x, self.origin_x + self.n_cols * self.cell_size,
                self.origin_y, self.origin_y + self.n_rows * self.cell_size)

    def is_one_hot(self) -> bool:
        """True when the whole layer stack is a single one-hot categorical covariate"""
        return (len(self.categorical_groups) == 1
                and sorted(self.categorical_groups[0]) == list(range(self.n_layers)))

    def layer_index(self, name: str) -> int:
        try:
            return self.layer_names.index(name)
        except ValueError:
            raise InputError(f"unknown layer or category '{name}' (raster has {list(self.layer_names)})")

    def cell_centers(self) -> np.ndarray:
        """Centres of all cells as an (n_rows, n_cols, 2) array"""
        xs = self.origin_x + (np.arange(self.n_cols) + 0.5) * self.cell_size
        ys = self.origin_y + (np.arange(self.n_rows) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True, eq=False)
class RsfParams:
    """Selection coefficients beta; reference entries are structurally zero"""

    beta: np.ndarray
    reference_indices: FrozenSet[int] = field(default_factory=frozenset)

    def __post_init__(self):
        beta = np.array(self.beta, dtype=float).ravel()
        refs = frozenset(int(i) for i in self.reference_indices)
        for i in refs:
            if i < 0 or i >= beta.size:
                raise InputError(f"reference index {i} out of range for {beta.size} coefficients")
            if beta[i] != 0.0:
                raise InputError(f"beta[{i}] is a reference coefficient and must be 0, got {beta[i]}")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "reference_indices", refs)

    @property
    def free_indices(self) -> List[int]:
        return [i for i in range(self.beta.size) if i not in self.reference_indices]

    @classmethod
    def from_free(cls, n_layers: int, free_values: Sequence[float],
                  reference_indices: FrozenSet[int]) -> "RsfParams":
        """Build parameters from the non-reference coefficients (in layer order)"""
        beta = np.zeros(n_layers)
        free = [i for i in range(n_layers) if i not in reference_indices]
        if len(free_values) != len(free):
            raise InputError(f"expected {len(free)} free coefficients, got {len(free_values)}")
        beta[free] = np.asarray(free_values, dtype=float)
        return cls(beta, frozenset(reference_indices))

    def check_against(self, raster: HabitatRaster):
        if self.beta.size != raster.n_layers:
            raise InputError(f"{self.beta.size} coefficients for a raster with {raster.n_layers} layers")


def cell_index(raster: HabitatRaster, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Locate the cells containing points

    Args:
        raster: Habitat raster
        points: Array of shape (..., 2)

    Returns:
        Tuple of (rows, cols, inside); rows/cols are 0 where inside is False
    """
    points = np.asarray(points, dtype=float)
    fx = (points[..., 0] - raster.origin_x) / raster.cell_size
    fy = (points[..., 1] - raster.origin_y) / raster.cell_size
    with np.errstate(invalid="ignore"):
        inside = (fx >= 0) & (fx <= raster.n_cols) & (fy >= 0) & (fy <= raster.n_rows)

    # Upper/right boundary belongs to the last cell
    cols = np.where(inside, np.minimum(np.floor(np.where(inside, fx, 0.0)), raster.n_cols - 1), 0).astype(np.intp)
    rows = np.where(inside, np.minimum(np.floor(np.where(inside, fy, 0.0)), raster.n_rows - 1), 0).astype(np.intp)
    inside = inside & raster.valid[rows, cols]
    return rows, cols, inside


def covariates_at(raster: HabitatRaster, p: Sequence[float]) -> Optional[np.ndarray]:
    """Covariate vector of the cell containing p, or OUTSIDE"""
    rows, cols, inside = cell_index(raster, np.asarray(p, dtype=float))
    if not bool(inside):
        return OUTSIDE
    return raster.layers[:, int(rows), int(cols)].copy()


def log_w_grid(raster: HabitatRaster, params: RsfParams) -> np.ndarray:
    """beta'c for every cell, -inf on NODATA cells"""
    params.check_against(raster)
    grid = np.tensordot(params.beta, raster.layers, axes=1)
    return np.where(raster.valid, grid, -np.inf)


class SelectionSurface:
    """log w evaluated once per cell, then looked up for arbitrary point arrays"""

    def __init__(self, raster: HabitatRaster, params: RsfParams):
        self.raster = raster
        self.params = params
        self.grid = log_w_grid(raster, params)

    def log_w(self, points: np.ndarray) -> np.ndarray:
        rows, cols, inside = cell_index(self.raster, points)
        return np.where(inside, self.grid[rows, cols], -np.inf)

    def log_normalizer(self) -> float:
        finite = self.grid[np.isfinite(self.grid)]
        if finite.size == 0:
            raise ModelError("every cell has w = 0; the utilisation distribution is undefined")
        return float(logsumexp(finite) + 2.0 * np.log(self.raster.cell_size))


def log_w(raster: HabitatRaster, params: RsfParams, p: Sequence[float]) -> float:
    """beta'c(p); -inf outside the raster"""
    c = covariates_at(raster, p)
    if c is OUTSIDE:
        return -np.inf
    params.check_against(raster)
    return float(np.dot(params.beta, c))


def ud_normalizer(raster: HabitatRaster, params: RsfParams) -> float:
    """Integral of w over the study region, exact for piecewise-constant covariates"""
    return float(np.exp(SelectionSurface(raster, params).log_normalizer()))


def utilisation_grid(raster: HabitatRaster, params: RsfParams) -> np.ndarray:
    """Utilisation density pi per cell (per km^2); zero on NODATA cells"""
    surface = SelectionSurface(raster, params)
    return np.exp(surface.grid - surface.log_normalizer())


def category_areas(raster: HabitatRaster) -> np.ndarray:
    """Area covered by each layer's category (only meaningful for one-hot layers)"""
    masked = np.where(raster.valid, raster.layers, 0.0)
    return masked.sum(axis=(1, 2)) * raster.cell_area


def habitat_utilisation(raster: HabitatRaster, params: RsfParams) -> np.ndarray:
    """
    Utilisation value of each habitat category, exp(beta_i) / integral of w

    Args:
        raster: Raster whose layers are a single one-hot categorical covariate
        params: Selection coefficients

    Returns:
        Array of per-category utilisation densities, in layer order
    """
    if not raster.is_one_hot():
        raise InputError("habitat utilisation values require one-hot categorical layers")
    log_z = SelectionSurface(raster, params).log_normalizer()
    return np.exp(params.beta - log_z)


# ---------------------------------------------------------------------------
# ESRI ASCII grids and manifests
# ---------------------------------------------------------------------------

def read_ascii_grid(path: Union[str, Path]) -> Tuple[Dict[str, float], np.ndarray]:
    """
    Read a single-band grid (ESRI ASCII or any other format GDAL opens)

    Returns:
        Tuple of (header, values) where values has the top row first, as in the file.
        The header carries nrows, ncols, xllcorner, yllcorner, cellsize and
        nodata_value (NaN when the file declares none).
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"raster file not found: {path}")
    try:
        with rasterio.open(path) as src:
            values = src.read(1).astype(float)
            transform = src.transform
            bottom = src.bounds.bottom
            nodata = src.nodata
    except RasterioError as e:
        raise InputError(f"{path}: cannot read grid ({e})")

    if transform.b != 0.0 or transform.d != 0.0 or not math.isclose(transform.a, -transform.e):
        raise InputError(f"{path}: cells must be square and north-up, got transform {tuple(transform)[:6]}")
    header = {
        "nrows": values.shape[0],
        "ncols": values.shape[1],
        "xllcorner": float(transform.c),
        "yllcorner": float(bottom),
        "cellsize": float(transform.a),
        "nodata_value": float(nodata) if nodata is not None else float("nan"),
    }
    return header, values


def write_ascii_grid(path: Union[str, Path], values: np.ndarray, origin_x: float, origin_y: float,
                     cell_size: float, nodata: float = DEFAULT_NODATA):
    """Write an ESRI ASCII grid; values are given with the top row first"""
    values = np.asarray(values, dtype=float)
    n_rows, n_cols = values.shape
    transform = from_origin(origin_x, origin_y + n_rows * cell_size, cell_size, cell_size)
    with rasterio.open(path, "w", driver="AAIGrid", height=n_rows, width=n_cols, count=1,
                       dtype="float64", transform=transform, nodata=nodata) as dst:
        dst.write(values, 1)


def load_raster(manifest_path: Union[str, Path]) -> HabitatRaster:
    """
    Load a habitat raster from a YAML manifest

    The manifest lists layer files relative to its own directory:

        format_version: 1
        layers:
          - file: vegetation.asc
            name: vegetation
            type: categorical
            categories: {1: G, 2: BG, 3: B, 4: W}
          - file: water.asc
            name: dist_water
            type: continuous
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise InputError(f"raster manifest not found: {manifest_path}")
    try:
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise InputError(f"invalid YAML in raster manifest {manifest_path}: {e}")

    if not isinstance(manifest, dict) or not manifest.get("layers"):
        raise InputError(f"raster manifest {manifest_path} has no 'layers' list")

    base_dir = manifest_path.parent
    geometry = None
    layers: List[np.ndarray] = []
    names: List[str] = []
    groups: List[Tuple[int, ...]] = []
    valid = None

    for entry in manifest["layers"]:
        if "file" not in entry:
            raise InputError(f"layer entry without 'file' in {manifest_path}: {entry}")
        header, values = read_ascii_grid(base_dir / entry["file"])
        geom = (int(header["nrows"]), int(header["ncols"]), header["xllcorner"], header["yllcorner"], header["cellsize"])
        if geometry is None:
            geometry = geom
        elif geom[:2] != geometry[:2] or not np.allclose(geom[2:], geometry[2:]):
            raise InputError(f"layer {entry['file']} does not share the grid geometry of the first layer")

        # Stored south-first
        values = np.flipud(values)
        nodata = values == header["nodata_value"]
        valid = ~nodata if valid is None else valid & ~nodata

        kind = str(entry.get("type", "continuous")).lower()
        if kind == "continuous":
            names.append(str(entry.get("name", Path(entry["file"]).stem)))
            layers.append(np.where(nodata, 0.0, values))
        elif kind == "categorical":
            categories = entry.get("categories")
            if not categories:
                raise InputError(f"categorical layer {entry['file']} declares no categories")
            codes = {float(code): str(label) for code, label in categories.items()}
            unknown = set(np.unique(values[~nodata]).tolist()) - set(codes)
            if unknown:
                raise InputError(f"layer {entry['file']} has codes {sorted(unknown)} missing from its category list")
            start = len(layers)
            for code, label in codes.items():
                names.append(label)
                layers.append((values == code).astype(float))
            groups.append(tuple(range(start, len(layers))))
        else:
            raise InputError(f"layer {entry['file']}: type must be 'continuous' or 'categorical', got '{kind}'")

    n_rows, n_cols, origin_x, origin_y, cell_size = geometry
    raster = HabitatRaster(origin_x=origin_x, origin_y=origin_y, cell_size=cell_size,
                           layers=np.stack(layers), layer_names=tuple(names),
                           categorical_groups=tuple(groups), valid=valid)
    logger.info(f"🗺️ Loaded raster {manifest_path.name}: {n_rows}x{n_cols} cells, "
                f"cell size {cell_size} km, layers {list(names)}")
    return raster


def write_categorical_raster(directory: Union[str, Path], codes: np.ndarray, categories: Sequence[str],
                             origin_x: float = 0.0, origin_y: float = 0.0, cell_size: float = 1.0,
                             name: str = "habitat") -> Path:
    """
    Write a categorical habitat map as an ASCII grid plus manifest

    Args:
        directory: Output directory (created if needed)
        codes: Integer category codes 1..len(categories), row 0 at the south edge
        categories: Category labels in code order
        name: Base name for the grid and manifest files

    Returns:
        Path to the written manifest
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    grid_file = f"{name}.asc"
    write_ascii_grid(directory / grid_file, np.flipud(codes), origin_x, origin_y, cell_size)
    manifest = {
        "format_version": MANIFEST_FORMAT_VERSION,
        "layers": [{
            "file": grid_file,
            "name": name,
            "type": "categorical",
            "categories": {i + 1: str(label) for i, label in enumerate(categories)},
        }],
    }
    manifest_path = directory / f"{name}.yaml"
    with open(manifest_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(manifest, f, sort_keys=False)
    return manifest_path


def raster_from_codes(codes: np.ndarray, categories: Sequence[str], origin_x: float = 0.0,
                      origin_y: float = 0.0, cell_size: float = 1.0) -> HabitatRaster:
    """One-hot raster from integer codes 1..len(categories) (row 0 at the south edge)"""
    codes = np.asarray(codes)
    layers = np.stack([(codes == i + 1).astype(float) for i in range(len(categories))])
    return HabitatRaster(origin_x=origin_x, origin_y=origin_y, cell_size=cell_size, layers=layers,
                         layer_names=tuple(categories), categorical_groups=(tuple(range(len(categories))),))


def make_patchy_codes(n_rows: int, n_cols: int, n_categories: int, smoothness: float = 4.0,
                      seed: Optional[int] = None) -> np.ndarray:
    """
    Spatially autocorrelated categorical map

    A Gaussian white-noise field is smoothed and cut at its quantiles, so every
    category covers roughly the same area in contiguous patches.
    """
    rng = np.random.default_rng(seed)
    field_ = gaussian_filter(rng.standard_normal((n_rows, n_cols)), sigma=smoothness, mode="wrap")
    cuts = np.quantile(field_, np.linspace(0, 1, n_categories + 1)[1:-1])
    return np.digitize(field_, cuts) + 1


def make_patchy_landscape(n_rows: int = 100, n_cols: int = 100, cell_size: float = 0.3,
                          categories: Sequence[str] = DEFAULT_CATEGORIES, smoothness: float = 4.0,
                          seed: Optional[int] = None) -> HabitatRaster:
    """Synthetic one-hot habitat map (defaults: 30 km x 30 km, four categories)"""
    codes = make_patchy_codes(n_rows, n_cols, len(categories), smoothness, seed)
    return raster_from_codes(codes, categories, cell_size=cell_size)
