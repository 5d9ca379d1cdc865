"""Seeded synthetic scenes with a known fine-resolution brightness temperature.

Smooth fields are low-order 2-D cosine mixtures.  The fine truth is a
zone-dependent affine function of the covariates; the coarse T_B is its exact
block mean.  Truth values are quantized to 1/256 K so that, for power-of-two
factors, both truth and its block means survive the float32 FGRID format
unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .raster import LC_CLASSES, FractionStack, Grid, block_aggregate, landcover_fractions
from .scene import DYNAMIC_COVARIATES, SOIL_TEXTURE, Scene

# CDL-style codes; 176 (grassland) is deliberately unmapped and lands in 'others'
LC_CODES = (1, 5, 24, 141, 190, 121, 111, 176)
LC_CLASS_MAP = {1: "corn", 5: "soybean", 24: "miscellaneous", 141: "forest",
                190: "wetland", 121: "developed", 111: "others"}

DEFAULT_CORRELATIONS = {"lst": 0.5, "ndvi": -0.25, "evi": -0.15, "ppt": -0.4, "sand": 0.2}
_TB_QUANTUM = 1.0 / 256.0


@dataclass(frozen=True)
class PrecipEvent:
    center: tuple[float, float] = (0.5, 0.35)   # fractional (row, col) position
    radius: float = 6.0                          # fine cells
    depression: float = 18.0                     # kelvin at the centre
    ppt_boost: float = 30.0                      # mm at the centre


@dataclass(frozen=True)
class SynthParams:
    coarse_rows: int = 9
    coarse_cols: int = 18
    factor: int = 4
    n_zones: int = 1
    tb_range: tuple[float, float] = (240.0, 300.0)
    covariate_correlations: dict = field(default_factory=lambda: dict(DEFAULT_CORRELATIONS))
    noise_sd: float = 0.5
    missing_fraction: float = 0.0
    precip_event: PrecipEvent | None = None
    seed: int = 42
    zone_offset: float = 12.0
    vegetation: str = "normal"
    constant_covariates: bool = False
    lc_factor: int = 4
    fine_cell_km: float = 9.0
    max_freq: float = 1.2
    name: str = "scene"

    def __post_init__(self):
        lo, hi = self.tb_range
        if not lo < hi:
            raise ValueError(f"tb_range must satisfy min < max, got {self.tb_range}")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be nonnegative")
        if not 0 <= self.missing_fraction < 1:
            raise ValueError("missing_fraction must lie in [0, 1)")
        if min(self.coarse_rows, self.coarse_cols, self.factor, self.n_zones, self.lc_factor) < 1:
            raise ValueError("grid sizes, factor and n_zones must be >= 1")
        if self.vegetation not in ("normal", "high"):
            raise ValueError(f"unknown vegetation level {self.vegetation!r}")
        bad = [k for k, v in self.covariate_correlations.items()
               if k not in (*DYNAMIC_COVARIATES, *SOIL_TEXTURE) or not -1 <= v <= 1]
        if bad:
            raise ValueError(f"invalid covariate correlations for {bad}")


def smooth_field(rng: np.random.Generator, shape: tuple[int, int], n_terms: int = 6,
                 max_freq: float = 1.2) -> np.ndarray:
    """Cosine mixture rescaled to span [-1, 1]; frequencies in cycles per grid."""
    rows, cols = shape
    y = (np.arange(rows)[:, None] + 0.5) / rows
    x = (np.arange(cols)[None, :] + 0.5) / cols
    f = np.zeros(shape)
    for _ in range(n_terms):
        u, v = rng.uniform(-max_freq, max_freq, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        f += amp * np.cos(2 * np.pi * (u * x * cols / max(rows, cols) + v * y * rows / max(rows, cols)) + phase)
    f -= 0.5 * (f.max() + f.min())
    span = np.abs(f).max()
    return f / span if span > 0 else f


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _grid(values, cell, name, mask=None) -> Grid:
    return Grid.from_array(values, cell, mask=mask, name=name)


def generate_scene(params: SynthParams) -> tuple[Scene, Grid]:
    """Build a scene and its fine-resolution truth from ``params``."""
    rng = np.random.default_rng(params.seed)
    R, C = params.coarse_rows * params.factor, params.coarse_cols * params.factor
    cell = params.fine_cell_km
    shape = (R, C)

    def field_(shape_=shape):
        if params.constant_covariates:
            return np.zeros(shape_)
        return smooth_field(rng, shape_, max_freq=params.max_freq)

    s = {k: field_() for k in ("lst", "ndvi", "ppt", "evi_own")}
    s["evi"] = 0.7 * s["ndvi"] + 0.3 * s.pop("evi_own")
    tex_logits = np.stack([field_() for _ in SOIL_TEXTURE]) * 1.5
    tex = np.exp(tex_logits) / np.exp(tex_logits).sum(axis=0)
    for k, t in zip(SOIL_TEXTURE, tex):
        s[k] = 2.0 * (t - t.mean()) / (np.ptp(t) or 1.0)

    if params.vegetation == "high":
        ndvi_mean, ndvi_amp, evi_mean, evi_amp = 0.84, 0.06, 0.66, 0.05
    else:
        ndvi_mean, ndvi_amp, evi_mean, evi_amp = 0.45, 0.2, 0.3, 0.15
    ppt = 5.0 * (1.0 + s["ppt"])

    # zones are defined per coarse cell so every fine cell shares its parent's zone
    if params.n_zones > 1 and not params.constant_covariates:
        zf = smooth_field(rng, (params.coarse_rows, params.coarse_cols), max_freq=0.6)
        edges = np.quantile(zf, np.linspace(0, 1, params.n_zones + 1)[1:-1])
        zones_c = np.searchsorted(edges, zf)
    else:
        zones_c = np.zeros((params.coarse_rows, params.coarse_cols), dtype=int)
    zones = np.repeat(np.repeat(zones_c, params.factor, axis=0), params.factor, axis=1)
    nz = params.n_zones
    offsets = np.linspace(-1.0, 1.0, nz) * params.zone_offset if nz > 1 else np.zeros(1)
    gains = 1.0 + 0.3 * np.linspace(-1.0, 1.0, nz) if nz > 1 else np.ones(1)

    lo, hi = params.tb_range
    mid, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
    rho = params.covariate_correlations
    total = sum(abs(v) for v in rho.values()) or 1.0
    latent = sum(v * s[k] for k, v in rho.items()) / total
    amp = 0.5 * half
    tb = mid + amp * gains[zones] * latent + offsets[zones]

    if params.precip_event is not None and not params.constant_covariates:
        ev = params.precip_event
        rr, cc = np.mgrid[0:R, 0:C]
        d2 = (rr + 0.5 - ev.center[0] * R) ** 2 + (cc + 0.5 - ev.center[1] * C) ** 2
        bump = np.exp(-d2 / (2.0 * ev.radius ** 2))
        tb = tb - ev.depression * bump
        ppt = ppt + ev.ppt_boost * bump
    if params.noise_sd > 0:
        tb = tb + rng.normal(0.0, params.noise_sd, size=shape)
    tb = np.clip(tb, lo, hi)
    tb = np.round(tb / _TB_QUANTUM) * _TB_QUANTUM

    truth = _grid(tb, cell, "truth")
    tb_coarse = block_aggregate(truth, params.factor, min_coverage=1.0)
    tb_coarse = Grid(tb_coarse.values, tb_coarse.mask, tb_coarse.cell_size, name="tb_coarse")

    lst_mask = np.ones(shape, dtype=bool)
    if params.missing_fraction > 0:
        clouds = smooth_field(rng, shape, max_freq=1.5) + 0.15 * rng.standard_normal(shape)
        lst_mask = clouds > np.quantile(clouds, params.missing_fraction)
    covs = {
        "lst": _grid(_f32(300.0 + 8.0 * s["lst"]), cell, "lst", lst_mask),
        "ndvi": _grid(_f32(ndvi_mean + ndvi_amp * s["ndvi"]), cell, "ndvi"),
        "evi": _grid(_f32(evi_mean + evi_amp * s["evi"]), cell, "evi"),
        "ppt": _grid(_f32(ppt), cell, "ppt"),
    }
    soil = {k: _grid(_f32(t), cell, k) for k, t in zip(SOIL_TEXTURE, tex)}

    lcf = params.lc_factor
    sub = (R * lcf, C * lcf)
    if params.constant_covariates:
        codes = np.full(sub, LC_CODES[0], dtype=float)
    else:
        scores = np.stack([smooth_field(rng, sub, max_freq=3.0) for _ in LC_CODES])
        scores[:2] += 0.6   # corn and soybean dominate
        scores += 0.25 * rng.standard_normal(scores.shape)
        codes = np.asarray(LC_CODES, dtype=float)[np.argmax(scores, axis=0)]
    cat = _grid(codes, cell / lcf, "landcover")
    lc = landcover_fractions(cat, LC_CLASS_MAP, lcf, LC_CLASSES)

    scene = Scene(tb_coarse=tb_coarse, covariates_fine=covs, landcover=lc, soil=soil,
                  factor=params.factor, name=params.name)
    return scene, truth


def scene_catalog() -> dict[str, SynthParams]:
    """The named verification scenarios."""
    return {
        "uniform": SynthParams(name="uniform", constant_covariates=True, noise_sd=0.0, seed=101),
        "two-zone": SynthParams(name="two-zone", n_zones=2, seed=102),
        "precip-event": SynthParams(name="precip-event", precip_event=PrecipEvent(), seed=103),
        "missing-lst": SynthParams(name="missing-lst", missing_fraction=0.45, seed=104),
        "high-vegetation": SynthParams(name="high-vegetation", vegetation="high", seed=105),
    }


def affine_params(seed: int = 106) -> SynthParams:
    """Noise-free single-zone scene whose truth is affine in LST alone."""
    return SynthParams(name="affine", covariate_correlations={"lst": 1.0}, noise_sd=0.0, seed=seed)


def scenario_params(name: str, seed: int | None = None) -> SynthParams:
    table = scene_catalog()
    table["affine"] = affine_params()
    if name not in table:
        raise KeyError(f"unknown scenario {name!r}; choose from {sorted(table)}")
    p = table[name]
    return p if seed is None else replace(p, seed=seed)


def noisy_reference(truth: Grid, noise_sd: float = 5.0, seed: int = 0) -> Grid:
    """Truth plus independent Gaussian noise, standing in for a noisy fine product."""
    rng = np.random.default_rng(seed)
    vals = truth.values + rng.normal(0.0, noise_sd, size=truth.shape)
    return truth.with_values(_f32(vals), truth.mask, name="reference")
