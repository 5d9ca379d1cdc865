"""End-to-end multiscale disaggregation.

1. segment the coarse pixels on standardized [T_B, lat, lon];
2. per segment, fit an epsilon-SVR from coarse covariates (and, by default,
   the coarse T_B itself) to coarse T_B, tuning (C, epsilon, sigma) by
   cross-validation;
3. apply each segment's model to the fine covariates of its child pixels,
   reusing the coarse standardization; the parent T_B is fed verbatim;
4. optionally shift each block so its fine mean equals the coarse value.
"""

from __future__ import annotations

import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .raster import (FeatureTable, Grid, RasterError, apply_standardization, block_aggregate,
                     stack_features, upsample_nearest, write_fgrid)
from .scene import Scene
from .segmentation import (MembershipMatrix, SegmentationConfig, build_cluster_features, hard_assign,
                           memberships_to_csv, optimize_memberships, select_num_clusters)
from .svr import (SvrModel, SvrTrainConfig, cross_validate, default_grid, model_to_text, svr_predict,
                  svr_train)

logger = logging.getLogger(__name__)

IMPUTE_POLICIES = ("drop-row", "segment-mean")


class ConfigError(ValueError):
    pass


class ImputationError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    k: int | str = "auto"
    k_min: int = 1
    k_max: int = 6
    seg_sigma: float | None = None
    max_iters: int = 2000
    step_size: float = 0.5
    batch_size: int = 64
    seg_tol: float = 1e-5
    svr_C: tuple[float, ...] = (1.0, 10.0, 100.0)
    svr_epsilon: tuple[float, ...] = (0.5, 1.0, 2.0)
    svr_sigma_scale: tuple[float, ...] = (0.5, 1.0, 2.0)
    cv_folds: int = 5
    svr_tol: float = 1e-6
    max_passes: int = 10_000
    min_cluster_size: int = 5
    impute_policy: str = "segment-mean"
    include_coarse_tb: bool = True
    preserve_block_means: bool = True
    min_coverage: float = 0.5
    seed: int = 42

    def __post_init__(self):
        if self.impute_policy not in IMPUTE_POLICIES:
            raise ConfigError(f"impute_policy must be one of {IMPUTE_POLICIES}")
        if self.k != "auto" and (not isinstance(self.k, int) or self.k < 1):
            raise ConfigError(f"k must be 'auto' or a positive integer, got {self.k!r}")
        if self.cv_folds < 2:
            raise ConfigError("cv_folds must be >= 2")
        if not (self.svr_C and self.svr_epsilon and self.svr_sigma_scale):
            raise ConfigError("SVR grid lists must be nonempty")

    def segmentation(self) -> SegmentationConfig:
        return SegmentationConfig(K=self.k, sigma=self.seg_sigma, max_iters=self.max_iters,
                                  step_size=self.step_size, batch_size=self.batch_size,
                                  tol=self.seg_tol, seed=self.seed, k_min=self.k_min, k_max=self.k_max)


def _parse_value(name: str, raw: str, default):
    raw = raw.strip()
    if name == "k":
        return "auto" if raw.lower() == "auto" else int(raw)
    if name == "seg_sigma":
        return None if raw.lower() in ("none", "auto", "") else float(raw)
    if isinstance(default, bool):
        if raw.lower() in ("true", "yes", "1"):
            return True
        if raw.lower() in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(float(v) for v in raw.split(",") if v.strip())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> PipelineConfig:
    """Parse ``key = value`` lines (``#`` starts a comment); unknown keys are errors."""
    defaults = PipelineConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(PipelineConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in known:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(key, raw, known[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return PipelineConfig(**values)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def format_config(cfg: PipelineConfig) -> str:
    lines = []
    for f in fields(PipelineConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = str(v).lower()
        elif v is None:
            v = "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


@dataclass
class DisaggregationResult:
    tb_fine: Grid
    labels_coarse: Grid
    labels_fine: Grid
    tb_coarse: Grid
    diagnostics: list[dict]
    config_echo: dict
    memberships: MembershipMatrix | None = None
    models: dict[int, SvrModel] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)


def aggregate_covariates(scene: Scene, min_coverage: float = 0.5) -> FeatureTable:
    """Coarse table of [T_B, 4 dynamic covariates, 7 LC fractions, 3 texture fractions].

    Rows with any invalid feature are dropped; the fitted standardization is
    kept on the table for reuse at fine scale.
    """
    coarse = [block_aggregate(g, scene.factor, min_coverage) for g in scene.fine_layers()]
    names = ["tb_coarse"] + [g.name for g in scene.fine_layers()]
    return stack_features([scene.tb_coarse] + coarse, standardize=True, names=names)


def impute_missing(table: FeatureTable, policy: str, labels=None, ref_table: FeatureTable | None = None,
                   ref_labels=None) -> FeatureTable:
    """Handle NaN entries of ``table``.

    ``drop-row`` removes incomplete rows.  ``segment-mean`` fills each missing
    raw value with the mean of that feature over the reference rows of the same
    segment (``ref_table``/``ref_labels``, defaulting to ``table`` itself),
    falling back to the global reference mean; a feature never observed
    anywhere is an error.
    """
    if policy not in IMPUTE_POLICIES:
        raise ImputationError(f"unknown imputation policy {policy!r}")
    raw = table.raw
    missing = np.isnan(raw)
    if policy == "drop-row":
        keep = ~missing.any(axis=1)
        return FeatureTable(table.values[keep], raw[keep], list(table.feature_names),
                            table.sample_index[keep], table.mean, table.scale,
                            {**table.flags, "dropped_rows": int((~keep).sum())})
    if not missing.any():
        return table

    if labels is None:
        labels = np.zeros(raw.shape[0], dtype=int)
    labels = np.asarray(labels)
    if ref_table is None:
        ref_raw, ref_labels = raw, labels
    else:
        ref_raw = ref_table.raw
        ref_labels = np.asarray(ref_labels if ref_labels is not None else np.zeros(ref_raw.shape[0], dtype=int))
    filled = raw.copy()
    imputed = {}
    for j in np.flatnonzero(missing.any(axis=0)):
        col_ref = ref_raw[:, j]
        observed = ~np.isnan(col_ref)
        if not observed.any():
            raise ImputationError(f"feature {table.feature_names[j]!r} is never observed; cannot impute")
        global_mean = col_ref[observed].mean()
        for lab in np.unique(labels[missing[:, j]]):
            seg_obs = observed & (ref_labels == lab)
            fill = col_ref[seg_obs].mean() if seg_obs.any() else global_mean
            filled[missing[:, j] & (labels == lab), j] = fill
        imputed[table.feature_names[j]] = int(missing[:, j].sum())
    values = filled if table.mean is None else apply_standardization(filled, table.mean, table.scale)
    return FeatureTable(values, filled, list(table.feature_names), table.sample_index.copy(),
                        table.mean, table.scale, {**table.flags, "imputed": imputed})


def block_mean_correction(fine: np.ndarray, coarse: Grid, factor: int) -> np.ndarray:
    """Shift every block of ``fine`` so its valid-cell mean equals the coarse value."""
    R, C = coarse.shape
    blocks = fine.reshape(R, factor, C, factor)
    valid = ~np.isnan(blocks)
    counts = valid.sum(axis=(1, 3))
    with np.errstate(invalid="ignore", divide="ignore"):
        means = np.where(counts > 0, np.nansum(blocks, axis=(1, 3)) / np.maximum(counts, 1), np.nan)
    shift = np.where(coarse.mask & (counts > 0), coarse.values - means, 0.0)
    return (blocks + shift[:, None, :, None]).reshape(fine.shape)


def _n_workers() -> int | None:
    raw = os.environ.get("SRRM_THREADS", "0").strip() or "0"
    n = int(raw)
    return None if n <= 0 else n


def _fit_segment(X, y, cfg: PipelineConfig, seed: int):
    grid = default_grid(X, cfg.svr_C, cfg.svr_epsilon, cfg.svr_sigma_scale)
    folds = min(cfg.cv_folds, X.shape[0])
    C, eps, sigma = cross_validate(X, y, grid, folds=folds, seed=seed, tol=cfg.svr_tol,
                                   max_passes=cfg.max_passes)
    model = svr_train(X, y, SvrTrainConfig(C=C, epsilon=eps, sigma=sigma, tol=cfg.svr_tol,
                                           max_passes=cfg.max_passes))
    resid = svr_predict(model, X) - y
    return model, float(np.sqrt(np.mean(resid ** 2)))


def segment_scene(scene: Scene, cfg: PipelineConfig):
    """Cluster the coarse pixels; returns (labels grid, memberships, feature table)."""
    table = build_cluster_features(scene.tb_coarse)
    seg_cfg = cfg.segmentation()
    n = table.n_samples
    if seg_cfg.K == "auto":
        k_max = min(seg_cfg.k_max, n)
        K, fits = select_num_clusters(table, min(seg_cfg.k_min, k_max), k_max, seg_cfg, return_all=True)
        mm = fits.get(K)
        if mm is None:
            mm = optimize_memberships(table, SegmentationConfig(**{**seg_cfg.__dict__, "K": K}))
    else:
        mm = optimize_memberships(table, SegmentationConfig(**{**seg_cfg.__dict__, "K": min(seg_cfg.K, n)}))
    labels = hard_assign(mm)
    grid = np.full(scene.tb_coarse.shape, np.nan)
    grid[table.sample_index[:, 0], table.sample_index[:, 1]] = labels
    tb = scene.tb_coarse
    return Grid(grid, ~np.isnan(grid), tb.cell_size, tb.origin_lat, tb.origin_lon, "labels_coarse"), mm, table


def disaggregate(scene: Scene, cfg: PipelineConfig | None = None) -> DisaggregationResult:
    cfg = cfg or PipelineConfig()
    notes: list[str] = []
    labels_coarse, mm, _ = segment_scene(scene, cfg)

    coarse = aggregate_covariates(scene, cfg.min_coverage)
    cols = np.arange(coarse.n_features) if cfg.include_coarse_tb else np.arange(1, coarse.n_features)
    feat_names = [coarse.feature_names[c] for c in cols]
    rr, cc = coarse.sample_index[:, 0], coarse.sample_index[:, 1]
    row_labels = labels_coarse.values[rr, cc]
    keep = ~np.isnan(row_labels)
    Xc = coarse.values[keep][:, cols]
    yc = coarse.raw[keep, 0]
    row_labels = row_labels[keep].astype(int)
    if Xc.shape[0] == 0:
        raise RasterError("no coarse pixel has a complete set of covariates")

    segments = sorted(int(v) for v in np.unique(labels_coarse.values[labels_coarse.mask]))
    sizes = {s: int((row_labels == s).sum()) for s in segments}
    small = [s for s in segments if sizes[s] < cfg.min_cluster_size]

    jobs = {s: (Xc[row_labels == s], yc[row_labels == s], cfg.seed + 1 + s)
            for s in segments if s not in small}
    if small or not jobs:
        if Xc.shape[0] < 2:
            raise RasterError("fewer than two complete coarse pixels; cannot train")
        jobs[-1] = (Xc, yc, cfg.seed)
    with ThreadPoolExecutor(max_workers=_n_workers()) as pool:
        futures = {s: pool.submit(_fit_segment, X, y, cfg, seed) for s, (X, y, seed) in jobs.items()}
        fitted = {s: f.result() for s, f in futures.items()}
    if small and len(small) == len(segments):
        msg = "every segment is below min_cluster_size; using a single global model"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=2)

    # fine-scale features, standardized with the coarse parameters
    fine_layers = scene.fine_layers()
    if cfg.include_coarse_tb:
        fine_layers = [upsample_nearest(scene.tb_coarse, scene.factor)] + fine_layers
    fine = stack_features(fine_layers, names=list(feat_names), drop_incomplete=False,
                          params=(coarse.mean[cols], coarse.scale[cols]))
    fr, fc = fine.sample_index[:, 0], fine.sample_index[:, 1]
    fine_labels_full = np.repeat(np.repeat(labels_coarse.values, scene.factor, 0), scene.factor, 1)
    parent_ok = np.repeat(np.repeat(scene.tb_coarse.mask & labels_coarse.mask, scene.factor, 0),
                          scene.factor, 1)
    sel = parent_ok[fr, fc]
    fine = FeatureTable(fine.values[sel], fine.raw[sel], fine.feature_names, fine.sample_index[sel],
                        fine.mean, fine.scale)
    fine_labels = fine_labels_full[fine.sample_index[:, 0], fine.sample_index[:, 1]].astype(int)
    ref = FeatureTable(Xc, coarse.raw[keep][:, cols], feat_names, coarse.sample_index[keep],
                       coarse.mean[cols], coarse.scale[cols])
    imputed = {}
    if cfg.impute_policy == "segment-mean":
        fine = impute_missing(fine, "segment-mean", fine_labels, ref, row_labels)
        imputed = fine.flags.get("imputed", {})
    else:
        n_before = fine.n_samples
        complete = ~np.isnan(fine.raw).any(axis=1)
        fine = impute_missing(fine, "drop-row")
        fine_labels = fine_labels[complete]
        if fine.n_samples < n_before:
            notes.append(f"dropped {n_before - fine.n_samples} incomplete fine pixels")

    out = np.full(scene.fine_shape, np.nan)
    models: dict[int, SvrModel] = {}
    diagnostics = []
    for s in segments:
        key = s if s in fitted else -1
        model, train_rmse = fitted[key]
        models[s] = model
        rows = fine_labels == s
        if rows.any():
            pred = svr_predict(model, fine.values[rows])
            idx = fine.sample_index[rows]
            out[idx[:, 0], idx[:, 1]] = pred
        diagnostics.append({
            "segment": s,
            "n_coarse": int(np.sum(labels_coarse.values == s)),
            "n_train": sizes[s],
            "n_fine": int(rows.sum()),
            "model": "global" if key == -1 else "segment",
            "C": model.C,
            "epsilon": model.epsilon,
            "sigma": model.kernel.sigma,
            "n_support": model.n_support,
            "train_rmse": train_rmse,
            "imputed": sum(imputed.values()),
        })
    tb = scene.tb_coarse
    if cfg.preserve_block_means:
        out = block_mean_correction(out, tb, scene.factor)
    fine_cell = tb.cell_size / scene.factor
    labels_fine = Grid(np.where(parent_ok, fine_labels_full, np.nan), parent_ok, fine_cell,
                       tb.origin_lat, tb.origin_lon, "labels_fine")
    return DisaggregationResult(
        tb_fine=Grid(out, ~np.isnan(out), fine_cell, tb.origin_lat, tb.origin_lon, "tb_fine"),
        labels_coarse=labels_coarse,
        labels_fine=labels_fine,
        tb_coarse=tb,
        diagnostics=diagnostics,
        config_echo=asdict(cfg),
        memberships=mm,
        models=models,
        warnings=notes,
    )


DIAGNOSTIC_COLUMNS = ("segment", "n_coarse", "n_train", "n_fine", "model", "C", "epsilon", "sigma",
                      "n_support", "train_rmse", "imputed")


def write_result(result: DisaggregationResult, directory, cfg: PipelineConfig | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_fgrid(result.tb_fine, d / "tb_fine.fgrid")
    write_fgrid(result.tb_coarse, d / "tb_coarse.fgrid")
    write_fgrid(result.labels_coarse, d / "labels_coarse.fgrid")
    write_fgrid(result.labels_fine, d / "labels_fine.fgrid")
    with open(d / "diagnostics.csv", "w") as fh:
        fh.write(",".join(DIAGNOSTIC_COLUMNS) + "\n")
        for row in result.diagnostics:
            fh.write(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in DIAGNOSTIC_COLUMNS) + "\n")
        for note in result.warnings:
            fh.write(f"# warning: {note}\n")
    if cfg is not None:
        (d / "config.txt").write_text(format_config(cfg))
    if result.memberships is not None:
        idx = np.argwhere(result.labels_coarse.mask)
        memberships_to_csv(result.memberships, d / "memberships.csv", idx)
    mdir = d / "models"
    mdir.mkdir(exist_ok=True)
    for s, model in sorted(result.models.items()):
        (mdir / f"segment_{s}.txt").write_text(model_to_text(model))
    return d


class SRRMDisaggregator(BaseEstimator):
    """Estimator facade over :func:`disaggregate`.

    ``fit(scene)`` runs segmentation and per-segment training on the scene's
    coarse data and stores the result; ``predict(scene)`` returns the fine
    brightness-temperature grid.  Parameters are the fields of
    :class:`PipelineConfig`.
    """

    def __init__(self, k="auto", k_min=1, k_max=6, seg_sigma=None, max_iters=2000, step_size=0.5,
                 batch_size=64, seg_tol=1e-5, svr_C=(1.0, 10.0, 100.0), svr_epsilon=(0.5, 1.0, 2.0),
                 svr_sigma_scale=(0.5, 1.0, 2.0), cv_folds=5, svr_tol=1e-6, max_passes=10_000,
                 min_cluster_size=5, impute_policy="segment-mean", include_coarse_tb=True,
                 preserve_block_means=True, min_coverage=0.5, seed=42):
        self.k = k
        self.k_min = k_min
        self.k_max = k_max
        self.seg_sigma = seg_sigma
        self.max_iters = max_iters
        self.step_size = step_size
        self.batch_size = batch_size
        self.seg_tol = seg_tol
        self.svr_C = svr_C
        self.svr_epsilon = svr_epsilon
        self.svr_sigma_scale = svr_sigma_scale
        self.cv_folds = cv_folds
        self.svr_tol = svr_tol
        self.max_passes = max_passes
        self.min_cluster_size = min_cluster_size
        self.impute_policy = impute_policy
        self.include_coarse_tb = include_coarse_tb
        self.preserve_block_means = preserve_block_means
        self.min_coverage = min_coverage
        self.seed = seed

    def config(self) -> PipelineConfig:
        params = self.get_params()
        for key in ("svr_C", "svr_epsilon", "svr_sigma_scale"):
            params[key] = tuple(float(v) for v in params[key])
        return PipelineConfig(**params)

    def fit(self, scene: Scene, y=None):
        self.result_ = disaggregate(scene, self.config())
        self.n_segments_ = len(self.result_.models)
        return self

    def predict(self, scene: Scene | None = None) -> Grid:
        check_is_fitted(self, "result_")
        if scene is None:
            return self.result_.tb_fine
        return disaggregate(scene, self.config()).tb_fine

    def fit_predict(self, scene: Scene, y=None) -> Grid:
        return self.fit(scene).result_.tb_fine
