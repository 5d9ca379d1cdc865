"""Cauchy-Schwarz information-theoretic segmentation of coarse pixels.

The cost of a soft membership matrix ``M`` (rows on the probability simplex)
over features ``X`` is

    J(M) = 1/2 sum_ij (1 - m_i'm_j) G_ij / sqrt(prod_k m_k'G m_k)

with ``G`` the Gaussian Gram matrix of width ``sigma * sqrt(2)``.  Memberships
are parameterized by per-row logits through a softmax, so the simplex
constraint holds exactly at every iterate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .kernels import kernel_matrix, median_distance
from .raster import FeatureTable, Grid, RasterError, coordinate_grids, stack_features

logger = logging.getLogger(__name__)

_DEGENERATE = 1e-300
_MAX_RESTARTS = 5
_LOGIT_CLIP = 60.0


class SegmentationError(RuntimeError):
    """A segment lost all of its kernel mass and restarts were exhausted."""


class DegenerateSegmentError(SegmentationError):
    pass


@dataclass(frozen=True)
class SegmentationConfig:
    K: int | str = "auto"
    sigma: float | None = None
    max_iters: int = 2000
    step_size: float = 0.5
    batch_size: int = 64
    tol: float = 1e-5
    seed: int = 42
    k_min: int = 1
    k_max: int = 6

    def __post_init__(self):
        if self.K != "auto" and (not isinstance(self.K, (int, np.integer)) or self.K < 1):
            raise ValueError(f"K must be a positive integer or 'auto', got {self.K!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.max_iters < 0 or self.batch_size < 1 or not self.step_size > 0:
            raise ValueError("max_iters, batch_size and step_size must be positive")
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError("need 1 <= k_min <= k_max")


@dataclass
class MembershipMatrix:
    m: np.ndarray
    cost_trace: list[float] = field(default_factory=list)
    n_iter: int = 0
    restarts: int = 0

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 2:
            raise ValueError("membership matrix must be 2-D")
        if np.any(m < 0) or np.any(m > 1) or not np.allclose(m.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("membership rows must lie on the probability simplex")
        self.m = m

    @property
    def n_pixels(self) -> int:
        return self.m.shape[0]

    @property
    def n_segments(self) -> int:
        return self.m.shape[1]


def default_sigma(X) -> float:
    """Median pairwise distance / sqrt(2); 1.0 when all rows coincide."""
    med = median_distance(X)
    return med / np.sqrt(2.0) if med > 0 else 1.0


def build_cluster_features(tb_coarse: Grid) -> FeatureTable:
    """Standardized [T_B, lat, lon] for every valid coarse pixel."""
    if not tb_coarse.mask.any():
        raise RasterError("brightness-temperature grid has no valid cells")
    lat, lon = coordinate_grids(tb_coarse)
    lat_g = Grid.from_array(lat, tb_coarse.cell_size, tb_coarse.origin_lat, tb_coarse.origin_lon, name="lat")
    lon_g = Grid.from_array(lon, tb_coarse.cell_size, tb_coarse.origin_lat, tb_coarse.origin_lon, name="lon")
    return stack_features([tb_coarse, lat_g, lon_g], standardize=True, names=["tb", "lat", "lon"])


def _as_matrix(X) -> np.ndarray:
    if isinstance(X, FeatureTable):
        X = X.values
    return np.atleast_2d(np.asarray(X, dtype=np.float64))


def _gram(X, sigma: float) -> np.ndarray:
    return kernel_matrix(_as_matrix(X), sigma * np.sqrt(2.0))


def _terms(G: np.ndarray, M: np.ndarray, GM: np.ndarray | None = None):
    """Numerator, per-segment within sums q_k and G @ M."""
    if GM is None:
        GM = G @ M
    q = np.einsum("ik,ik->k", M, GM)
    total = G.sum()
    num = max(0.5 * (total - q.sum()), 0.0)
    return num, q, GM


def _cost_from_terms(num, q) -> float:
    if np.any(q <= _DEGENERATE):
        raise DegenerateSegmentError(f"segment with vanishing kernel mass (min q = {q.min():.3e})")
    return float(num / np.exp(0.5 * np.log(q).sum()))


def _check_m(M, n) -> np.ndarray:
    M = M.m if isinstance(M, MembershipMatrix) else np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != n:
        raise ValueError(f"membership matrix has shape {M.shape}, expected {n} rows")
    return M


def jcs_cost(X, M, sigma: float) -> float:
    """Cauchy-Schwarz clustering cost of soft memberships ``M``."""
    Xm = _as_matrix(X)
    M = _check_m(M, Xm.shape[0])
    num, q, _ = _terms(_gram(Xm, sigma), M)
    return _cost_from_terms(num, q)


def jcs_gradient(X, M, sigma: float) -> np.ndarray:
    """Analytic dJ/dm_ik, treating every entry of ``M`` as free."""
    Xm = _as_matrix(X)
    M = _check_m(M, Xm.shape[0])
    num, q, GM = _terms(_gram(Xm, sigma), M)
    J = _cost_from_terms(num, q)
    den = num / J if J > 0 else np.exp(0.5 * np.log(q).sum())
    return -GM * (1.0 / den + J / q)[None, :]


def _softmax(theta: np.ndarray) -> np.ndarray:
    z = theta - theta.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def hard_assign(M) -> np.ndarray:
    """argmax per row; ties go to the lowest segment index."""
    M = M.m if isinstance(M, MembershipMatrix) else np.asarray(M)
    return np.argmax(M, axis=1)


def kmeanspp_logits(X, K: int, rng: np.random.Generator, logit: float = 3.0) -> np.ndarray:
    """k-means++ seeding; each pixel gets ``logit`` on its nearest seed's segment."""
    Xm = _as_matrix(X)
    n = Xm.shape[0]
    centers = [int(rng.integers(n))]
    d2 = ((Xm - Xm[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        if total > 0:
            c = int(rng.choice(n, p=d2 / total))
        else:
            c = int(rng.integers(n))
        centers.append(c)
        d2 = np.minimum(d2, ((Xm - Xm[c]) ** 2).sum(axis=1))
    dist = ((Xm[:, None, :] - Xm[centers][None, :, :]) ** 2).sum(axis=-1)
    theta = np.zeros((n, K))
    theta[np.arange(n), np.argmin(dist, axis=1)] = logit
    # pin the seed pixels themselves even when seeds coincide
    theta[centers, :] = 0.0
    theta[centers, np.arange(K)] = logit
    return theta


def _descend(G, theta, cfg: SegmentationConfig, rng: np.random.Generator):
    n, K = theta.shape
    batch = min(cfg.batch_size, n)
    M = _softmax(theta)
    num, q, GM = _terms(G, M)
    cost = _cost_from_terms(num, q)
    trace = [cost]
    step = cfg.step_size
    it = 0
    while it < cfg.max_iters and step > 1e-10:
        snapshot = theta.copy()
        for _ in range(min(10, cfg.max_iters - it)):
            rows = np.sort(rng.choice(n, size=batch, replace=False))
            if np.any(q <= _DEGENERATE):
                raise DegenerateSegmentError("segment collapsed during descent")
            # gradient of log J for the batch rows, chained through the softmax
            g = -GM[rows] * (1.0 / max(num, _DEGENERATE) + 1.0 / q)[None, :]
            mb = M[rows]
            gt = mb * (g - (mb * g).sum(axis=1, keepdims=True))
            scale = np.abs(gt).max()
            if scale > 0:
                theta[rows] = np.clip(theta[rows] - step * gt / scale, -_LOGIT_CLIP, _LOGIT_CLIP)
                M_new = _softmax(theta[rows])
                GM += G[:, rows] @ (M_new - M[rows])
                M[rows] = M_new
                q = np.einsum("ik,ik->k", M, GM)
                num = max(0.5 * (G.sum() - q.sum()), 0.0)
            it += 1
        # exact re-evaluation guards against drift in the incremental G @ M
        num, q, GM = _terms(G, M)
        try:
            new_cost = _cost_from_terms(num, q)
        except DegenerateSegmentError:
            new_cost = np.inf
        if new_cost <= cost:
            cost = new_cost
            trace.append(cost)
            step = min(step * 1.2, 4.0)
            if len(trace) > 20:
                ref = trace[-21]
                if ref == 0 or (ref - cost) / ref < cfg.tol:
                    break
        else:
            theta = snapshot
            M = _softmax(theta)
            num, q, GM = _terms(G, M)
            step *= 0.5
    return theta, trace, it


def optimize_memberships(X, config: SegmentationConfig, init=None) -> MembershipMatrix:
    """Minimize the Cauchy-Schwarz cost over row-stochastic memberships.

    ``init`` optionally supplies starting logits (n x K); otherwise k-means++
    seeding is used.  A collapsed segment triggers a fresh random start, up
    to five times.
    """
    Xm = _as_matrix(X)
    n = Xm.shape[0]
    K = config.K
    if K == "auto":
        raise ValueError("optimize_memberships needs a fixed K; use select_num_clusters")
    if K > n:
        raise ValueError(f"cannot form {K} segments from {n} pixels")
    if K == 1:
        return MembershipMatrix(np.ones((n, 1)), [0.0], 0, 0)
    sigma = config.sigma if config.sigma is not None else default_sigma(Xm)
    G = _gram(Xm, sigma)
    rng = np.random.default_rng(config.seed)
    for attempt in range(_MAX_RESTARTS + 1):
        if attempt == 0 and init is not None:
            theta = np.array(init, dtype=np.float64)
            if theta.shape != (n, K):
                raise ValueError(f"init logits have shape {theta.shape}, expected {(n, K)}")
        else:
            theta = kmeanspp_logits(Xm, K, rng)
        try:
            theta, trace, it = _descend(G, theta, config, rng)
        except DegenerateSegmentError as exc:
            logger.info("segmentation restart %d: %s", attempt + 1, exc)
            continue
        return MembershipMatrix(_softmax(theta), trace, it, attempt)
    raise SegmentationError(f"degenerate segments after {_MAX_RESTARTS} restarts (K={K})")


def description_length(X, M, sigma: float | None = None) -> float:
    """Two-part code length of a segmentation, in nats.

    Each hard segment contributes an isotropic Gaussian and a mixing weight;
    the data are coded with the resulting mixture density and the parameter
    cost is (K (d + 2) - 1) / 2 log N.  Coding with the mixture rather than
    the partition keeps a blob cut in two from looking cheaper than the blob.
    Segment variances carry one pseudo-observation at the pooled spread, so a
    segment holding a single outlier is not coded for free.
    """
    Xm = _as_matrix(X)
    n, d = Xm.shape
    labels = hard_assign(M)
    ks = np.unique(labels)
    spread = float(Xm.var(axis=0).mean()) if n > 1 else 0.0
    if not spread > 0:
        spread = 1.0
    logp = np.empty((ks.size, n))
    for row, k in enumerate(ks):
        pts = Xm[labels == k]
        nk = pts.shape[0]
        mu = pts.mean(axis=0)
        var = (float(((pts - mu) ** 2).sum()) + d * spread) / (d * (nk + 1))
        sq = ((Xm - mu) ** 2).sum(axis=1)
        logp[row] = np.log(nk / n) - 0.5 * (d * np.log(2 * np.pi * var) + sq / var)
    n_params = ks.size * (d + 2) - 1
    return float(-np.logaddexp.reduce(logp, axis=0).sum() + 0.5 * n_params * np.log(n))


def select_num_clusters(X, k_min: int, k_max: int, config: SegmentationConfig,
                        return_all: bool = False):
    """Number of segments minimizing :func:`description_length`."""
    Xm = _as_matrix(X)
    n = Xm.shape[0]
    if not 1 <= k_min <= k_max <= n:
        raise ValueError(f"need 1 <= k_min <= k_max <= n_pixels, got {k_min}, {k_max}, {n}")
    if k_min == k_max:
        return (k_min, {}) if return_all else k_min
    scores = {}
    fits = {}
    for K in range(k_min, k_max + 1):
        cfg = SegmentationConfig(**{**config.__dict__, "K": K})
        fits[K] = optimize_memberships(Xm, cfg)
        scores[K] = description_length(Xm, fits[K])
    best = min(scores, key=lambda k: (scores[k], k))
    return (best, fits) if return_all else best


def memberships_to_csv(M, path, sample_index=None) -> None:
    M = M.m if isinstance(M, MembershipMatrix) else np.asarray(M)
    K = M.shape[1]
    with open(path, "w") as fh:
        head = ["row", "col"] if sample_index is not None else ["pixel"]
        fh.write(",".join(head + [f"m{k}" for k in range(K)]) + "\n")
        for i, row in enumerate(M):
            key = [str(v) for v in sample_index[i]] if sample_index is not None else [str(i)]
            fh.write(",".join(key + [repr(float(v)) for v in row]) + "\n")


class CauchySchwarzSegmenter(BaseEstimator, ClusterMixin):
    """Soft Cauchy-Schwarz clustering with optional MDL choice of ``n_clusters``.

    Parameters mirror :class:`SegmentationConfig`. After ``fit``:
    ``memberships_`` (n x K), ``labels_``, ``n_clusters_``, ``cost_trace_``,
    ``sigma_``.
    """

    def __init__(self, n_clusters="auto", sigma=None, k_min=1, k_max=6, max_iters=2000,
                 step_size=0.5, batch_size=64, tol=1e-5, random_state=42):
        self.n_clusters = n_clusters
        self.sigma = sigma
        self.k_min = k_min
        self.k_max = k_max
        self.max_iters = max_iters
        self.step_size = step_size
        self.batch_size = batch_size
        self.tol = tol
        self.random_state = random_state

    def _config(self, X) -> SegmentationConfig:
        sigma = self.sigma if self.sigma is not None else default_sigma(X)
        return SegmentationConfig(K=self.n_clusters, sigma=sigma, max_iters=self.max_iters,
                                  step_size=self.step_size, batch_size=self.batch_size,
                                  tol=self.tol, seed=self.random_state,
                                  k_min=self.k_min, k_max=min(self.k_max, X.shape[0]))

    def fit(self, X, y=None):
        X = check_array(X)
        cfg = self._config(X)
        if cfg.K == "auto":
            K, fits = select_num_clusters(X, cfg.k_min, cfg.k_max, cfg, return_all=True)
            mm = fits.get(K) or optimize_memberships(X, SegmentationConfig(**{**cfg.__dict__, "K": K}))
        else:
            K = int(cfg.K)
            mm = optimize_memberships(X, cfg)
        self.sigma_ = cfg.sigma
        self.n_clusters_ = K
        self.memberships_ = mm.m
        self.cost_trace_ = mm.cost_trace
        self.labels_ = hard_assign(mm.m)
        self.n_features_in_ = X.shape[1]
        return self

    def score(self, X=None, y=None):
        """Negative Cauchy-Schwarz cost of the fitted memberships."""
        check_is_fitted(self, "memberships_")
        if self.n_clusters_ == 1:
            return 0.0
        return -jcs_cost(X, self.memberships_, self.sigma_)
