"""Epsilon-insensitive support vector regression with a Gaussian kernel.

The dual is solved in the usual 2n-variable form

    min_a  1/2 a'Qa + p'a   s.t.  s'a = 0,  0 <= a <= C

with ``a = [alpha; alpha*]``, ``s = [+1; -1]``, ``p = [eps - y; eps + y]`` and
``Q = [[K, -K], [-K, K]]``.  The regression coefficients are
``beta = alpha - alpha*`` and ``f(z) = sum_i beta_i k(x_i, z) + b``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from numba import njit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .kernels import KernelSpec, kernel_matrix, median_distance

SV_THRESHOLD = 1e-10
_TAU = 1e-12


class SvrError(ValueError):
    pass


class SvrConvergenceError(RuntimeError):
    """Solver ran out of iterations; ``violation`` is the final KKT gap."""

    def __init__(self, message: str, violation: float):
        super().__init__(message)
        self.violation = violation


@dataclass(frozen=True)
class SvrTrainConfig:
    C: float = 10.0
    epsilon: float = 1.0
    sigma: float = 1.0
    tol: float = 1e-6
    max_passes: int = 10_000

    def __post_init__(self):
        if not self.C > 0:
            raise SvrError(f"C must be positive, got {self.C}")
        if not self.epsilon >= 0:
            raise SvrError(f"epsilon must be nonnegative, got {self.epsilon}")
        if not self.sigma > 0:
            raise SvrError(f"sigma must be positive, got {self.sigma}")
        if not self.tol > 0:
            raise SvrError(f"tol must be positive, got {self.tol}")
        if self.max_passes < 1:
            raise SvrError("max_passes must be >= 1")


@dataclass(frozen=True)
class SvrModel:
    support_vectors: np.ndarray
    dual_coeffs: np.ndarray
    bias: float
    kernel: KernelSpec
    C: float
    epsilon: float
    n_features: int
    # full training-set solution, kept for audits
    train_dual: np.ndarray | None = field(default=None, repr=False, compare=False)
    n_iter: int = field(default=0, compare=False)
    gap: float = field(default=0.0, compare=False)

    @property
    def n_support(self) -> int:
        return int(self.dual_coeffs.size)


@njit(cache=True, nogil=True)
def _smo(K, y, eps, C, tol, max_iter):
    n = K.shape[0]
    m = 2 * n
    a = np.zeros(m)
    s = np.ones(m)
    G = np.empty(m)
    for t in range(n):
        s[n + t] = -1.0
        G[t] = eps - y[t]
        G[n + t] = eps + y[t]

    it = 0
    gap = np.inf
    while True:
        # i: maximal violator in the up set; j: best second-order gain in the low set
        gmax = -np.inf
        gmin = np.inf
        i = -1
        for t in range(m):
            v = -s[t] * G[t]
            if (s[t] > 0 and a[t] < C) or (s[t] < 0 and a[t] > 0):
                if v > gmax:
                    gmax = v
                    i = t
        j = -1
        best = np.inf
        if i >= 0:
            ii = i % n
            for t in range(m):
                if (s[t] < 0 and a[t] < C) or (s[t] > 0 and a[t] > 0):
                    v = -s[t] * G[t]
                    if v < gmin:
                        gmin = v
                    b = gmax - v
                    if b > 0:
                        tt = t % n
                        quad = K[ii, ii] + K[tt, tt] - 2.0 * K[ii, tt]
                        if quad <= 0:
                            quad = _TAU
                        score = -b * b / quad
                        if score <= best:
                            best = score
                            j = t
        gap = gmax - gmin
        if i < 0 or j < 0 or gap <= tol or it >= max_iter:
            break
        it += 1

        ii = i % n
        jj = j % n
        Qij = s[i] * s[j] * K[ii, jj]
        ai_old = a[i]
        aj_old = a[j]
        if s[i] != s[j]:
            quad = K[ii, ii] + K[jj, jj] + 2.0 * Qij
            if quad <= 0:
                quad = _TAU
            delta = (-G[i] - G[j]) / quad
            diff = a[i] - a[j]
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = diff
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = -diff
            if diff > 0:
                if a[i] > C:
                    a[i] = C
                    a[j] = C - diff
            else:
                if a[j] > C:
                    a[j] = C
                    a[i] = C + diff
        else:
            quad = K[ii, ii] + K[jj, jj] - 2.0 * Qij
            if quad <= 0:
                quad = _TAU
            delta = (G[i] - G[j]) / quad
            total = a[i] + a[j]
            a[i] -= delta
            a[j] += delta
            if total > C:
                if a[i] > C:
                    a[i] = C
                    a[j] = total - C
            else:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = total
            if total > C:
                if a[j] > C:
                    a[j] = C
                    a[i] = total - C
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = total

        di = a[i] - ai_old
        dj = a[j] - aj_old
        for t in range(m):
            tt = t % n
            G[t] += s[t] * (s[i] * K[tt, ii] * di + s[j] * K[tt, jj] * dj)

    # bias: average over free variables, else the midpoint of the feasible interval
    ub = np.inf
    lb = -np.inf
    nfree = 0
    sfree = 0.0
    for t in range(m):
        yG = s[t] * G[t]
        if a[t] >= C:
            if s[t] < 0:
                ub = min(ub, yG)
            else:
                lb = max(lb, yG)
        elif a[t] <= 0:
            if s[t] > 0:
                ub = min(ub, yG)
            else:
                lb = max(lb, yG)
        else:
            nfree += 1
            sfree += yG
    if nfree > 0:
        rho = sfree / nfree
    else:
        rho = 0.5 * (ub + lb)
    beta = a[:n] - a[n:]
    return beta, -rho, it, gap


def _validate_xy(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2 or X.shape[0] != y.size:
        raise SvrError(f"X has shape {X.shape} but y has {y.size} entries")
    if X.shape[0] < 1:
        raise SvrError("at least one training sample is required")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise SvrError("training data contain non-finite values")
    return X, y


def dual_objective(beta, K, y, epsilon: float) -> float:
    """Dual objective (to be maximized) of the epsilon-SVR in terms of beta."""
    beta = np.asarray(beta, dtype=np.float64)
    return float(y @ beta - epsilon * np.abs(beta).sum() - 0.5 * beta @ K @ beta)


def _finalize_model(X, y, beta, bias, cfg: SvrTrainConfig, n_iter=0, gap=0.0) -> SvrModel:
    sv = np.abs(beta) > SV_THRESHOLD
    return SvrModel(
        support_vectors=X[sv].copy(),
        dual_coeffs=beta[sv].copy(),
        bias=float(bias),
        kernel=KernelSpec(cfg.sigma),
        C=cfg.C,
        epsilon=cfg.epsilon,
        n_features=X.shape[1],
        train_dual=beta.copy(),
        n_iter=int(n_iter),
        gap=float(gap),
    )


def svr_train(X, y, cfg: SvrTrainConfig) -> SvrModel:
    """Train an epsilon-SVR with SMO (second-order working-set selection)."""
    X, y = _validate_xy(X, y)
    K = kernel_matrix(X, cfg.sigma)
    n = X.shape[0]
    max_iter = int(cfg.max_passes) * max(n, 1)
    # stop at half the audit tolerance so recomputed residuals keep some slack
    beta, bias, n_iter, gap = _smo(K, y, float(cfg.epsilon), float(cfg.C), 0.5 * cfg.tol, max_iter)
    if gap > 0.5 * cfg.tol:
        raise SvrConvergenceError(
            f"SMO did not converge after {n_iter} iterations (KKT gap {gap:.3e})", float(gap))
    return _finalize_model(X, y, beta, bias, cfg, n_iter, gap)


def svr_predict(model: SvrModel, Z) -> float | np.ndarray:
    """Evaluate f(z) for one sample (1-D input) or a batch (2-D input)."""
    Z = np.asarray(Z, dtype=np.float64)
    single = Z.ndim == 1
    Z2 = Z[None, :] if single else Z
    if Z2.ndim != 2 or Z2.shape[1] != model.n_features:
        raise SvrError(f"expected {model.n_features} features, got shape {Z.shape}")
    if not np.all(np.isfinite(Z2)):
        raise SvrError("prediction inputs contain non-finite values")
    if model.n_support == 0:
        out = np.full(Z2.shape[0], model.bias)
    else:
        diff = Z2[:, None, :] - model.support_vectors[None, :, :]
        d2 = (diff * diff).sum(axis=-1)
        k = np.exp(-d2 / (2.0 * model.kernel.sigma ** 2))
        out = (k * model.dual_coeffs[None, :]).sum(axis=1) + model.bias
    return float(out[0]) if single else out


def kkt_violation(model: SvrModel, X, y) -> float:
    """Largest violation of the optimality conditions on the training set."""
    X, y = _validate_xy(X, y)
    beta = model.train_dual
    if beta is None or beta.size != y.size:
        raise SvrError("model does not carry its training-set dual solution")
    K = kernel_matrix(X, model.kernel.sigma)
    r = K @ beta + model.bias - y
    eps, C = model.epsilon, model.C
    at_upper = beta >= C * (1 - 1e-12)
    at_lower = beta <= -C * (1 - 1e-12)
    zero = np.abs(beta) <= SV_THRESHOLD
    pos = ~zero & ~at_upper & (beta > 0)
    neg = ~zero & ~at_lower & (beta < 0)
    v = np.zeros_like(r)
    v[zero] = np.maximum(0.0, np.abs(r[zero]) - eps)
    v[pos] = np.abs(r[pos] + eps)
    v[neg] = np.abs(r[neg] - eps)
    v[at_upper] = np.maximum(0.0, r[at_upper] + eps)
    v[at_lower] = np.maximum(0.0, eps - r[at_lower])
    box = max(0.0, float(np.max(np.abs(beta))) - C)
    return float(max(v.max(initial=0.0), box, abs(beta.sum())))


def _project(v, s, C):
    """Euclidean projection onto {a : s'a = 0, 0 <= a <= C} (s entries are +-1).

    The constraint residual g(lam) = s'clip(v - lam s, 0, C) is piecewise linear
    and nonincreasing in lam; its root is bracketed by consecutive breakpoints.
    """
    bps = np.unique(np.concatenate([v * s, (v - C) * s]))
    g = np.clip(v[None, :] - bps[:, None] * s[None, :], 0.0, C) @ s
    hit = np.flatnonzero(g == 0.0)
    if hit.size:
        lam = bps[hit[0]]
    else:
        k = np.flatnonzero(g > 0)[-1]
        lam = bps[k] + (bps[k + 1] - bps[k]) * g[k] / (g[k] - g[k + 1])
    return np.clip(v - lam * s, 0.0, C)


def _natural_residual(a, G, s, C):
    return float(np.max(np.abs(a - _project(a - G, s, C))))


def svr_train_bruteforce(X, y, cfg: SvrTrainConfig, max_iter: int = 400_000) -> SvrModel:
    """Reference solver for tiny problems (n <= 10).

    Accelerated projected-gradient descent on the 2n-variable dual with step
    1/L; every 50 steps the current active set is polished by solving its
    equality KKT system exactly.  Stops once the projected-gradient residual is < 1e-10.
    """
    X, y = _validate_xy(X, y)
    n = X.shape[0]
    if n > 10:
        raise SvrError(f"brute-force solver is limited to n <= 10, got {n}")
    K = kernel_matrix(X, cfg.sigma)
    C, eps = float(cfg.C), float(cfg.epsilon)
    s = np.concatenate([np.ones(n), -np.ones(n)])
    Q = np.block([[K, -K], [-K, K]])
    p = np.concatenate([eps - y, eps + y])
    L = max(float(np.linalg.eigvalsh(Q).max()), 1e-12)
    a = np.zeros(2 * n)

    def polish(a):
        free = (a > 1e-9 * C) & (a < C * (1 - 1e-9))
        if not free.any():
            return None
        F = np.flatnonzero(free)
        B = np.flatnonzero(~free)
        aB = np.where(a[B] > 0.5 * C, C, 0.0)
        nf = F.size
        A = np.zeros((nf + 1, nf + 1))
        A[:nf, :nf] = Q[np.ix_(F, F)]
        A[:nf, nf] = s[F]
        A[nf, :nf] = s[F]
        rhs = np.concatenate([-(p[F] + Q[np.ix_(F, B)] @ aB), [-(s[B] @ aB)]])
        sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
        cand = a.copy()
        cand[B] = aB
        cand[F] = sol[:nf]
        if np.any(cand < -1e-12) or np.any(cand > C + 1e-12):
            return None
        return np.clip(cand, 0.0, C)

    res = np.inf
    prev, t = a.copy(), 1.0
    for it in range(1, max_iter + 1):
        # accelerated step with adaptive restart
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        z = a + ((t - 1.0) / t_next) * (a - prev)
        new = _project(z - (Q @ z + p) / L, s, C)
        if (z - new) @ (new - a) > 0:
            t_next = 1.0
        prev, a, t = a, new, t_next
        if it % 50 == 0 or it == max_iter:
            G = Q @ a + p
            res = _natural_residual(a, G, s, C)
            if res < 1e-10:
                break
            cand = polish(a)
            if cand is not None:
                Gc = Q @ cand + p
                rc = _natural_residual(cand, Gc, s, C)
                if rc < 1e-10:
                    a, res = cand, rc
                    break
    if res >= 1e-10:
        raise SvrConvergenceError(f"brute-force solver residual {res:.3e}", res)

    a[a <= 1e-12 * C] = 0.0
    a[a >= C * (1 - 1e-12)] = C
    G = Q @ a + p
    yG = s * G
    free = (a > 0) & (a < C)
    if free.any():
        rho = yG[free].mean()
    else:
        up = ((a >= C) & (s < 0)) | ((a <= 0) & (s > 0))
        ub = yG[up].min(initial=np.inf)
        lb = yG[~up & ~free].max(initial=-np.inf)
        rho = 0.5 * (ub + lb)
    beta = a[:n] - a[n:]
    return _finalize_model(X, y, beta, -rho, cfg)


def default_grid(X, C_values: Sequence[float] = (1.0, 10.0, 100.0),
                 eps_values: Sequence[float] = (0.5, 1.0, 2.0),
                 sigma_scales: Sequence[float] = (0.5, 1.0, 2.0)) -> list[tuple[float, float, float]]:
    """(C, epsilon, sigma) grid with sigma scaled by the median pairwise distance."""
    med = median_distance(X)
    if not med > 0:
        med = 1.0
    return [(float(C), float(e), float(sc * med))
            for C in C_values for e in eps_values for sc in sigma_scales]


def fold_indices(n: int, folds: int, seed: int = 0) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(f) for f in np.array_split(perm, folds)]


def cv_scores(X, y, grid: Iterable[tuple[float, float, float]], folds: int = 5, seed: int = 0,
              tol: float = 1e-6, max_passes: int = 10_000) -> list[tuple[tuple[float, float, float], float]]:
    """Mean out-of-fold RMSE for every grid point."""
    X, y = _validate_xy(X, y)
    n = X.shape[0]
    if folds < 2:
        raise SvrError("cross-validation needs at least 2 folds")
    if n < folds:
        raise SvrError(f"cannot split {n} samples into {folds} folds")
    parts = fold_indices(n, folds, seed)
    scores = []
    for C, eps, sigma in grid:
        cfg = SvrTrainConfig(C=C, epsilon=eps, sigma=sigma, tol=tol, max_passes=max_passes)
        errs = []
        for hold in parts:
            train = np.setdiff1d(np.arange(n), hold, assume_unique=True)
            model = svr_train(X[train], y[train], cfg)
            pred = svr_predict(model, X[hold])
            errs.append(math.sqrt(float(np.mean((pred - y[hold]) ** 2))))
        scores.append(((C, eps, sigma), float(np.mean(errs))))
    return scores


def cross_validate(X, y, grid: Iterable[tuple[float, float, float]], folds: int = 5, seed: int = 0,
                   **kwargs) -> tuple[float, float, float]:
    """Grid point with the lowest out-of-fold RMSE.

    Ties (to 1e-12 relative) go to the flattest model: smaller C, then larger
    epsilon, then larger sigma.
    """
    grid = list(grid)
    if not grid:
        raise SvrError("empty hyperparameter grid")
    if len(grid) == 1:
        return tuple(float(v) for v in grid[0])
    scores = cv_scores(X, y, grid, folds, seed, **kwargs)
    best = min(s for _, s in scores)
    tied = [p for p, s in scores if s <= best + 1e-12 * max(1.0, abs(best))]
    return min(tied, key=lambda p: (p[0], -p[1], -p[2]))


def model_to_text(model: SvrModel) -> str:
    lines = [
        "# srrm epsilon-SVR model",
        f"C = {model.C!r}",
        f"epsilon = {model.epsilon!r}",
        f"sigma = {model.kernel.sigma!r}",
        f"bias = {model.bias!r}",
        f"n_features = {model.n_features}",
        f"n_support = {model.n_support}",
        "beta," + ",".join(f"x{j}" for j in range(model.n_features)),
    ]
    for b, sv in zip(model.dual_coeffs, model.support_vectors):
        lines.append(",".join([repr(float(b))] + [repr(float(v)) for v in sv]))
    return "\n".join(lines) + "\n"


def model_from_text(text: str) -> SvrModel:
    header: dict[str, str] = {}
    rows: list[list[float]] = []
    in_table = False
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("beta,") or line == "beta":
            in_table = True
            continue
        if in_table:
            rows.append([float(v) for v in line.split(",")])
        else:
            key, _, val = line.partition("=")
            header[key.strip()] = val.strip()
    d = int(header["n_features"])
    table = np.array(rows, dtype=np.float64).reshape(-1, d + 1)
    if table.shape[0] != int(header["n_support"]):
        raise SvrError("support-vector count does not match the header")
    return SvrModel(
        support_vectors=table[:, 1:],
        dual_coeffs=table[:, 0],
        bias=float(header["bias"]),
        kernel=KernelSpec(float(header["sigma"])),
        C=float(header["C"]),
        epsilon=float(header["epsilon"]),
        n_features=d,
    )


class EpsilonSVR(BaseEstimator, RegressorMixin):
    """scikit-learn compatible wrapper around :func:`svr_train`.

    ``sigma`` may be a float or ``"median"`` (median pairwise distance of the
    training inputs).
    """

    def __init__(self, C=10.0, epsilon=1.0, sigma="median", tol=1e-6, max_passes=10_000):
        self.C = C
        self.epsilon = epsilon
        self.sigma = sigma
        self.tol = tol
        self.max_passes = max_passes

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        sigma = self.sigma
        if sigma == "median":
            sigma = median_distance(X) or 1.0
        cfg = SvrTrainConfig(C=self.C, epsilon=self.epsilon, sigma=float(sigma),
                             tol=self.tol, max_passes=self.max_passes)
        self.model_ = svr_train(X, y, cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X)
        return svr_predict(self.model_, X)

    @property
    def support_vectors_(self):
        check_is_fitted(self, "model_")
        return self.model_.support_vectors

    @property
    def dual_coef_(self):
        check_is_fitted(self, "model_")
        return self.model_.dual_coeffs

    @property
    def intercept_(self):
        check_is_fitted(self, "model_")
        return self.model_.bias
