"""Shared fixtures and the suite-wide KKT audit.

Every SVR model built anywhere in the test run passes through
``srrm.svr._finalize_model``; the wrapper installed here re-checks the
optimality conditions with an independent implementation and records the
worst violation.  A test that trains a violating model fails.
"""

from __future__ import annotations

import threading

import numpy as np
import pytest

import srrm.svr as svr_mod
from srrm.pipeline import disaggregate
from srrm.synth import generate_scene, scene_catalog, scenario_params

KKT_TOL = 1e-6


class KktAudit:
    def __init__(self):
        self.lock = threading.Lock()
        self.count = 0
        self.worst = 0.0
        self.failures: list[str] = []

    def record(self, violation: float, n: int) -> None:
        with self.lock:
            self.count += 1
            self.worst = max(self.worst, violation)
            if not violation <= KKT_TOL:
                self.failures.append(f"n={n} violation={violation:.3e}")


AUDIT = KktAudit()

# acceptance criterion number -> (passed, one-line description)
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 10


def record_criterion(number: int, passed: bool, text: str) -> None:
    ACCEPTANCE[number] = (bool(passed), text)


def independent_kkt(X, y, beta, bias, C, eps, sigma) -> float:
    """Worst KKT residual, written without reusing any package code."""
    X = np.asarray(X, dtype=float)
    n = len(y)
    r = np.empty(n)
    for i in range(n):
        d = X - X[i]
        k = np.exp(-np.einsum("ij,ij->i", d, d) / (2 * sigma * sigma))
        r[i] = bias + float(k @ beta) - y[i]
    worst = abs(float(np.sum(beta)))
    for b, ri in zip(beta, r):
        if abs(b) > C * (1 + 1e-12):
            worst = max(worst, abs(b) - C)
        if abs(b) <= 1e-10:
            v = max(0.0, abs(ri) - eps)
        elif b >= C * (1 - 1e-12):
            v = max(0.0, ri + eps)
        elif b <= -C * (1 - 1e-12):
            v = max(0.0, eps - ri)
        elif b > 0:
            v = abs(ri + eps)
        else:
            v = abs(ri - eps)
        worst = max(worst, v)
    return worst


_original_finalize = svr_mod._finalize_model


def _audited_finalize(X, y, beta, bias, cfg, n_iter=0, gap=0.0):
    model = _original_finalize(X, y, beta, bias, cfg, n_iter, gap)
    AUDIT.record(independent_kkt(X, y, model.train_dual, model.bias, cfg.C, cfg.epsilon, cfg.sigma), len(y))
    return model


def pytest_configure(config):
    svr_mod._finalize_model = _audited_finalize


@pytest.hookimpl(wrapper=True)
def pytest_runtest_call(item):
    before = len(AUDIT.failures)
    out = yield
    new = AUDIT.failures[before:]
    if new:
        raise AssertionError(f"KKT audit failed for {len(new)} model(s): {new[:3]}")
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        terminalreporter.write_line(
            f"[{'PASS' if not AUDIT.failures else 'FAIL'}] criterion 2 (suite-wide KKT audit): "
            f"{AUDIT.count} models, worst violation {AUDIT.worst:.2e} (tol {KKT_TOL:g})")
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n == 2:
            ok = not AUDIT.failures and AUDIT.count > 0 and ACCEPTANCE.get(2, (True, ""))[0]
            text = (f"suite-wide KKT audit: {AUDIT.count} models, worst violation {AUDIT.worst:.2e} "
                    f"(tol {KKT_TOL:g})")
        elif n in ACCEPTANCE:
            ok, text = ACCEPTANCE[n]
        else:
            ok, text = False, "not run or errored before reporting"
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {text}")


@pytest.fixture(scope="session")
def kkt_audit():
    return AUDIT


def planted_blobs(rng, n=162, k=2, d=3, separation=5.0, sd=1.0):
    """``k`` isotropic blobs whose centres are ``separation`` sd apart pairwise."""
    if k == 2:
        centres = np.zeros((2, d))
        centres[1, 0] = separation
    else:
        ang = 2 * np.pi * np.arange(k) / k
        radius = separation / (2 * np.sin(np.pi / k))
        centres = np.zeros((k, d))
        centres[:, 0] = radius * np.cos(ang)
        centres[:, 1] = radius * np.sin(ang)
    labels = np.arange(n) % k
    rng.shuffle(labels)
    X = centres[labels] + sd * rng.standard_normal((n, d))
    return X, labels


@pytest.fixture(scope="session")
def catalog_runs():
    """Default-config disaggregation of every catalog scene, plus the affine scene."""
    runs = {}
    names = list(scene_catalog()) + ["affine"]
    for name in names:
        scene, truth = generate_scene(scenario_params(name))
        runs[name] = (scene, truth, disaggregate(scene))
    return runs
