"""Field statistics, smoothness, accuracy and KDE distribution distances."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import kde_pdf, silverman_bandwidth
from .raster import Grid, upsample_nearest

REPORT_COLUMNS = ("scene", "day", "field", "mean_K", "std_K", "neighbor_max_K", "rmse_K",
                  "pdf_l1_vs_coarse", "pdf_l1_vs_ref")
PDF_POINTS = 512
_trapezoid = getattr(np, "trapezoid", None) or np.trapz


class EvaluationError(ValueError):
    pass


def _valid_values(g) -> np.ndarray:
    if isinstance(g, Grid):
        return g.values[g.mask]
    a = np.asarray(g, dtype=np.float64).ravel()
    return a[np.isfinite(a)]


def summary_stats(g) -> tuple[float, float, int]:
    """(mean, population std, valid count) over the valid cells."""
    v = _valid_values(g)
    if v.size == 0:
        raise EvaluationError("field has no valid cells")
    return float(v.mean()), float(v.std()), int(v.size)


def neighbor_max_diff(g: Grid) -> float:
    """Largest absolute difference between 4-connected valid cells."""
    vals, ok = g.values, g.mask
    best = -1.0
    for a, b, m in ((vals[:, 1:], vals[:, :-1], ok[:, 1:] & ok[:, :-1]),
                    (vals[1:, :], vals[:-1, :], ok[1:, :] & ok[:-1, :])):
        if m.any():
            best = max(best, float(np.abs(a - b)[m].max()))
    if best < 0:
        raise EvaluationError("field has no pair of adjacent valid cells")
    return best


def pdf_compare(a, b, n_points: int = PDF_POINTS) -> tuple[float, np.ndarray]:
    """Trapezoid L1 distance between Silverman-bandwidth KDEs on a shared lattice."""
    a = _valid_values(a)
    b = _valid_values(b)
    if a.size == 0 or b.size == 0:
        raise EvaluationError("pdf_compare needs nonempty samples")
    try:
        ha, hb = silverman_bandwidth(a), silverman_bandwidth(b)
    except ValueError as exc:
        raise EvaluationError(str(exc)) from None
    h = max(ha, hb)
    lo = min(a.min(), b.min()) - 3.0 * h
    hi = max(a.max(), b.max()) + 3.0 * h
    t = np.linspace(lo, hi, n_points)
    diff = np.abs(kde_pdf(a, ha, t) - kde_pdf(b, hb, t))
    return float(_trapezoid(diff, t)), t


def rmse(a: Grid, b: Grid) -> float:
    if a.shape != b.shape:
        raise EvaluationError(f"shape mismatch {a.shape} vs {b.shape}")
    m = a.mask & b.mask
    if not m.any():
        raise EvaluationError("no cell is valid in both fields")
    d = a.values[m] - b.values[m]
    return float(np.sqrt(np.mean(d * d)))


def _pdf_or_nan(a, b) -> float:
    try:
        return pdf_compare(a, b)[0]
    except EvaluationError:
        return math.nan


@dataclass
class RunReport:
    rows: list[dict]
    delta_mean: float
    delta_std: float
    pdf_ref_vs_coarse: float = math.nan
    notes: list[str] = field(default_factory=list)

    def row(self, name: str) -> dict:
        for r in self.rows:
            if r["field"] == name:
                return r
        raise KeyError(name)


def evaluate_run(result, reference: Grid | None = None, truth: Grid | None = None,
                 scene: str = "scene", day: str = "0") -> RunReport:
    """Compare the coarse, disaggregated and optional reference/truth fields.

    ``result`` is a DisaggregationResult or anything with ``tb_fine`` and
    ``tb_coarse`` grids.  Quantities that are undefined for a field (RMSE with
    no truth, a KDE of a constant field) are reported as NaN.
    """
    fine, coarse = result.tb_fine, result.tb_coarse
    factor = fine.rows // coarse.rows
    if factor < 1 or fine.shape != (coarse.rows * factor, coarse.cols * factor):
        raise EvaluationError(f"fine shape {fine.shape} is not a multiple of coarse shape {coarse.shape}")
    for g, what in ((reference, "reference"), (truth, "truth")):
        if g is not None and g.shape != fine.shape:
            raise EvaluationError(f"{what} shape {g.shape} does not match fine shape {fine.shape}")

    fields_ = [("coarse", coarse), ("disaggregated", fine)]
    if reference is not None:
        fields_.append(("reference", reference))
    if truth is not None:
        fields_.append(("truth", truth))

    rows = []
    for name, g in fields_:
        mean, std, _ = summary_stats(g)
        if truth is None:
            err = math.nan
        elif name == "coarse":
            err = rmse(upsample_nearest(coarse, factor), truth)
        else:
            err = rmse(g, truth)
        rows.append({
            "scene": scene, "day": day, "field": name,
            "mean_K": mean, "std_K": std, "neighbor_max_K": neighbor_max_diff(g), "rmse_K": err,
            "pdf_l1_vs_coarse": _pdf_or_nan(g, coarse),
            "pdf_l1_vs_ref": _pdf_or_nan(g, reference) if reference is not None else math.nan,
        })
    c, f = rows[0], rows[1]
    return RunReport(rows=rows, delta_mean=abs(f["mean_K"] - c["mean_K"]),
                     delta_std=abs(f["std_K"] - c["std_K"]),
                     pdf_ref_vs_coarse=_pdf_or_nan(reference, coarse) if reference is not None else math.nan)


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_report(rows, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
    return path


def read_report(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != REPORT_COLUMNS:
            raise EvaluationError(f"{path}: unexpected report header {rd.fieldnames}")
        out = []
        for r in rd:
            out.append({k: (r[k] if k in ("scene", "day", "field") else float(r[k])) for k in REPORT_COLUMNS})
        return out
