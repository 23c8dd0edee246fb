"""Evaluation of estimated blips against generator ground truth.

Effects are compared at realized treatment arms. Control steps contribute an
exact (0 - 0) pair, which deflates squared error artificially, so the
headline report restricts to treated steps; the all-steps variant is
available behind a flag. Rank correlation always pools treated pairs only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .snmm import Panel

__all__ = [
    "EvalReport",
    "mse_per_timepoint",
    "spearman",
    "evaluate",
    "realized_blips",
    "ZeroBlipEstimator",
]


def mse_per_timepoint(est: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Mean over units of squared error, one entry per step."""
    est = np.asarray(est, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if est.shape != truth.shape or est.ndim != 2:
        raise ValueError(f"shapes disagree: {est.shape} vs {truth.shape}")
    return ((est - truth) ** 2).mean(axis=0)


def spearman(x, y) -> float:
    """Pearson correlation of average ranks; ties share their block mean.

    Returns nan when either argument has zero rank variance (all ties),
    which callers report as missing.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("spearman expects two equal-length vectors")
    if x.size < 2:
        raise ValueError("need at least two observations")
    rx = rankdata(x, method="average")
    ry = rankdata(y, method="average")
    if rx.std() == 0 or ry.std() == 0:
        return float("nan")
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    return float((rx * ry).sum() / np.sqrt((rx * rx).sum() * (ry * ry).sum()))


@dataclass
class EvalReport:
    """Per-step and pooled error/rank metrics for one estimator on one panel."""

    mse_per_timepoint: np.ndarray
    overall_mse: float
    spearman_per_timepoint: np.ndarray
    overall_spearman: float
    n_units: int
    treated_only: bool

    def to_rows(self, method: str, seed: int) -> list[dict]:
        """CSV-ready rows: one per step plus one pooled 'overall' row."""
        rows = []
        for j, (m, s) in enumerate(zip(self.mse_per_timepoint,
                                       self.spearman_per_timepoint)):
            rows.append({"method": method, "seed": seed, "timepoint": j + 1,
                         "mse": float(m), "spearman": float(s)})
        rows.append({"method": method, "seed": seed, "timepoint": "overall",
                     "mse": self.overall_mse, "spearman": self.overall_spearman})
        return rows


def realized_blips(components: np.ndarray, z: np.ndarray) -> np.ndarray:
    """[N, T] component at the realized arm; exactly 0 at control steps."""
    n, t = z.shape
    out = np.zeros((n, t))
    rows, cols = np.nonzero(z > 0)
    out[rows, cols] = components[rows, cols, z[rows, cols] - 1]
    return out


class ZeroBlipEstimator:
    """Predicts zero effect everywhere; the natural MSE reference point."""

    def predict_blip_components(self, panel: Panel) -> np.ndarray:
        return np.zeros((panel.n_units, panel.horizon, panel.n_treatments - 1))


def evaluate(estimator, panel: Panel, treated_only: bool = True) -> EvalReport:
    """Score an estimator's blips against the panel's ground truth.

    ``estimator`` needs a ``predict_blip_components(panel)`` method returning
    [N, T, |Z|-1]. With ``treated_only`` (the headline mode) squared errors
    and ranks pool treated (unit, step) pairs; otherwise control steps enter
    the MSE as exact zeros and the overall MSE is the mean over steps.
    """
    if panel.true_blips is None:
        raise ValueError("panel carries no ground-truth blips")
    est = realized_blips(estimator.predict_blip_components(panel), panel.z)
    truth = panel.true_blips
    n, t = truth.shape
    treated = panel.z > 0
    sq = (est - truth) ** 2
    mse_t = np.empty(t)
    sp_t = np.empty(t)
    for j in range(t):
        mask = treated[:, j]
        if treated_only:
            mse_t[j] = sq[mask, j].mean() if mask.any() else float("nan")
        else:
            mse_t[j] = sq[:, j].mean()
        sp_t[j] = (spearman(est[mask, j], truth[mask, j])
                   if mask.sum() >= 2 else float("nan"))
    if treated_only:
        overall_mse = float(sq[treated].mean()) if treated.any() else float("nan")
    else:
        overall_mse = float(mse_t.mean())
    overall_sp = (spearman(est[treated], truth[treated])
                  if treated.sum() >= 2 else float("nan"))
    return EvalReport(mse_per_timepoint=mse_t, overall_mse=overall_mse,
                      spearman_per_timepoint=sp_t, overall_spearman=overall_sp,
                      n_units=n, treated_only=treated_only)
