"""Structural nested mean model machinery over longitudinal panels.

Data layout convention used across the package: arrays are indexed by a
0-based step ``j = 0..T-1``. Step ``j`` bundles the covariate vector observed
just before the j-th treatment (``x[:, j]``) and the treatment received at
that step (``z[:, j]``, control coded 0). The final outcome ``y`` is observed
once, after the last step. Where prose elsewhere speaks of 1-based time
``t``, the mapping is ``t = j + 1``.

Blipped outcomes carry one extra slot: ``u[:, j]`` is the outcome with all
realized blips from step ``j`` onward subtracted, so ``u[:, T]`` is the raw
outcome itself.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

__all__ = [
    "Trajectory",
    "Panel",
    "recursive_blip",
    "recursive_blip_closed_form",
    "residualize",
    "blip_loss",
    "estimating_equation",
    "EstimatingEquationResult",
    "proposition1_check",
    "Prop1Result",
    "write_panel_csv",
    "read_panel_csv",
]


@dataclass
class Trajectory:
    """One unit's history: covariates [T, p], treatments [T], final outcome.

    ``true_blips`` optionally carries the generator's blip values at the
    realized history (exactly 0 at control steps).
    """

    x: np.ndarray
    z: np.ndarray
    y: float
    true_blips: np.ndarray | None = None


class Panel:
    """A set of trajectories with homogeneous dimensions, stored stacked.

    Attributes:
        x: [N, T, p] covariates.
        z: [N, T] integer treatments, control = 0.
        y: [N] final outcomes.
        n_treatments: number of treatment levels |Z| (including control).
        true_blips: optional [N, T] realized ground-truth blips.
    """

    def __init__(self, x: np.ndarray, z: np.ndarray, y: np.ndarray,
                 n_treatments: int, true_blips: np.ndarray | None = None):
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.int64)
        y = np.asarray(y, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError("x must be [N, T, p]")
        n, t, _ = x.shape
        if z.shape != (n, t) or y.shape != (n,):
            raise ValueError("inconsistent panel dimensions")
        if n_treatments < 2:
            raise ValueError("need at least control plus one treatment level")
        if z.min() < 0 or z.max() >= n_treatments:
            raise ValueError("treatment codes out of range")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
            raise ValueError("covariates and outcomes must be finite")
        self.x = x
        self.z = z
        self.y = y
        self.n_treatments = int(n_treatments)
        if true_blips is not None:
            true_blips = np.asarray(true_blips, dtype=np.float64)
            if true_blips.shape != (n, t):
                raise ValueError("true_blips must be [N, T]")
        self.true_blips = true_blips

    @property
    def n_units(self) -> int:
        return self.x.shape[0]

    @property
    def horizon(self) -> int:
        return self.x.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.x.shape[2]

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(N, T, p, |Z|)."""
        return (self.n_units, self.horizon, self.n_covariates, self.n_treatments)

    def trajectory(self, i: int) -> Trajectory:
        tb = None if self.true_blips is None else self.true_blips[i]
        return Trajectory(self.x[i], self.z[i], float(self.y[i]), tb)

    def subset(self, idx) -> "Panel":
        tb = None if self.true_blips is None else self.true_blips[idx]
        return Panel(self.x[idx], self.z[idx], self.y[idx], self.n_treatments, tb)

    @classmethod
    def from_trajectories(cls, trajectories: list[Trajectory],
                          n_treatments: int) -> "Panel":
        x = np.stack([tr.x for tr in trajectories])
        z = np.stack([tr.z for tr in trajectories])
        y = np.array([tr.y for tr in trajectories])
        blips = None
        if all(tr.true_blips is not None for tr in trajectories):
            blips = np.stack([tr.true_blips for tr in trajectories])
        return cls(x, z, y, n_treatments, blips)

    def realized_indicators(self, j: int) -> np.ndarray:
        """One-hot [N, |Z|] of the realized treatment at step j."""
        ind = np.zeros((self.n_units, self.n_treatments))
        ind[np.arange(self.n_units), self.z[:, j]] = 1.0
        return ind


def _realized_components(panel: Panel, g: np.ndarray) -> np.ndarray:
    """[N, T] blip value at the realized arm (0 at control steps)."""
    n, t = panel.z.shape
    if g.shape != (n, t, panel.n_treatments - 1):
        raise ValueError(
            f"blip evaluation must be [N, T, {panel.n_treatments - 1}], got {g.shape}")
    realized = np.zeros((n, t))
    treated = panel.z > 0
    rows, cols = np.nonzero(treated)
    realized[rows, cols] = g[rows, cols, panel.z[rows, cols] - 1]
    return realized


def recursive_blip(panel: Panel, g: np.ndarray) -> np.ndarray:
    """Backward recursion of blipped outcomes.

    ``g`` holds blip-component values [N, T, |Z|-1] at realized histories for
    every non-control arm. Returns ``u`` of shape [N, T+1] with
    ``u[:, T] = y`` and ``u[:, j] = u[:, j+1] - g_realized[:, j]``.
    """
    n, t = panel.z.shape
    realized = _realized_components(panel, g)
    u = np.empty((n, t + 1))
    u[:, t] = panel.y
    for j in range(t - 1, -1, -1):
        u[:, j] = u[:, j + 1] - realized[:, j]
    return u


def recursive_blip_closed_form(panel: Panel, g: np.ndarray) -> np.ndarray:
    """Same as :func:`recursive_blip` via the suffix-sum identity."""
    realized = _realized_components(panel, g)
    suffix = np.cumsum(realized[:, ::-1], axis=1)[:, ::-1]
    u = np.empty((panel.n_units, panel.horizon + 1))
    u[:, -1] = panel.y
    u[:, :-1] = panel.y[:, None] - suffix
    return u


def residualize(u_next: np.ndarray, mu: np.ndarray, z_onehot: np.ndarray,
                e: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Orthogonalize the blipped outcome and the treatment indicators.

    Returns ``(u_tilde, i_tilde)`` where ``u_tilde = u_next - mu`` and
    ``i_tilde[:, z-1] = 1{Z=z} - e^z`` for each non-control arm z.
    """
    u_next = np.asarray(u_next, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    z_onehot = np.asarray(z_onehot, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if z_onehot.shape != e.shape:
        raise ValueError("indicator and propensity shapes disagree")
    u_tilde = u_next - mu
    i_tilde = z_onehot[:, 1:] - e[:, 1:]
    return u_tilde, i_tilde


def blip_loss(u_tilde: np.ndarray, i_tilde: np.ndarray, g: np.ndarray,
              weights: np.ndarray | None = None) -> float:
    """Weighted mean of the squared residual-on-residual regression error.

    Weights are normalized to sum to one within the batch, so uniform
    weights reduce to a plain mean and rescaling all weights is a no-op.
    """
    u_tilde = np.asarray(u_tilde, dtype=np.float64)
    resid = u_tilde - (np.asarray(i_tilde) * np.asarray(g)).sum(axis=1)
    if weights is None:
        return float((resid * resid).mean())
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if total <= 0:
        raise ValueError("weights must have positive sum")
    return float((weights / total * resid * resid).sum())


@dataclass
class EstimatingEquationResult:
    """Empirical moment means with their standard errors, one per component."""

    mean: np.ndarray
    se: np.ndarray
    n_units: int

    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.mean) / self.se))


def estimating_equation(panel: Panel,
                        theta_evaluator: Callable[[Panel, int], np.ndarray],
                        h_evaluator: Callable[[Panel, int], np.ndarray] | None,
                        mu_evaluator: Callable[[Panel, int], np.ndarray],
                        e_evaluator: Callable[[Panel, int], np.ndarray],
                        j: int) -> EstimatingEquationResult:
    """Empirical moment of the orthogonalized blip equation at step ``j``.

    This is a testing oracle, not a solver: evaluators supply blip components
    g [N, |Z|-1], instrument h (same shape; defaults to all ones), outcome
    mean mu [N], and propensities e [N, |Z|] at every realized history. One
    moment component is returned per non-control arm, with the mean over
    units and its standard error.
    """
    n, t = panel.z.shape
    g_all = np.stack([theta_evaluator(panel, s) for s in range(t)], axis=1)
    u = recursive_blip(panel, g_all)
    mu = np.asarray(mu_evaluator(panel, j), dtype=np.float64)
    e = np.asarray(e_evaluator(panel, j), dtype=np.float64)
    u_tilde, i_tilde = residualize(u[:, j + 1], mu, panel.realized_indicators(j), e)
    g_j = g_all[:, j, :]
    if h_evaluator is None:
        h = np.ones_like(g_j)
    else:
        h = np.asarray(h_evaluator(panel, j), dtype=np.float64)
    resid = u_tilde - (i_tilde * g_j).sum(axis=1)
    components = i_tilde * h * resid[:, None]
    mean = components.mean(axis=0)
    se = components.std(axis=0, ddof=1) / np.sqrt(n)
    return EstimatingEquationResult(mean=mean, se=se, n_units=n)


@dataclass
class Prop1Result:
    """Stratified comparison of blipped-outcome means vs control simulation."""

    max_abs_deviation: float
    max_deviation_se: float
    strata: list[dict] = field(default_factory=list)

    def all_within(self, z_mult: float = 4.0) -> bool:
        return all(abs(s["deviation"]) <= z_mult * s["se"] for s in self.strata)


def proposition1_check(panel: Panel, g: np.ndarray, j: int,
                       simulate_control: Callable[[int, np.random.Generator], float],
                       rng: np.random.Generator,
                       min_stratum_size: int = 50) -> Prop1Result:
    """Test that blipped outcomes behave like control continuations.

    Units are stratified by the realized treatment prefix ``z[:, :j]``
    (covariates are marginalized by Monte Carlo). Within each stratum the
    mean of ``u[:, j]`` is compared against the mean of per-unit simulated
    outcomes under control from step ``j`` onward; the comparison is paired,
    so the reported standard error is that of the per-unit difference.

    ``simulate_control(i, rng)`` must draw one counterfactual outcome for
    unit ``i`` holding its realized history through step ``j - 1`` fixed.
    Strata smaller than ``min_stratum_size`` are skipped with a warning.
    """
    n, t = panel.z.shape
    if not 0 <= j < t:
        raise ValueError(f"step index {j} outside [0, {t})")
    u = recursive_blip(panel, g)[:, j]
    cf = np.array([simulate_control(i, rng) for i in range(n)])
    prefix = panel.z[:, :j]
    # encode each prefix as a single integer key
    keys = np.zeros(n, dtype=np.int64)
    for s in range(j):
        keys = keys * panel.n_treatments + prefix[:, s]
    strata = []
    for key in np.unique(keys):
        mask = keys == key
        size = int(mask.sum())
        if size < min_stratum_size:
            warnings.warn(
                f"stratum {key} skipped: only {size} units", stacklevel=2)
            continue
        diff = u[mask] - cf[mask]
        strata.append({
            "prefix_key": int(key),
            "n": size,
            "deviation": float(diff.mean()),
            "se": float(diff.std(ddof=1) / np.sqrt(size)),
        })
    if not strata:
        raise ValueError("no stratum met the minimum size")
    worst = max(strata, key=lambda s: abs(s["deviation"]))
    return Prop1Result(max_abs_deviation=abs(worst["deviation"]),
                       max_deviation_se=worst["se"], strata=strata)


# --- panel serialization --------------------------------------------------

# CSV schema: one row per (unit, step). Columns are
#   unit, t, z, x_1..x_p, y [, true_blip]
# with t 1-based in the file and y repeated on every row of a unit.


def write_panel_csv(panel: Panel, path: str | Path) -> None:
    path = Path(path)
    n, t, p, _ = panel.dims
    header = ["unit", "t", "z"] + [f"x_{i + 1}" for i in range(p)] + ["y"]
    if panel.true_blips is not None:
        header.append("true_blip")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(n):
            for j in range(t):
                row = [i, j + 1, int(panel.z[i, j])]
                row += [repr(float(v)) for v in panel.x[i, j]]
                row.append(repr(float(panel.y[i])))
                if panel.true_blips is not None:
                    row.append(repr(float(panel.true_blips[i, j])))
                writer.writerow(row)


def read_panel_csv(path: str | Path, n_treatments: int | None = None) -> Panel:
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        x_cols = [c for c in header if c.startswith("x_")]
        p = len(x_cols)
        has_blip = "true_blip" in header
        rows = list(reader)
    units = sorted({int(r[0]) for r in rows})
    t = max(int(r[1]) for r in rows)
    unit_index = {u: i for i, u in enumerate(units)}
    n = len(units)
    x = np.zeros((n, t, p))
    z = np.zeros((n, t), dtype=np.int64)
    y = np.zeros(n)
    blips = np.zeros((n, t)) if has_blip else None
    for r in rows:
        i = unit_index[int(r[0])]
        j = int(r[1]) - 1
        z[i, j] = int(r[2])
        x[i, j] = [float(v) for v in r[3:3 + p]]
        y[i] = float(r[3 + p])
        if has_blip:
            blips[i, j] = float(r[4 + p])
    if n_treatments is None:
        n_treatments = int(z.max()) + 1 if z.max() > 0 else 2
    return Panel(x, z, y, n_treatments, blips)
