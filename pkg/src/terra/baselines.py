"""Closed-form recursive residual learners used as classical comparators.

The recursive R-learner walks the horizon backward: at each step it fits the
outcome-mean and propensity nuisances on history features, residualizes, and
solves the blip regression in closed form, then peels the fitted blips off
the outcome before moving one step earlier. With oracle propensities the
fitted blips are consistent whenever the truth lies in the feature span,
regardless of how wrong the outcome model is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .snmm import Panel

__all__ = [
    "RegressorKind",
    "SingularSystemError",
    "LinearModel",
    "fit_linear",
    "history_features",
    "identity_features",
    "fit_recursive_rlearner",
    "RecursiveRLearner",
]

PROPENSITY_CLIP = (0.01, 0.99)


class SingularSystemError(np.linalg.LinAlgError):
    """Normal equations are singular; a ridge penalty would regularize them."""


@dataclass(frozen=True)
class RegressorKind:
    """Which closed-form regressor to use: plain OLS or ridge(alpha)."""

    kind: str
    alpha: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ols", "ridge"):
            raise ValueError(f"unknown regressor kind {self.kind!r}")
        if self.alpha < 0:
            raise ValueError("ridge alpha must be nonnegative")
        if self.kind == "ols" and self.alpha != 0:
            raise ValueError("ols takes no penalty")


def fit_linear(x: np.ndarray, y: np.ndarray, kind: RegressorKind) -> "LinearModel":
    """Least squares with an unpenalized intercept, by SPD factorization.

    Ridge penalizes the slopes only, so alpha -> inf drives the slopes to
    zero and the intercept to the mean of y.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, d = x.shape
    if kind.kind == "ols" and n <= d:
        raise SingularSystemError(
            f"ols needs n > d (got n={n}, d={d}); use ridge")
    x_mean = x.mean(axis=0)
    y_mean = y.mean()
    xc = x - x_mean
    gram = xc.T @ xc
    if kind.kind == "ridge":
        gram = gram + kind.alpha * np.eye(d)
    try:
        factor = cho_factor(gram)
    except np.linalg.LinAlgError as err:
        raise SingularSystemError(
            "singular normal equations; use ridge") from err
    coef = cho_solve(factor, xc.T @ (y - y_mean))
    return LinearModel(coef=coef, intercept=float(y_mean - x_mean @ coef))


@dataclass
class LinearModel:
    coef: np.ndarray
    intercept: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x) @ self.coef + self.intercept


def history_features(panel: Panel, j: int) -> np.ndarray:
    """Default nuisance features: current covariates plus the previous
    treatment's non-control one-hot (absent at the first step)."""
    x = panel.x[:, j, :]
    if j == 0:
        return x
    prev = np.zeros((panel.n_units, panel.n_treatments - 1))
    treated = panel.z[:, j - 1] > 0
    prev[treated, panel.z[treated, j - 1] - 1] = 1.0
    return np.hstack([x, prev])


def identity_features(panel: Panel, j: int) -> np.ndarray:
    """Raw current covariates only."""
    return panel.x[:, j, :]


class RecursiveRLearner:
    """Per-step, per-arm linear blip models fitted by backward recursion."""

    def __init__(self, kind: RegressorKind,
                 feature_map: Callable[[Panel, int], np.ndarray],
                 horizon: int, n_treatments: int):
        self.kind = kind
        self.feature_map = feature_map
        self.horizon = horizon
        self.n_treatments = n_treatments
        self.arm_models: list[list[LinearModel | None]] = [
            [None] * (n_treatments - 1) for _ in range(horizon)]
        self.degenerate: set[tuple[int, int]] = set()

    def blip_coefficients(self, j: int, arm: int) -> LinearModel | None:
        """Fitted model for 0-based step j, non-control arm (1-based)."""
        return self.arm_models[j][arm - 1]

    def predict_blip_components(self, panel: Panel) -> np.ndarray:
        n, t = panel.n_units, panel.horizon
        if t != self.horizon or panel.n_treatments != self.n_treatments:
            raise ValueError("panel dimensions disagree with the fitted model")
        out = np.zeros((n, t, self.n_treatments - 1))
        for j in range(t):
            feats = self.feature_map(panel, j)
            for arm in range(1, self.n_treatments):
                m = self.arm_models[j][arm - 1]
                if m is not None:
                    out[:, j, arm - 1] = m.predict(feats)
        return out


def _solve_blip_regression(u_tilde: np.ndarray, i_tilde: np.ndarray,
                           feats: np.ndarray, kind: RegressorKind,
                           active_arms: list[int]) -> dict[int, LinearModel]:
    """Closed-form minimizer of the residual-on-residual squared loss.

    Design columns are each active arm's residualized indicator times the
    (feature, 1) block; per-arm intercept columns stay unpenalized under
    ridge.
    """
    n, d = feats.shape
    blocks = []
    penalty = []
    for arm in active_arms:
        w = i_tilde[:, arm - 1][:, None]
        blocks.append(w * np.hstack([feats, np.ones((n, 1))]))
        penalty.extend([1.0] * d + [0.0])
    design = np.hstack(blocks)
    if kind.kind == "ols" and n <= design.shape[1]:
        raise SingularSystemError(
            "ols blip regression needs more units than columns; use ridge")
    gram = design.T @ design
    if kind.kind == "ridge":
        gram = gram + kind.alpha * np.diag(penalty)
    try:
        factor = cho_factor(gram)
    except np.linalg.LinAlgError as err:
        raise SingularSystemError(
            "singular blip regression; use ridge") from err
    theta = cho_solve(factor, design.T @ u_tilde)
    models = {}
    for pos, arm in enumerate(active_arms):
        seg = theta[pos * (d + 1):(pos + 1) * (d + 1)]
        models[arm] = LinearModel(coef=seg[:d], intercept=float(seg[d]))
    return models


def fit_recursive_rlearner(panel: Panel, kind: RegressorKind,
                           feature_map: Callable[[Panel, int], np.ndarray] | None = None,
                           oracle_propensities: np.ndarray | None = None,
                           ) -> RecursiveRLearner:
    """Fit blip models for every step, walking the horizon backward.

    ``feature_map`` parameterizes the blip model; nuisances always use the
    default history features. ``oracle_propensities`` of shape [N, T, |Z|]
    replaces the fitted linear-probability propensities when supplied. Arms
    that are never assigned at a step (or whose residualized indicator has
    zero variance) are flagged degenerate and their blip left at zero.
    """
    n, t, _, k = panel.dims
    feature_map = feature_map or history_features
    learner = RecursiveRLearner(kind, feature_map, t, k)
    u_next = panel.y.copy()
    for j in range(t - 1, -1, -1):
        nuis = history_features(panel, j)
        mu_hat = fit_linear(nuis, u_next, kind).predict(nuis)
        if oracle_propensities is not None:
            e_hat = oracle_propensities[:, j, 1:]
        else:
            e_hat = np.empty((n, k - 1))
            for arm in range(1, k):
                target = (panel.z[:, j] == arm).astype(np.float64)
                raw = fit_linear(nuis, target, kind).predict(nuis)
                e_hat[:, arm - 1] = np.clip(raw, *PROPENSITY_CLIP)
        onehot = panel.realized_indicators(j)[:, 1:]
        i_tilde = onehot - e_hat
        u_tilde = u_next - mu_hat
        active = []
        for arm in range(1, k):
            if onehot[:, arm - 1].sum() == 0 or i_tilde[:, arm - 1].std() == 0:
                learner.degenerate.add((j, arm))
            else:
                active.append(arm)
        if active:
            feats = feature_map(panel, j)
            models = _solve_blip_regression(u_tilde, i_tilde, feats, kind, active)
            for arm, m in models.items():
                learner.arm_models[j][arm - 1] = m
        g_hat = np.zeros(n)
        feats = feature_map(panel, j)
        for arm in range(1, k):
            m = learner.arm_models[j][arm - 1]
            if m is None:
                continue
            mask = panel.z[:, j] == arm
            if mask.any():
                g_hat[mask] = m.predict(feats[mask])
        u_next = u_next - g_hat
    return learner
