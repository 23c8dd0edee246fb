"""Seeded generators for the simulation scenarios and the semi-synthetic DGP.

Every generator emits a :class:`~terra.snmm.Panel` together with a
:class:`GroundTruth` holding the realized blip values, the blip components
for every non-control arm, and the assignment probabilities actually used,
so downstream evaluation never depends on re-deriving the mechanism.

Units are generated from independent per-unit RNG streams keyed by
``(seed, unit)``: generating units in parallel or in any order yields the
same panel as the sequential loop.

Step indexing is 0-based throughout (``j = 0..T-1``); time-varying
coefficients are evaluated at ``j`` directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .snmm import Panel

__all__ = [
    "ScenarioSpec",
    "GroundTruth",
    "scenario_spec",
    "generate",
    "covariate_process",
    "control_continuation_simulator",
    "true_blip_evaluator",
    "true_propensity_evaluator",
    "generator_manifest",
    "SCENARIO_KINDS",
]

SCENARIO_KINDS = ("S1", "S2", "S3", "semisynthetic")

# Shared covariate evolution for S1-S3: a treatment-shifted AR(1) so that
# later covariates are genuinely post-treatment.
AR_COEF = 0.5
TREATMENT_SHIFT = 0.2
COVARIATE_NOISE_SD = 0.5

# Semi-synthetic surrogate distribution parameters (echoed in the manifest).
INTEREST_GEOM_P = 0.3
INTEREST_MAX = 10
GEO_BETA = (2.0, 5.0)
SLOT_LEVELS = (0.25, 0.5, 0.75, 1.0)
CATEGORY_PROBS = (0.4, 0.3, 0.2, 0.1)
FORMAT_SCORE = (0.2, 0.1, -0.1, -0.2)
VISIBILITY_SCORE = (0.3, 0.1, -0.1, -0.3)
BASE_CLICK_RATE = 0.05
BASE_CONV_RATE = 0.005
SEMI_AR_COEF = 0.6
SEMI_FRESH_WEIGHT = 0.4
SEMI_AR_NOISE_SD = 0.1
SEMI_OUTCOME_NOISE_SD = 0.1
CLICK_CLIP = (0.001, 0.5)
CONV_CLIP = (0.001, 0.3)


@dataclass(frozen=True)
class ScenarioSpec:
    """Which DGP to draw from, and at what size."""

    kind: str
    n: int
    t: int = 5
    p: int = 5
    k: int = 2
    noise_sd: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENARIO_KINDS:
            raise ValueError(f"unknown scenario kind {self.kind!r}")
        if self.n < 1 or self.t < 1:
            raise ValueError("need n >= 1 and t >= 1")
        if self.kind in ("S1", "S2", "S3"):
            if self.p != 5 or self.k != 2:
                raise ValueError(f"{self.kind} is defined for p=5, |Z|=2")
            if self.kind == "S3" and self.t != 5:
                raise ValueError("S3 blips are enumerated for exactly 5 steps")
        else:
            if self.p != 9:
                raise ValueError("semisynthetic features are 9-dimensional")
            if self.k < 2:
                raise ValueError("semisynthetic needs at least 2 arms")


def scenario_spec(kind: str, n: int, seed: int = 0, t: int = 5,
                  k: int | None = None, noise_sd: float | None = None) -> ScenarioSpec:
    """Build a spec with per-kind defaults filled in."""
    if kind == "semisynthetic":
        return ScenarioSpec(kind=kind, n=n, t=t, p=9, k=4 if k is None else k,
                            noise_sd=SEMI_OUTCOME_NOISE_SD if noise_sd is None else noise_sd,
                            seed=seed)
    return ScenarioSpec(kind=kind, n=n, t=t, p=5, k=2 if k is None else k,
                        noise_sd=1.0 if noise_sd is None else noise_sd, seed=seed)


@dataclass
class GroundTruth:
    """Generator-side truth recorded alongside a panel.

    gamma: [N, T] blip at the realized history (0 at control steps).
    propensity: [N, T, |Z|] assignment probabilities used by the generator.
    blip_components: [N, T, |Z|-1] blip value of each non-control arm at the
        realized history.
    step_scores: [N, T] per-step outcome contribution (blip + baseline).
    outcome_noise: [N] noise added on top of the step scores.
    """

    gamma: np.ndarray
    propensity: np.ndarray
    blip_components: np.ndarray
    step_scores: np.ndarray
    outcome_noise: np.ndarray


def _unit_rng(seed: int, unit: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, unit]))


def covariate_process(x_prev: np.ndarray, z: int,
                      rng: np.random.Generator) -> np.ndarray:
    """One covariate transition for S1-S3: AR(1) plus a treatment shift."""
    return (AR_COEF * x_prev + TREATMENT_SHIFT * z
            + rng.normal(0.0, COVARIATE_NOISE_SD, size=x_prev.shape))


def _sigmoid(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


class _Scenario1:
    """Homogeneous linear blips with a fixed slope vector."""

    beta = np.array([0.5, 0.3, -0.2, 0.0, 0.0])

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec

    def blip_value(self, j: int, x: np.ndarray) -> float:
        return float(x @ self.beta + 0.1 * (j + 1))

    def treatment_logit(self, j: int, x: np.ndarray, z_prev: int) -> float:
        return float(0.2 * x[0] - 0.1 * x[3] + 0.15 * x[4] + 0.3 * z_prev)

    def baseline(self, j: int, x: np.ndarray) -> float:
        return float(0.4 * x[0] + 0.3 * x[1])

    def blip_carryover(self, j: int, x: np.ndarray) -> float:
        # treating at j shifts every later covariate mean by the decayed
        # treatment shift, which flows into the later baseline terms
        return sum((0.4 + 0.3) * TREATMENT_SHIFT * AR_COEF ** (s - j - 1)
                   for s in range(j + 1, self.spec.t))


class _Scenario2:
    """Linear blips whose slopes and intercepts drift over time."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec

    def beta(self, j: int) -> np.ndarray:
        t_grid = self.spec.t
        half = (t_grid - 1) / 2.0
        return np.array([
            0.3 + 0.1 * j,
            0.4 - 0.1 * j,
            -0.2 + 0.1 * math.sin(2.0 * math.pi * j / t_grid),
            0.15 * ((j - half) / half) ** 2,
            0.1 if j < t_grid / 2.0 else -0.1,
        ])

    def blip_value(self, j: int, x: np.ndarray) -> float:
        return float(x @ self.beta(j) + 0.1 * (j + 1))

    def treatment_logit(self, j: int, x: np.ndarray, z_prev: int) -> float:
        time_effect = 0.1 * math.sin(math.pi * j / (self.spec.t - 1))
        persistence = 0.4 - 0.05 * j
        return float(0.2 * x[0] - 0.1 * x[3] + 0.15 * x[4]
                     + time_effect + persistence * z_prev)

    def baseline(self, j: int, x: np.ndarray) -> float:
        return float((j + 2) / self.spec.t * (0.3 * x[0] + 0.1 * x[1]))

    def blip_carryover(self, j: int, x: np.ndarray) -> float:
        return sum((s + 2) / self.spec.t * (0.3 + 0.1)
                   * TREATMENT_SHIFT * AR_COEF ** (s - j - 1)
                   for s in range(j + 1, self.spec.t))


class _Scenario3:
    """Five structurally different nonlinear blip forms, one per step."""

    def __init__(self, spec: ScenarioSpec):
        self.spec = spec

    def blip_value(self, j: int, x: np.ndarray) -> float:
        x0, x1, x2, x3, x4 = (float(v) for v in x)
        if j == 0:
            return (0.3 * x0 ** 2 + 0.2 * x1 ** 2 + 0.1 * x0 * x1
                    + 0.15 * abs(x2) + 0.1)
        if j == 1:
            return (0.4 * math.sin(x0) + 0.3 * math.cos(x1) + 0.2 * x2
                    + 0.1 * math.tanh(x3) + 0.2)
        if j == 2:
            return (0.3 * max(x0, 0.0) + 0.2 * max(x1, 0.0)
                    + 0.1 * math.exp(min(max(x2, -2.0), 2.0))
                    + 0.15 * math.log(1.0 + abs(x3)) + 0.3)
        if j == 3:
            sign_x3 = (x3 > 0) - (x3 < 0)
            return (0.2 * x0 ** 3 + 0.15 * x1 ** 2 * x2 + 0.1 * x0 * x1 * x2
                    + 0.2 * sign_x3 * x3 ** 2 + 0.1 * x4 ** 2 + 0.4)
        if j == 4:
            return (0.25 * math.sin(x0 ** 2) + 0.2 * math.cos(x1) * x2
                    + 0.15 * max(x3, x4) + 0.1 * min(x0 ** 2, 1.0) + 0.5)
        raise ValueError(f"no blip defined for step {j}")

    def treatment_logit(self, j: int, x: np.ndarray, z_prev: int) -> float:
        return float(0.3 * math.tanh(x[0]) + 0.2 * x[1] ** 2
                     + 0.15 * math.sin(x[2] ** 2) + 0.1 * max(x[3], 0.0)
                     + 0.1 * (j + 1) / self.spec.t
                     + 0.4 * math.tanh(2.0 * z_prev - 1.0))

    def baseline(self, j: int, x: np.ndarray) -> float:
        return float((j + 2) / self.spec.t
                     * (0.2 * math.sin(x[0]) + 0.1 - x[1] ** 2))

    def blip_carryover(self, j: int, x: np.ndarray) -> float:
        """Exact mean shift of the later nonlinear baseline terms.

        Later covariates are Gaussian given the current ones, so the shifted
        sine and square terms have closed-form expectations:
        E sin N(m, v) = sin(m) exp(-v/2) and E N(m, v)^2 = m^2 + v.
        """
        total = 0.0
        for s in range(j + 1, self.spec.t):
            lag = s - j
            delta = TREATMENT_SHIFT * AR_COEF ** (lag - 1)
            m0 = AR_COEF ** lag * float(x[0])
            m1 = AR_COEF ** lag * float(x[1])
            var = COVARIATE_NOISE_SD ** 2 * (1.0 - AR_COEF ** (2 * lag)) \
                / (1.0 - AR_COEF ** 2)
            damp = math.exp(-var / 2.0)
            total += (s + 2) / self.spec.t * (
                0.2 * damp * (math.sin(m0 + delta) - math.sin(m0))
                - (2.0 * m1 * delta + delta ** 2))
        return total


_SCENARIOS = {"S1": _Scenario1, "S2": _Scenario2, "S3": _Scenario3}


def _generate_synthetic(spec: ScenarioSpec) -> tuple[Panel, GroundTruth]:
    scen = _SCENARIOS[spec.kind](spec)
    n, t, p = spec.n, spec.t, spec.p
    x = np.zeros((n, t, p))
    z = np.zeros((n, t), dtype=np.int64)
    y = np.zeros(n)
    gamma = np.zeros((n, t))
    propensity = np.zeros((n, t, 2))
    components = np.zeros((n, t, 1))
    scores = np.zeros((n, t))
    noise = np.zeros(n)
    for i in range(n):
        rng = _unit_rng(spec.seed, i)
        x[i, 0] = rng.normal(0.0, 1.0, p)
        z_prev = 0
        for j in range(t):
            pz = _sigmoid(scen.treatment_logit(j, x[i, j], z_prev))
            zj = int(rng.random() < pz)
            z[i, j] = zj
            propensity[i, j] = (1.0 - pz, pz)
            g_direct = scen.blip_value(j, x[i, j])
            # the true incremental effect adds the carryover of the covariate
            # shift into later baseline terms; the outcome decomposition
            # (step_scores) keeps the direct term only
            components[i, j, 0] = g_direct + scen.blip_carryover(j, x[i, j])
            gamma[i, j] = components[i, j, 0] if zj == 1 else 0.0
            scores[i, j] = (g_direct if zj == 1 else 0.0) \
                + scen.baseline(j, x[i, j])
            if j + 1 < t:
                x[i, j + 1] = covariate_process(x[i, j], zj, rng)
            z_prev = zj
        noise[i] = rng.normal(0.0, spec.noise_sd)
        y[i] = scores[i].sum() + noise[i]
    panel = Panel(x, z, y, n_treatments=2, true_blips=gamma)
    return panel, GroundTruth(gamma, propensity, components, scores, noise)


# --- semi-synthetic ad-journey generator ----------------------------------


def _draw_interest(rng) -> float:
    """Truncated geometric on {1..max} via inverse cdf."""
    z_mass = 1.0 - (1.0 - INTEREST_GEOM_P) ** INTEREST_MAX
    u = rng.random()
    v = math.ceil(math.log1p(-u * z_mass) / math.log(1.0 - INTEREST_GEOM_P))
    return float(min(max(v, 1), INTEREST_MAX))


def _draw_category(rng) -> float:
    u = rng.random()
    acc = 0.0
    for level, prob in enumerate(CATEGORY_PROBS):
        acc += prob
        if u < acc:
            return float(level)
    return float(len(CATEGORY_PROBS) - 1)


def _semi_baseline_draw(feature: int, rng) -> float:
    """Fresh draw from the surrogate distribution of feature index 3..6."""
    if feature in (3, 4):
        return SLOT_LEVELS[rng.integers(0, len(SLOT_LEVELS))]
    return _draw_category(rng)


def _category_index(value: float) -> int:
    return int(min(max(round(value), 0), len(CATEGORY_PROBS) - 1))


def semi_arm_scale(arm: int) -> float:
    """Per-arm blip scaling; arm is the 0-based active-arm index >= 1."""
    return max(0.4, 1.0 - 0.2 * arm)


def semi_beta(j: int, t_horizon: int) -> np.ndarray:
    half = t_horizon / 2.0
    return np.array([
        0.3 + 0.1 * j,
        0.4 - 0.05 * j,
        -0.2 + 0.1 * math.sin(2.0 * math.pi * j / t_horizon),
        0.15 * ((j - half) / half) ** 2,
        -0.1 if j < half else 0.1,
    ])


def _semi_features_phi(x_row: np.ndarray, cum_clicks: int, j: int) -> np.ndarray:
    """Engineered features: intensity, geo, format, visibility, click rate."""
    return np.array([
        (x_row[0] - 5.5) / 3.0,
        0.6 * (x_row[1] - 0.3) + 0.4 * (x_row[2] - 0.3),
        FORMAT_SCORE[_category_index(x_row[5])],
        VISIBILITY_SCORE[_category_index(x_row[6])],
        cum_clicks / (j + 1),
    ])


def _semi_baseline_term(phi: np.ndarray, j: int, t_horizon: int) -> float:
    return (j + 1) / t_horizon * (0.3 * phi[0] + 0.1 * phi[1])


def _generate_semisynthetic(spec: ScenarioSpec) -> tuple[Panel, GroundTruth]:
    n, t, p, k = spec.n, spec.t, spec.p, spec.k
    x = np.zeros((n, t, p))
    z = np.zeros((n, t), dtype=np.int64)
    y = np.zeros(n)
    gamma = np.zeros((n, t))
    propensity = np.full((n, t, k), 1.0 / k)
    components = np.zeros((n, t, k - 1))
    scores = np.zeros((n, t))
    noise = np.zeros(n)
    for i in range(n):
        rng = _unit_rng(spec.seed, i)
        base = np.zeros(p)
        base[0] = _draw_interest(rng)
        base[1] = rng.beta(*GEO_BETA)
        base[2] = rng.beta(*GEO_BETA)
        for f in range(3, 7):
            base[f] = _semi_baseline_draw(f, rng)
        cum_clicks = 0
        cum_convs = 0
        row = base.copy()
        for j in range(t):
            if j > 0:
                for f in range(3, 7):
                    fresh = _semi_baseline_draw(f, rng)
                    row[f] = (SEMI_AR_COEF * row[f] + SEMI_FRESH_WEIGHT * fresh
                              + rng.normal(0.0, SEMI_AR_NOISE_SD))
            row[7] = math.log1p(cum_clicks)
            row[8] = math.log1p(cum_convs)
            x[i, j] = row
            zj = int(rng.integers(0, k))
            z[i, j] = zj
            phi = _semi_features_phi(row, cum_clicks, j)
            lin = float(phi @ semi_beta(j, t) + 0.1 * (j + 1))
            for arm in range(1, k):
                components[i, j, arm - 1] = semi_arm_scale(arm) * lin
            gamma[i, j] = components[i, j, zj - 1] if zj > 0 else 0.0
            scores[i, j] = gamma[i, j] + _semi_baseline_term(phi, j, t)
            p_click = min(max(BASE_CLICK_RATE + 0.1 * max(0.0, scores[i, j]),
                              CLICK_CLIP[0]), CLICK_CLIP[1])
            clicked = int(rng.random() < p_click)
            converted = 0
            if clicked:
                p_conv = min(max(BASE_CONV_RATE / BASE_CLICK_RATE
                                 + 0.05 * max(0.0, scores[i, j]),
                                 CONV_CLIP[0]), CONV_CLIP[1])
                converted = int(rng.random() < p_conv)
            cum_clicks += clicked
            cum_convs += converted
        noise[i] = rng.normal(0.0, spec.noise_sd)
        y[i] = scores[i].sum() + noise[i]
    panel = Panel(x, z, y, n_treatments=k, true_blips=gamma)
    return panel, GroundTruth(gamma, propensity, components, scores, noise)


def generate(spec: ScenarioSpec) -> tuple[Panel, GroundTruth]:
    """Draw a panel plus ground truth from the requested DGP."""
    if spec.kind == "semisynthetic":
        return _generate_semisynthetic(spec)
    return _generate_synthetic(spec)


# --- counterfactual continuation -------------------------------------------


def control_continuation_simulator(spec: ScenarioSpec, panel: Panel,
                                   gt: GroundTruth, from_step: int,
                                   ) -> Callable[[int, np.random.Generator], float]:
    """Simulator of outcomes under control from ``from_step`` onward.

    The returned callable draws one counterfactual outcome for unit ``i``:
    realized treatments, covariates, and blips are held fixed strictly
    before ``from_step``; treatments from ``from_step`` on are forced to
    control, covariates re-evolve accordingly, and fresh outcome noise is
    drawn.
    """
    t = spec.t
    if not 0 <= from_step <= t:
        raise ValueError("from_step outside the horizon")
    if spec.kind == "semisynthetic":
        def simulate_semi(i: int, rng: np.random.Generator) -> float:
            phi_fixed = _semi_features_phi(panel.x[i, 0], 0, 0)
            total = float(gt.step_scores[i, :from_step].sum())
            for j in range(from_step, t):
                total += _semi_baseline_term(phi_fixed, j, t)
            return total + rng.normal(0.0, spec.noise_sd)
        return simulate_semi

    scen = _SCENARIOS[spec.kind](spec)

    def simulate(i: int, rng: np.random.Generator) -> float:
        # realized prefix contributes its stored per-step scores; from
        # from_step on, treatments are control, so only baselines remain,
        # evaluated on a freshly evolved covariate path
        x_path = panel.x[i].copy()
        for j in range(from_step + 1, t):
            x_path[j] = covariate_process(x_path[j - 1], 0, rng)
        total = float(gt.step_scores[i, :from_step].sum())
        for j in range(from_step, t):
            total += scen.baseline(j, x_path[j])
        return total + rng.normal(0.0, spec.noise_sd)

    return simulate


def true_blip_evaluator(gt: GroundTruth) -> Callable[[Panel, int], np.ndarray]:
    """Evaluator over ground-truth blip components, shaped for the oracles."""
    def evaluate(panel: Panel, j: int) -> np.ndarray:
        return gt.blip_components[:, j, :]
    return evaluate


def true_propensity_evaluator(gt: GroundTruth) -> Callable[[Panel, int], np.ndarray]:
    def evaluate(panel: Panel, j: int) -> np.ndarray:
        return gt.propensity[:, j, :]
    return evaluate


def generator_manifest(spec: ScenarioSpec) -> dict:
    """Every tunable the generator used, for the run manifest."""
    manifest = {
        "kind": spec.kind,
        "n": spec.n,
        "t": spec.t,
        "p": spec.p,
        "k": spec.k,
        "noise_sd": spec.noise_sd,
        "seed": spec.seed,
    }
    if spec.kind in ("S1", "S2", "S3"):
        manifest.update({
            "x0_distribution": "normal(0, 1) per coordinate",
            "covariate_ar_coef": AR_COEF,
            "covariate_treatment_shift": TREATMENT_SHIFT,
            "covariate_noise_sd": COVARIATE_NOISE_SD,
        })
    else:
        manifest.update({
            "interest_geometric_p": INTEREST_GEOM_P,
            "interest_max": INTEREST_MAX,
            "geo_beta_params": list(GEO_BETA),
            "slot_levels": list(SLOT_LEVELS),
            "category_probs": list(CATEGORY_PROBS),
            "format_score_map": list(FORMAT_SCORE),
            "visibility_score_map": list(VISIBILITY_SCORE),
            "base_click_rate": BASE_CLICK_RATE,
            "base_conversion_rate": BASE_CONV_RATE,
            "ar_coef": SEMI_AR_COEF,
            "ar_fresh_weight": SEMI_FRESH_WEIGHT,
            "ar_noise_sd": SEMI_AR_NOISE_SD,
            "click_prob_clip": list(CLICK_CLIP),
            "conversion_prob_clip": list(CONV_CLIP),
            "intensity_centering": "(interest - 5.5) / 3",
            "geo_feature": "0.6*(region - 0.3) + 0.4*(city - 0.3)",
            "past_click_rate": "cumulative clicks before step / (step + 1)",
        })
    return manifest
