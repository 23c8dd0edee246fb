"""Blipped-outcome machinery and its statistical oracles."""

import numpy as np
import pytest

from terra.datagen import (control_continuation_simulator, generate,
                           scenario_spec, true_blip_evaluator,
                           true_propensity_evaluator)
from terra.snmm import (Panel, Trajectory, blip_loss, estimating_equation,
                        proposition1_check, read_panel_csv, recursive_blip,
                        recursive_blip_closed_form, residualize,
                        write_panel_csv)


def toy_panel():
    """T=2 binary panel with hand-checkable outcomes."""
    x = np.zeros((3, 2, 1))
    z = np.array([[1, 1], [0, 0], [1, 0]])
    y = np.array([5.0, 4.0, 2.0])
    return Panel(x, z, y, n_treatments=2)


class TestRecursiveBlip:
    def test_zero_blips_leave_outcome(self):
        panel = toy_panel()
        u = recursive_blip(panel, np.zeros((3, 2, 1)))
        assert np.array_equal(u, np.tile(panel.y[:, None], (1, 3)))

    def test_all_control_unit_unchanged(self):
        panel = toy_panel()
        g = np.full((3, 2, 1), 9.0)  # large components, but unit 1 is never treated
        u = recursive_blip(panel, g)
        assert np.array_equal(u[1], [4.0, 4.0, 4.0])

    def test_hand_recursion(self):
        x = np.zeros((1, 2, 1))
        panel = Panel(x, np.array([[1, 1]]), np.array([5.0]), 2)
        g = np.array([[[0.5], [1.5]]])
        u = recursive_blip(panel, g)
        assert np.allclose(u[0], [3.0, 3.5, 5.0])

    def test_closed_form_agrees(self):
        rng = np.random.default_rng(0)
        panel = Panel(rng.normal(size=(50, 4, 2)),
                      rng.integers(0, 3, (50, 4)), rng.normal(size=50), 3)
        g = rng.normal(size=(50, 4, 2))
        assert np.allclose(recursive_blip(panel, g),
                           recursive_blip_closed_form(panel, g), atol=1e-12)

    def test_final_slot_is_outcome_exactly(self):
        rng = np.random.default_rng(1)
        panel = Panel(rng.normal(size=(20, 3, 2)),
                      rng.integers(0, 2, (20, 3)), rng.normal(size=20), 2)
        u = recursive_blip(panel, rng.normal(size=(20, 3, 1)))
        assert np.array_equal(u[:, -1], panel.y)

    def test_linear_in_components_with_indicator_slope(self):
        """du/dg[i, j, arm] is -1 exactly when arm is realized at (i, j)."""
        rng = np.random.default_rng(2)
        panel = Panel(rng.normal(size=(10, 3, 2)),
                      rng.integers(0, 2, (10, 3)), rng.normal(size=10), 2)
        g = rng.normal(size=(10, 3, 1))
        u0 = recursive_blip(panel, g)
        bump = 0.7
        i, j = 4, 1
        g2 = g.copy()
        g2[i, j, 0] += bump
        u1 = recursive_blip(panel, g2)
        expected = u0.copy()
        if panel.z[i, j] == 1:
            expected[i, :j + 1] -= bump
        assert np.allclose(u1, expected, atol=1e-12)

    def test_shape_mismatch_rejected(self):
        panel = toy_panel()
        with pytest.raises(ValueError):
            recursive_blip(panel, np.zeros((3, 2, 2)))


class TestResidualize:
    def test_perfect_mu_zeroes_outcome_residual(self):
        u_next = np.array([1.0, 2.0])
        onehot = np.array([[1.0, 0.0], [0.0, 1.0]])
        e = np.array([[0.5, 0.5], [0.5, 0.5]])
        u_tilde, _ = residualize(u_next, u_next, onehot, e)
        assert np.array_equal(u_tilde, [0.0, 0.0])

    def test_degenerate_oracle_zeroes_indicator_residual(self):
        onehot = np.array([[1.0, 0.0], [0.0, 1.0]])
        _, i_tilde = residualize(np.ones(2), np.zeros(2), onehot, onehot)
        assert np.array_equal(i_tilde, [[0.0], [0.0]])

    def test_hand_values(self):
        u_tilde, i_tilde = residualize(
            np.array([2.0]), np.array([0.5]),
            np.array([[0.0, 1.0]]), np.array([[0.75, 0.25]]))
        assert u_tilde[0] == pytest.approx(1.5)
        assert i_tilde[0, 0] == pytest.approx(0.75)


class TestBlipLoss:
    def test_exact_fit_gives_zero(self):
        i_tilde = np.array([[0.5], [-0.25]])
        g = np.array([[2.0], [4.0]])
        u_tilde = (i_tilde * g).sum(axis=1)
        assert blip_loss(u_tilde, i_tilde, g) == pytest.approx(0.0)

    def test_mean_of_squares(self):
        loss = blip_loss(np.array([1.0, -1.0]), np.array([[1.0], [1.0]]),
                         np.array([[0.0], [0.0]]), np.array([1.0, 1.0]))
        assert loss == pytest.approx(1.0)

    def test_weight_rescaling_invariant(self):
        rng = np.random.default_rng(3)
        u, it, g = rng.normal(size=8), rng.normal(size=(8, 2)), rng.normal(size=(8, 2))
        w = rng.uniform(0.1, 1.0, 8)
        assert blip_loss(u, it, g, w) == pytest.approx(blip_loss(u, it, g, 2 * w))

    def test_zero_iff_zero_residual(self):
        rng = np.random.default_rng(4)
        u, it = rng.normal(size=8), rng.normal(size=(8, 1))
        g = rng.normal(size=(8, 1))
        w = rng.uniform(0.1, 1.0, 8)
        loss = blip_loss(u, it, g, w)
        resid = u - (it * g).sum(axis=1)
        assert (loss == 0.0) == np.allclose(resid, 0.0)
        assert loss > 0


@pytest.fixture(scope="module")
def s1_panel():
    spec = scenario_spec("S1", n=20000, seed=11)
    panel, gt = generate(spec)
    return spec, panel, gt


class TestEstimatingEquation:
    def test_zero_mean_at_truth_with_oracle_propensity(self, s1_panel):
        _, panel, gt = s1_panel
        for j in range(panel.horizon):
            res = estimating_equation(
                panel, true_blip_evaluator(gt), None,
                lambda p, t: np.zeros(p.n_units),  # arbitrary wrong mu
                true_propensity_evaluator(gt), j)
            assert res.max_abs_z() <= 4.0, f"step {j}: z={res.max_abs_z():.2f}"

    def test_zero_mean_with_misspecified_fixed_mu(self, s1_panel):
        _, panel, gt = s1_panel
        res = estimating_equation(
            panel, true_blip_evaluator(gt), None,
            lambda p, t: 2.0 * p.x[:, t, 0],  # fixed, wrong outcome model
            true_propensity_evaluator(gt), panel.horizon - 1)
        assert res.max_abs_z() <= 4.0

    def test_perturbed_blip_detected(self, s1_panel):
        _, panel, gt = s1_panel
        j = 2

        def perturbed(p, t):
            g = gt.blip_components[:, t, :].copy()
            if t == j:
                g = g + 1.0
            return g

        base = estimating_equation(panel, true_blip_evaluator(gt), None,
                                   lambda p, t: np.zeros(p.n_units),
                                   true_propensity_evaluator(gt), j)
        shifted = estimating_equation(panel, perturbed, None,
                                      lambda p, t: np.zeros(p.n_units),
                                      true_propensity_evaluator(gt), j)
        i_tilde = (panel.realized_indicators(j)[:, 1:]
                   - gt.propensity[:, j, 1:])
        expected_shift = -float((i_tilde ** 2).mean())
        assert shifted.mean[0] < 0
        assert abs(shifted.mean[0] / shifted.se[0]) > 10
        assert shifted.mean[0] - base.mean[0] == pytest.approx(expected_shift,
                                                               rel=1e-9)

    @pytest.mark.parametrize("kind", ["S2", "S3", "semisynthetic"])
    def test_zero_mean_at_truth_other_scenarios(self, kind):
        """The stored blip components are the exact blips in every DGP."""
        spec = scenario_spec(kind, n=12000, seed=29)
        panel, gt = generate(spec)
        for j in (0, panel.horizon - 1):
            res = estimating_equation(
                panel, true_blip_evaluator(gt), None,
                lambda p, t: np.zeros(p.n_units),
                true_propensity_evaluator(gt), j)
            assert res.max_abs_z() <= 4.0, f"{kind} step {j}: {res.mean} {res.se}"

    def test_se_shrinks_like_root_n(self):
        small_spec = scenario_spec("S1", n=4000, seed=21)
        big_spec = scenario_spec("S1", n=16000, seed=21)
        results = []
        for spec in (small_spec, big_spec):
            panel, gt = generate(spec)
            results.append(estimating_equation(
                panel, true_blip_evaluator(gt), None,
                lambda p, t: np.zeros(p.n_units),
                true_propensity_evaluator(gt), 1))
        ratio = results[0].se[0] / results[1].se[0]
        assert ratio == pytest.approx(2.0, rel=0.2)


class TestResidualizeFixedPoint:
    def test_residual_means_vanish_with_exact_nuisances(self, s1_panel):
        """With oracle propensities and a cross-fitted stratum mean for mu,
        both residuals have stratum means within 4 standard errors of zero."""
        _, panel, gt = s1_panel
        j = panel.horizon - 1
        u = recursive_blip(panel, gt.blip_components)
        u_next = u[:, j + 1]
        keys = np.zeros(panel.n_units, dtype=np.int64)
        for s in range(j):
            keys = keys * 2 + panel.z[:, s]
        half = panel.n_units // 2
        fit, check = np.arange(half), np.arange(half, panel.n_units)
        for key in np.unique(keys):
            f = fit[keys[fit] == key]
            c = check[keys[check] == key]
            if len(f) < 200 or len(c) < 200:
                continue
            mu = u_next[f].mean()
            u_tilde, i_tilde = residualize(
                u_next[c], np.full(len(c), mu),
                panel.realized_indicators(j)[c], gt.propensity[c, j])
            z_u = abs(u_tilde.mean()) / (u_tilde.std(ddof=1) / np.sqrt(len(c)))
            z_i = abs(i_tilde.mean()) / (i_tilde.std(ddof=1) / np.sqrt(len(c)))
            assert z_u <= 4.0 and z_i <= 4.0


@pytest.fixture(scope="module")
def s1_prop1():
    spec = scenario_spec("S1", n=30000, seed=13)
    panel, gt = generate(spec)
    return spec, panel, gt


class TestProposition1:
    def test_true_blips_match_control_simulation(self, s1_prop1):
        spec, panel, gt = s1_prop1
        j = panel.horizon - 1
        sim = control_continuation_simulator(spec, panel, gt, from_step=j)
        res = proposition1_check(panel, gt.blip_components, j, sim,
                                 np.random.default_rng(99))
        assert res.all_within(4.0), [
            (s["deviation"], s["se"]) for s in res.strata]

    def test_wrong_constant_biases_by_treated_fraction(self, s1_prop1):
        spec, panel, gt = s1_prop1
        j = panel.horizon - 1
        c = 0.5
        g_wrong = gt.blip_components + c
        sim = control_continuation_simulator(spec, panel, gt, from_step=j)
        res = proposition1_check(panel, g_wrong, j, sim,
                                 np.random.default_rng(98))
        res_true = proposition1_check(panel, gt.blip_components, j, sim,
                                      np.random.default_rng(98))
        base = {s["prefix_key"]: s["deviation"] for s in res_true.strata}
        keys = np.zeros(panel.n_units, dtype=np.int64)
        for s in range(j):
            keys = keys * 2 + panel.z[:, s]
        for stratum in res.strata:
            mask = keys == stratum["prefix_key"]
            treated_frac = panel.z[mask, j].mean()
            expected = base[stratum["prefix_key"]] - c * treated_frac
            assert stratum["deviation"] == pytest.approx(expected, abs=1e-9)
            assert abs(stratum["deviation"]) > 4 * stratum["se"]

    def test_all_control_subpopulation_unbiased(self, s1_prop1):
        spec, panel, gt = s1_prop1
        never_treated = (panel.z == 0).all(axis=1)
        sub = panel.subset(never_treated)
        sub_idx = np.nonzero(never_treated)[0]
        j = panel.horizon - 1
        sim_full = control_continuation_simulator(spec, panel, gt, from_step=j)
        sim = lambda i, rng: sim_full(sub_idx[i], rng)
        res = proposition1_check(sub, gt.blip_components[never_treated], j,
                                 sim, np.random.default_rng(97),
                                 min_stratum_size=20)
        assert res.all_within(4.0)

    def test_small_strata_skipped_with_warning(self):
        rng = np.random.default_rng(17)
        z = np.zeros((105, 2), dtype=np.int64)
        z[100:, 0] = 1  # five units form an undersized stratum
        panel = Panel(np.zeros((105, 2, 1)), z, rng.normal(size=105), 2)
        sim = lambda i, r: float(panel.y[i])
        with pytest.warns(UserWarning, match="skipped"):
            res = proposition1_check(panel, np.zeros((105, 2, 1)), 1, sim,
                                     np.random.default_rng(96),
                                     min_stratum_size=50)
        assert len(res.strata) == 1 and res.strata[0]["n"] == 100


class TestPanelContainer:
    def test_trajectory_round_trip(self):
        rng = np.random.default_rng(8)
        panel = Panel(rng.normal(size=(4, 3, 2)), rng.integers(0, 2, (4, 3)),
                      rng.normal(size=4), 2, rng.normal(size=(4, 3)))
        rebuilt = Panel.from_trajectories(
            [panel.trajectory(i) for i in range(4)], 2)
        assert np.array_equal(rebuilt.x, panel.x)
        assert np.array_equal(rebuilt.z, panel.z)
        assert np.array_equal(rebuilt.y, panel.y)
        assert np.array_equal(rebuilt.true_blips, panel.true_blips)

    def test_rejects_out_of_range_treatment(self):
        with pytest.raises(ValueError):
            Panel(np.zeros((2, 2, 1)), np.array([[0, 3], [0, 0]]),
                  np.zeros(2), 2)

    def test_rejects_non_finite(self):
        x = np.zeros((2, 2, 1))
        x[0, 0, 0] = np.inf
        with pytest.raises(ValueError):
            Panel(x, np.zeros((2, 2), dtype=int), np.zeros(2), 2)


def test_panel_csv_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    panel = Panel(rng.normal(size=(5, 3, 4)), rng.integers(0, 3, (5, 3)),
                  rng.normal(size=5), 3, rng.normal(size=(5, 3)))
    path = tmp_path / "panel.csv"
    write_panel_csv(panel, path)
    loaded = read_panel_csv(path, n_treatments=3)
    assert np.array_equal(loaded.x, panel.x)
    assert np.array_equal(loaded.z, panel.z)
    assert np.array_equal(loaded.y, panel.y)
    assert np.array_equal(loaded.true_blips, panel.true_blips)


def test_panel_csv_without_blips(tmp_path):
    rng = np.random.default_rng(10)
    panel = Panel(rng.normal(size=(3, 2, 2)), rng.integers(0, 2, (3, 2)),
                  rng.normal(size=3), 2)
    path = tmp_path / "panel.csv"
    write_panel_csv(panel, path)
    loaded = read_panel_csv(path)
    assert loaded.true_blips is None
    assert np.array_equal(loaded.x, panel.x)
