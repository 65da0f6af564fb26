import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svdkl.controller import (
    GainConfig,
    GainState,
    control_torque,
    fixed_gains,
    rate_limited,
    run_closed_loop,
    variable_gains,
)
from svdkl.dynamics import JointState, default_plant, random_trajectory
from svdkl.errors import DimensionMismatch, InvalidVarianceBounds
from svdkl.experiments import default_gains, trajectory_dataset
from svdkl.svgp import Predictor, init_model
from svdkl.trainer import TrainConfig, warm_start


def cfg1(k_min=1.0, k_max=10.0, c=2.0, zeta=1.0, limit=300.0):
    return GainConfig([k_min], [k_max], c, zeta, [limit])


class TestVariableGains:
    def test_at_noise_floor(self):
        g = variable_gains([0.1], [1.0], [0.1], cfg1(k_min=3.0, zeta=0.7))
        np.testing.assert_array_equal(g.z, [1.0])
        np.testing.assert_array_equal(g.k_p, [3.0])
        np.testing.assert_allclose(g.k_d, [0.7 * np.sqrt(3.0)], rtol=1e-15)

    def test_midpoint_example(self):
        g = variable_gains([0.55], [1.0], [0.1], cfg1(c=2.0))
        np.testing.assert_allclose(g.z, [np.exp(-1.0)], rtol=1e-14)
        np.testing.assert_allclose(g.z, [0.367879], atol=1e-6)
        np.testing.assert_allclose(g.k_p, [6.6891], atol=1e-3)

    def test_clamped_example(self):
        g = variable_gains([2.0], [1.0], [0.1], cfg1(k_min=5.0, k_max=50.0, c=6.0))
        np.testing.assert_allclose(g.z, [np.exp(-6.0)], rtol=1e-14)
        np.testing.assert_allclose(g.z, [0.002479], atol=1e-6)
        np.testing.assert_allclose(g.k_p, [49.888], atol=1e-3)

    def test_below_floor_clamps_to_k_min(self):
        np.testing.assert_array_equal(variable_gains([0.01], [1.0], [0.1], cfg1()).k_p, [1.0])

    def test_damping_ratio_exact(self):
        rng = np.random.default_rng(0)
        worst = 0.0
        for _ in range(1000):
            zeta = rng.uniform(0.1, 3.0)
            k_min = rng.uniform(1, 100, 3)
            cfg = GainConfig(k_min, k_min + rng.uniform(0, 500, 3), rng.uniform(0.5, 10), zeta, [1.0] * 3)
            sn = rng.uniform(0.01, 1, 3)
            sf = sn + rng.uniform(0.01, 10, 3)
            g = variable_gains(rng.uniform(0, 12, 3), sf, sn, cfg)
            worst = max(worst, np.max(np.abs(g.k_d / np.sqrt(g.k_p) - zeta)))
        assert worst <= 1e-12

    @pytest.mark.parametrize("sf,sn", [(0.1, 0.1), (0.05, 0.1), (1.0, 0.0)])
    def test_invalid_bounds(self, sf, sn):
        with pytest.raises(InvalidVarianceBounds):
            variable_gains([0.5], [sf], [sn], cfg1())

    def test_per_joint(self):
        cfg = GainConfig([1.0, 2.0], [10.0, 20.0], 2.0, 1.0, [300.0, 300.0])
        g = variable_gains([0.1, 0.55], [1.0, 1.0], [0.1, 0.1], cfg)
        np.testing.assert_allclose(g.k_p, [1.0, 2.0 + (1 - np.exp(-1)) * 18.0], rtol=1e-14)


@settings(max_examples=100, deadline=None)
@given(
    s1=st.floats(0.0, 5.0), s2=st.floats(0.0, 5.0), c=st.floats(0.1, 10.0),
    k_min=st.floats(0.1, 100.0), span=st.floats(0.0, 500.0),
)
def test_property_monotone_and_bounded(s1, s2, c, k_min, span):
    cfg = cfg1(k_min=k_min, k_max=k_min + span, c=c)
    lo, hi = sorted((s1, s2))
    g_lo = variable_gains([lo], [4.0], [0.5], cfg)
    g_hi = variable_gains([hi], [4.0], [0.5], cfg)
    assert g_hi.k_p[0] >= g_lo.k_p[0]
    top = k_min + (1 - np.exp(-c)) * span
    for g in (g_lo, g_hi):
        assert k_min <= g.k_p[0] <= top * (1 + 1e-15)
        assert np.exp(-c) * (1 - 1e-15) <= g.z[0] <= 1.0


class TestGainConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            GainConfig([10.0], [5.0])
        with pytest.raises(ValueError):
            GainConfig([0.0], [5.0])
        with pytest.raises(ValueError):
            GainConfig([1.0], [5.0], c=0.0)

    def test_fixed_high(self):
        cfg = default_gains()
        np.testing.assert_array_equal(fixed_gains(cfg.fixed_high()).k_p, cfg.k_max)

    def test_rate_limiter(self):
        cfg = GainConfig([1.0], [100.0], rate_limit=0.1, torque_limit=[1.0])
        prev = GainState(np.array([10.0]), np.array([np.sqrt(10.0)]), np.array([0.5]))
        new = GainState(np.array([50.0]), np.array([np.sqrt(50.0)]), np.array([0.1]))
        out = rate_limited(prev, new, cfg)
        np.testing.assert_allclose(out.k_p, [11.0])
        np.testing.assert_allclose(out.k_d, [np.sqrt(11.0)])
        assert rate_limited(None, new, cfg) is new


def state(q, dq):
    return JointState(q, dq, np.zeros(len(q)))


class TestControlTorque:
    gains = GainState(np.array([100.0, 50.0]), np.array([10.0, 5.0]), np.ones(2))
    cfg = GainConfig([1.0, 1.0], [100.0, 100.0], torque_limit=[300.0, 300.0])

    def test_zero_error(self):
        s = state([0.3, -0.2], [1.0, 0.5])
        tau, fb, clips = control_torque(s, s, self.gains, [4.0, -2.0], self.cfg)
        np.testing.assert_array_equal(tau, [4.0, -2.0])
        np.testing.assert_array_equal(fb, [0.0, 0.0])
        assert clips == 0

    def test_position_error_only(self):
        e = np.array([0.01, -0.03])
        tau, _, _ = control_torque(state([0, 0], [0, 0]), state(e, [0, 0]), self.gains, [0, 0], self.cfg)
        np.testing.assert_allclose(tau, self.gains.k_p * e, rtol=1e-15)

    def test_saturation(self):
        s = state([0, 0], [0, 0])
        tau, fb, clips = control_torque(s, s, self.gains, [1000.0, -1000.0], self.cfg)
        np.testing.assert_array_equal(tau, [300.0, -300.0])
        assert clips == 2

    def test_shapes(self):
        s = state([0, 0], [0, 0])
        with pytest.raises(DimensionMismatch):
            control_torque(s, s, self.gains, [0.0], self.cfg)


def rhythmic_spec(duration):
    return random_trajectory(np.random.default_rng(11), dof=2, duration=duration)


def pinned_model():
    """Model whose predictive std is σ_n everywhere: one inducing point, an
    effectively infinite lengthscale and a collapsed variational covariance."""
    rng = np.random.default_rng(0)
    model = init_model(rng.normal(size=(20, 6)), rng.normal(size=(20, 2)) * 5, "svgp", n_inducing=1)
    for h in model.heads:
        h.kernel.log_lengthscales = np.full(6, 20.0)
        h.variational.var_chol_raw = np.array([[-30.0]])
    return model


class TestClosedLoop:
    def test_analytic_feedforward_tracks(self):
        plant, spec = default_plant(), rhythmic_spec(2.0)
        analytic = run_closed_loop(plant, spec, "analytic", default_gains(), "fixed")
        none = run_closed_loop(plant, spec, "none", default_gains(), "fixed")
        e_a = np.sqrt(np.mean(analytic.position_rmse() ** 2))
        e_n = np.sqrt(np.mean(none.position_rmse() ** 2))
        assert e_a < 1e-3
        assert e_n >= 10 * e_a
        np.testing.assert_array_equal(analytic.kp, np.broadcast_to(default_gains().k_min, analytic.kp.shape))
        assert analytic.feedforward_rmse().max() == 0.0

    def test_sigma_at_floor_pins_k_min(self):
        model = pinned_model()
        pred = Predictor(model)
        _, std = pred(np.zeros(6))
        np.testing.assert_allclose(std, pred.noise_floor(), rtol=1e-12)
        cfg = default_gains()
        trace = run_closed_loop(default_plant(), rhythmic_spec(0.3), model, cfg, "variable")
        np.testing.assert_allclose(trace.kp, np.broadcast_to(cfg.k_min, trace.kp.shape), rtol=1e-9)
        np.testing.assert_allclose(trace.kd / np.sqrt(trace.kp), cfg.zeta, rtol=1e-12)

    def test_online_batches(self):
        data = trajectory_dataset(3, seed=0)
        model = init_model(data.inputs, data.targets, "svdkl", n_inducing=16, hidden=(16,), feature_dim=2)
        model = warm_start(model, data, TrainConfig(warm_start_epochs=0))
        online = TrainConfig(online_steps=2)
        trace = run_closed_loop(default_plant(), rhythmic_spec(1.0), model, default_gains(), "variable",
                                online=online, n_steps=350)
        assert trace.model_versions == [model.version + 1, model.version + 2, model.version + 3]
        assert trace.final_model.version == model.version + 3
        assert trace.final_model.n_seen == model.n_seen + 300
        assert np.all(trace.kd / np.sqrt(trace.kp) - 1.0 < 1e-12)

    def test_torque_limit_respected(self):
        cfg = GainConfig([40.0, 20.0], [400.0, 200.0], torque_limit=[5.0, 5.0])
        trace = run_closed_loop(default_plant(), rhythmic_spec(0.5), "analytic", cfg, "fixed")
        assert trace.clip_count > 0

    def test_mode_checks(self):
        with pytest.raises(ValueError):
            run_closed_loop(default_plant(), rhythmic_spec(0.1), "analytic", default_gains(), "variable")
        with pytest.raises(ValueError):
            run_closed_loop(default_plant(), rhythmic_spec(0.1), "analytic", default_gains(), "adaptive")

    def test_model_dof_mismatch(self):
        rng = np.random.default_rng(0)
        model = init_model(rng.normal(size=(10, 6)), rng.normal(size=(10, 3)), "svgp", n_inducing=2)
        with pytest.raises(DimensionMismatch):
            run_closed_loop(default_plant(), rhythmic_spec(0.1), model, default_gains())

    def test_trace_csv(self, tmp_path):
        trace = run_closed_loop(default_plant(), rhythmic_spec(0.05), "analytic", default_gains())
        trace.to_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "t,q_d1,q_d2,q1,q2,tau_ff1,tau_ff2,tau_fb1,tau_fb2,sigma1,sigma2,kp1,kp2"
        assert len(lines) == 51
        row = np.array(lines[7].split(","), dtype=float)
        assert row[0] == trace.t[6]
        np.testing.assert_array_equal(row[3:5], trace.q[6])
