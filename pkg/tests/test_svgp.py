import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import svdkl.svgp as svgp_mod
from svdkl.data import Dataset
from svdkl.errors import DimensionMismatch, VersionMismatch
from svdkl.kernel import RbfParams, kernel_matrix
from svdkl.svgp import (
    HEAD_KEYS,
    Predictor,
    TaskHead,
    VariationalState,
    elbo_and_grads,
    exact_gp_oracle,
    exact_log_marginal,
    get_params,
    head_elbo,
    init_model,
    kl_whitened,
    load_model,
    optimal_variational,
    predict,
    predict_all,
    save_model,
    set_params,
    total_elbo_and_grads,
)
from svdkl.trainer import TrainConfig, train_offline


def gp_head(xs, log_sf=0.2, log_ls=(0.1, -0.2), log_sn=np.log(0.3)):
    return TaskHead(RbfParams(log_sf, np.array(log_ls, dtype=float), log_sn), VariationalState.prior(xs))


class TestKl:
    def test_zero_at_prior(self):
        assert kl_whitened(np.zeros(5), np.eye(5)) == 0.0
        head = gp_head(np.zeros((4, 2)))
        assert kl_whitened(head.variational.var_mean, head.variational.var_chol) == 0.0

    def test_closed_form(self):
        rng = np.random.default_rng(0)
        mu = rng.normal(size=3)
        lq = np.tril(rng.normal(size=(3, 3)))
        lq[np.diag_indices(3)] = np.abs(np.diag(lq)) + 0.5
        s = lq @ lq.T
        ref = 0.5 * (np.trace(s) + mu @ mu - 3 - np.log(np.linalg.det(s)))
        np.testing.assert_allclose(kl_whitened(mu, lq), ref, rtol=1e-12)

    def test_nonnegative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            lq = np.tril(rng.normal(size=(4, 4)))
            lq[np.diag_indices(4)] = np.exp(rng.normal(size=4))
            assert kl_whitened(rng.normal(size=4), lq) >= 0.0

    def test_raw_chol_roundtrip(self):
        vs = VariationalState.prior(np.zeros((3, 1)))
        lq = np.array([[2.0, 0, 0], [0.5, 1.0, 0], [-1.0, 0.3, 0.1]])
        vs.set_var_chol(lq)
        np.testing.assert_allclose(vs.var_chol, lq, rtol=1e-15)
        np.testing.assert_allclose(np.diag(vs.var_chol_raw), np.log(np.diag(lq)))


def small_svdkl(seed=0, n=16, m=4):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 5))
    y = np.column_stack([np.sin(x[:, 0]) + x[:, 1], x[:, 2] * x[:, 3]])
    model = init_model(x, y, "svdkl", n_inducing=m, hidden=(6,), feature_dim=3, activation="tanh", seed=seed)
    # move every parameter off its initial value so no gradient is trivially zero
    for h in model.heads:
        h.kernel.log_signal_std = 0.3
        h.kernel.log_lengthscales = rng.normal(0.3, 0.2, size=3)
        h.kernel.log_noise_std = -1.0
        h.variational.var_mean = rng.normal(size=m)
        raw = np.tril(0.2 * rng.normal(size=(m, m)))
        h.variational.var_chol_raw = raw
        h.variational.inducing_inputs = h.variational.inducing_inputs + 0.1 * rng.normal(size=(m, 3))
    return model, model.normalize_inputs(x), model.normalize_targets(y)


class TestElboGradients:
    def test_every_coordinate_matches_finite_differences(self):
        model, xn, yn = small_svdkl()
        total_n = 40
        _, grads, _ = total_elbo_and_grads(model, xn, yn, total_n)
        params = get_params(model)
        assert set(grads) == set(params)
        h = 1e-5
        worst = 0.0
        for name, value in params.items():
            for idx in np.ndindex(value.shape):
                if name.endswith("Lraw") and idx[0] < idx[1]:
                    continue
                trial = {k: v.copy() for k, v in params.items()}
                trial[name][idx] += h
                set_params(model, trial)
                fp = total_elbo_and_grads(model, xn, yn, total_n)[0]
                trial[name][idx] -= 2 * h
                set_params(model, trial)
                fm = total_elbo_and_grads(model, xn, yn, total_n)[0]
                fd = (fp - fm) / (2 * h)
                worst = max(worst, abs(fd - grads[name][idx]) / max(1.0, abs(fd)))
        set_params(model, params)
        assert worst < 1e-4, worst

    def test_single_task_matches_total(self):
        model, xn, yn = small_svdkl(seed=1)
        total, _, per_task = total_elbo_and_grads(model, xn, yn, 16)
        e1, g1 = elbo_and_grads(model, 1, xn, yn[:, 1], 16)
        np.testing.assert_allclose(e1, per_task[1], rtol=1e-14)
        np.testing.assert_allclose(total, sum(per_task), rtol=1e-14)
        assert not any(k.startswith("h0.") for k in g1)

    def test_total_n_below_batch(self):
        model, xn, yn = small_svdkl()
        with pytest.raises(ValueError):
            elbo_and_grads(model, 0, xn, yn[:, 0], 3)

    def test_feature_width_mismatch(self):
        head = gp_head(np.zeros((3, 2)))
        with pytest.raises(DimensionMismatch):
            head_elbo(head, np.zeros((4, 3)), np.zeros(4), 4)


class TestElboVersusExactGp:
    def instance(self, n=32, seed=0):
        rng = np.random.default_rng(seed)
        xs = rng.uniform(-2, 2, size=(n, 2))
        ys = np.sin(xs[:, 0]) * np.cos(xs[:, 1]) + 0.1 * rng.normal(size=n)
        return xs, ys

    def test_equal_at_optimum(self):
        xs, ys = self.instance()
        head = gp_head(xs)
        optimal_variational(head, xs, ys)
        elbo, _, _ = head_elbo(head, xs, ys, len(ys))
        assert abs(elbo - exact_log_marginal(head.kernel, xs, ys)) < 1e-6

    @pytest.mark.parametrize("seed", range(5))
    def test_lower_bound(self, seed):
        xs, ys = self.instance(seed=seed)
        rng = np.random.default_rng(seed)
        head = gp_head(xs[rng.choice(32, size=8, replace=False)] + 0.1)
        lml = exact_log_marginal(head.kernel, xs, ys)
        assert head_elbo(head, xs, ys, 32)[0] <= lml + 1e-8
        optimal_variational(head, xs, ys)
        assert head_elbo(head, xs, ys, 32)[0] <= lml + 1e-8

    def test_optimum_has_zero_variational_gradient(self):
        xs, ys = self.instance()
        head = gp_head(xs[:10])
        optimal_variational(head, xs, ys)
        _, g, _ = head_elbo(head, xs, ys, 32)
        assert np.max(np.abs(g["mu"])) < 1e-8
        assert np.max(np.abs(g["Lraw"])) < 1e-8


class TestExactGpOracle:
    def test_no_data_is_prior(self):
        k = RbfParams(np.log(1.5), np.zeros(2), np.log(0.2))
        d = exact_gp_oracle(k, np.zeros((0, 2)), np.zeros(0), np.ones(2))
        assert d.mean == 0.0
        np.testing.assert_allclose(d.std**2, 1.5**2 + 0.2**2, rtol=1e-14)

    def test_interpolates_with_tiny_noise(self):
        rng = np.random.default_rng(0)
        xs = rng.uniform(-2, 2, size=(10, 1))
        ys = np.sin(3 * xs[:, 0])
        k = RbfParams(0.0, np.array([np.log(0.5)]), np.log(1e-4))
        assert abs(exact_gp_oracle(k, xs, ys, xs[4]).mean - ys[4]) < 1e-3

    def test_three_point_hand_inverse(self):
        xs = np.array([-1.0, 0.0, 1.5])
        ys = np.array([0.5, -0.2, 1.0])
        sf2, ell2, sn2 = 1.3**2, 0.8**2, 0.1**2
        k = RbfParams(np.log(1.3), np.array([np.log(0.8)]), np.log(0.1))
        gram = np.array([[sf2 * np.exp(-0.5 * (a - b) ** 2 / ell2) for b in xs] for a in xs])
        xstar = 0.4
        kstar = sf2 * np.exp(-0.5 * (xs - xstar) ** 2 / ell2)
        inv = np.linalg.inv(gram + sn2 * np.eye(3))
        d = exact_gp_oracle(k, xs[:, None], ys, [xstar])
        np.testing.assert_allclose(d.mean, kstar @ inv @ ys, atol=1e-9)
        np.testing.assert_allclose(d.std**2, sf2 - kstar @ inv @ kstar + sn2, atol=1e-9)

    def test_size_guard(self):
        k = RbfParams.default(1)
        with pytest.raises(ValueError):
            exact_gp_oracle(k, np.zeros((513, 1)), np.zeros(513), [0.0])


class TestPredict:
    def test_prior_predictive(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 6))
        y = 3.0 + 2.0 * rng.normal(size=(50, 2))
        model = init_model(x, y, "svdkl", n_inducing=8, hidden=(16,), feature_dim=3, seed=1)
        for t, h in enumerate(model.heads):
            d = predict(model, t, rng.normal(size=6))
            np.testing.assert_allclose(d.mean, h.target_mean, rtol=1e-14)
            var = (h.kernel.signal_var + h.kernel.noise_var) * h.target_std**2
            np.testing.assert_allclose(d.std**2, var, rtol=1e-10)

    def test_zero_targets(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-3, 3, size=(1000, 1))
        data = Dataset(x, np.zeros((1000, 1)))
        model = init_model(x, data.targets, "svgp", n_inducing=16, seed=0)
        # exact zeros drive the noise estimate to zero, so the kernel stays at its defaults
        cfg = TrainConfig(learning_rate=1e-2, batch_size=100, max_epochs=500, freeze=("kernel",))
        model, _ = train_offline(model, data, None, cfg)
        floor = model.heads[0].noise_std
        for xs in np.linspace(-2.5, 2.5, 11):
            d = predict(model, 0, [xs])
            assert abs(d.mean) < 0.05
            assert abs(d.std / floor - 1.0) < 0.1

    def test_matches_exact_gp_with_inducing_at_training_points(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-3, 3, size=(40, 2))
        y = np.sin(x[:, 0]) + 0.5 * x[:, 1] + 0.05 * rng.normal(size=40)
        model = init_model(x, y, "svgp", n_inducing=40, seed=0)
        head = model.heads[0]
        xn, yn = model.normalize_inputs(x), model.normalize_targets(y[:, None])[:, 0]
        head.variational.inducing_inputs = xn.copy()
        head.kernel.log_noise_std = np.log(0.1)
        optimal_variational(head, xn, yn)
        for xq in rng.uniform(-3, 3, size=(10, 2)):
            got = predict(model, 0, xq)
            ref = exact_gp_oracle(head.kernel, xn, yn, model.normalize_inputs(xq))
            assert abs(got.mean - (ref.mean * head.target_std + head.target_mean)) < 1e-2 * head.target_std

    def test_wrong_width(self):
        model = init_model(np.ones((4, 3)), np.ones(4), "svgp", n_inducing=2)
        with pytest.raises(DimensionMismatch):
            predict(model, 0, np.ones(2))


class TestPredictAll:
    def make(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(60, 21))
        y = rng.normal(size=(60, 7))
        model = init_model(x, y, "svdkl", n_inducing=10, hidden=(16, 16), feature_dim=4, seed=2)
        for h in model.heads:
            h.variational.var_mean = rng.normal(size=10)
        return model, rng.normal(size=21)

    def test_length_and_equality(self):
        model, x = self.make()
        out = predict_all(model, x)
        assert len(out) == 7
        for t in range(7):
            single = predict(model, t, x)
            np.testing.assert_allclose(out[t].mean, single.mean, rtol=1e-13)
            np.testing.assert_allclose(out[t].std, single.std, rtol=1e-13)

    def test_single_extractor_pass(self, monkeypatch):
        model, x = self.make()
        calls = []
        original = svgp_mod.mlp_forward

        def counting(*args, **kw):
            calls.append(1)
            return original(*args, **kw)

        monkeypatch.setattr(svgp_mod, "mlp_forward", counting)
        predict_all(model, x)
        assert len(calls) == 1

    def test_predictor_batch_matches_rows(self):
        model, _ = self.make()
        xs = np.random.default_rng(9).normal(size=(5, 21))
        mean, std = Predictor(model)(xs)
        for i in range(5):
            m1, s1 = Predictor(model)(xs[i])
            np.testing.assert_allclose(mean[i], m1, rtol=1e-13)
            np.testing.assert_allclose(std[i], s1, rtol=1e-13)


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        model, _, _ = small_svdkl()
        model.version, model.n_seen, model.online_ready = 3, 500, True
        path = tmp_path / "m.npz"
        save_model(path, model)
        loaded = load_model(path)
        a, b = get_params(model), get_params(loaded)
        assert set(a) == set(b)
        for k in a:
            assert np.array_equal(a[k], b[k]), k
        assert (loaded.version, loaded.n_seen, loaded.online_ready) == (3, 500, True)
        assert loaded.extractor.activation == "tanh"
        x = np.random.default_rng(0).normal(size=5)
        assert np.array_equal(Predictor(model)(x)[0], Predictor(loaded)(x)[0])

    def test_svgp_round_trip(self, tmp_path):
        model = init_model(np.random.default_rng(0).normal(size=(10, 3)), np.ones((10, 2)), "svgp", n_inducing=4)
        save_model(tmp_path / "s.npz", model)
        assert load_model(tmp_path / "s.npz").extractor is None

    def test_version_mismatch(self, tmp_path):
        model = init_model(np.ones((4, 3)), np.ones(4), "svgp", n_inducing=2)
        path = tmp_path / "m.npz"
        save_model(path, model)
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        arrays["__header__"] = np.array(str(arrays["__header__"]).replace('"version": 1', '"version": 99'))
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        with pytest.raises(VersionMismatch):
            load_model(path)

    def test_not_a_container(self, tmp_path):
        path = tmp_path / "x.npz"
        with open(path, "wb") as fh:
            np.savez(fh, a=np.zeros(2))
        with pytest.raises(VersionMismatch):
            load_model(path)


def test_head_keys_cover_groups():
    assert set(HEAD_KEYS) == set(svgp_mod.PARAM_GROUPS)


def test_kuu_uses_feature_space():
    model, xn, _ = small_svdkl()
    z = model.heads[0].variational.inducing_inputs
    assert z.shape == (4, 3)
    assert kernel_matrix(model.heads[0].kernel, z).shape == (4, 4)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), log_sn=st.floats(-4, 1), scale=st.floats(0.01, 100))
def test_property_std_above_noise_floor(seed, log_sn, scale):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(30, 3))
    y = scale * rng.normal(size=(30, 2))
    model = init_model(x, y, "svdkl", n_inducing=6, hidden=(8,), feature_dim=2, seed=seed)
    for h in model.heads:
        h.kernel.log_noise_std = log_sn
        h.variational.var_mean = rng.normal(size=6)
        h.variational.var_chol_raw = np.tril(rng.normal(size=(6, 6)))
    pred = Predictor(model)
    _, std = pred(rng.normal(size=(20, 3)))
    assert np.all(std >= pred.noise_floor() * (1 - 1e-12))
