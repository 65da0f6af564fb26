import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from svdkl.data import Dataset, csv_header, evaluate, load_csv, save_csv, split
from svdkl.dynamics import JointState, default_plant, inverse_dynamics
from svdkl.errors import DimensionMismatch, EmptyDataset, HeaderMismatch, NonFiniteValue, ParseError
from svdkl.experiments import trajectory_dataset
from svdkl.svgp import init_model


def write(path, text):
    path.write_text(text)
    return path


class TestCsv:
    def test_header(self):
        assert csv_header(2) == ["q1", "q2", "dq1", "dq2", "ddq1", "ddq2", "tau1", "tau2"]
        assert len(csv_header(7)) == 28

    def test_two_rows(self, tmp_path):
        p = write(tmp_path / "d.csv", ",".join(csv_header(2)) + "\n" + "1,2,3,4,5,6,7,8\n" + "0,0,0,0,0,0,-1,1e-3\n")
        d = load_csv(p, 2)
        assert len(d) == 2 and d.inputs.shape == (2, 6) and d.targets.shape == (2, 2)
        np.testing.assert_array_equal(d.targets[1], [-1.0, 1e-3])

    def test_header_mismatch(self, tmp_path):
        cols = [f"q{i}" for i in range(1, 21)] + ["tau1"] * 8
        p = write(tmp_path / "d.csv", ",".join(cols) + "\n")
        with pytest.raises(HeaderMismatch):
            load_csv(p, 7)

    def test_empty_file(self, tmp_path):
        with pytest.raises(HeaderMismatch):
            load_csv(write(tmp_path / "d.csv", ""), 2)

    def test_parse_error_location(self, tmp_path):
        body = "1,2,3,4,5,6,7,8\n1,2,3,x,5,6,7,8\n"
        p = write(tmp_path / "d.csv", ",".join(csv_header(2)) + "\n" + body)
        with pytest.raises(ParseError) as exc:
            load_csv(p, 2)
        assert exc.value.row == 3 and exc.value.column == 4

    def test_short_row(self, tmp_path):
        p = write(tmp_path / "d.csv", ",".join(csv_header(2)) + "\n1,2,3\n")
        with pytest.raises(ParseError) as exc:
            load_csv(p, 2)
        assert exc.value.row == 2

    @pytest.mark.parametrize("bad", ["nan", "inf", "-inf"])
    def test_non_finite(self, tmp_path, bad):
        p = write(tmp_path / "d.csv", ",".join(csv_header(2)) + f"\n1,2,3,4,5,6,7,{bad}\n")
        with pytest.raises(NonFiniteValue):
            load_csv(p, 2)

    def test_round_trip_bit_exact(self, tmp_path):
        data = trajectory_dataset(2, seed=3, torque_noise=0.1)
        save_csv(tmp_path / "d.csv", data)
        back = load_csv(tmp_path / "d.csv", 2)
        assert np.array_equal(back.inputs, data.inputs)
        assert np.array_equal(back.targets, data.targets)
        assert (tmp_path / "d.csv").read_bytes().count(b"\r") == 0

    def test_export_needs_joint_layout(self, tmp_path):
        with pytest.raises(DimensionMismatch):
            save_csv(tmp_path / "d.csv", Dataset(np.zeros((2, 5)), np.zeros((2, 2))))


@settings(max_examples=25, deadline=None)
@given(values=arrays(np.float64, (3, 8), elements=st.floats(-1e150, 1e150, width=64)))
def test_property_csv_lossless(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("csv") / "d.csv"
    data = Dataset(values[:, :6], values[:, 6:])
    save_csv(path, data)
    back = load_csv(path, 2)
    assert np.array_equal(back.inputs, data.inputs) and np.array_equal(back.targets, data.targets)


class TestDataset:
    def test_statistics(self):
        d = Dataset(np.array([[1.0, 5.0], [3.0, 5.0]]), np.array([2.0, 4.0]))
        np.testing.assert_array_equal(d.input_mean, [2.0, 5.0])
        np.testing.assert_array_equal(d.input_std, [1.0, 1.0])  # zero std replaced by 1
        assert d.dof == 1

    def test_rejects_non_finite(self):
        with pytest.raises(NonFiniteValue):
            Dataset(np.array([[np.nan]]), np.array([1.0]))

    def test_row_mismatch(self):
        with pytest.raises(DimensionMismatch):
            Dataset(np.zeros((3, 6)), np.zeros((2, 2)))


class TestSplit:
    def data(self, n=100):
        rng = np.random.default_rng(0)
        return Dataset(rng.normal(size=(n, 6)), rng.normal(size=(n, 2)))

    def test_all_train(self):
        train, valid, test = split(self.data(), (1.0, 0.0, 0.0))
        assert (len(train), len(valid), len(test)) == (100, 0, 0)

    def test_default_proportions(self):
        train, valid, test = split(self.data(1000))
        assert (len(train), len(valid), len(test)) == (660, 180, 160)

    def test_seeded(self):
        a = split(self.data(), seed=3)
        b = split(self.data(), seed=3)
        c = split(self.data(), seed=4)
        for x, y in zip(a, b):
            assert np.array_equal(x.inputs, y.inputs)
        assert not np.array_equal(a[0].inputs, c[0].inputs)

    def test_disjoint_and_complete(self):
        d = self.data()
        parts = split(d, (0.5, 0.3, 0.2))
        rows = np.vstack([p.inputs for p in parts])
        assert len(np.unique(rows, axis=0)) == 100

    def test_train_statistics(self):
        d = self.data()
        train, valid, test = split(d)
        assert not np.allclose(train.input_mean, d.input_mean)
        np.testing.assert_allclose(train.input_mean, train.inputs.mean(0))
        for part in (valid, test):
            assert part.input_mean is train.input_mean
            assert part.target_std is train.target_std

    @pytest.mark.parametrize("fractions", [(0.5, 0.5, 0.5), (0.0, 0.5, 0.5), (-0.1, 0.5, 0.5), (0.5, 0.5)])
    def test_bad_fractions(self, fractions):
        with pytest.raises(ValueError):
            split(self.data(), fractions)

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            split(Dataset(np.zeros((0, 6)), np.zeros((0, 2))))


class TestEvaluate:
    def test_constant_predictor(self):
        data = trajectory_dataset(5, seed=0)
        report = evaluate(lambda x: np.broadcast_to(data.target_mean, (len(x), 2)), data)
        np.testing.assert_allclose(report.per_task_rmse, data.targets.std(0), rtol=1e-12)
        np.testing.assert_array_equal(report.per_task_mean_std, [0.0, 0.0])

    def test_analytic_oracle(self):
        plant = default_plant()
        data = trajectory_dataset(3, seed=1, plant=plant)

        def oracle(x):
            return np.array([inverse_dynamics(plant, JointState(r[:2], r[2:4], r[4:])) for r in x])

        assert evaluate(oracle, data).mean_rmse < 1e-8

    def test_model_report(self):
        data = trajectory_dataset(2, seed=2)
        model = init_model(data.inputs, data.targets, "svgp", n_inducing=8)
        a = evaluate(model, data, {"kind": "svgp"})
        b = evaluate(model, data, {"kind": "svgp"})
        assert a.to_text() == b.to_text()
        assert a.n_samples == len(data)
        assert np.all(a.per_task_mean_std > 0)
        assert "config.kind: svgp" in a.to_text()
        assert "seconds" not in a.to_text() and "seconds" in a.to_text(include_timing=True)

    def test_empty(self):
        with pytest.raises(EmptyDataset):
            evaluate(lambda x: x, Dataset(np.zeros((0, 6)), np.zeros((0, 2))))

    def test_dof_mismatch(self):
        rng = np.random.default_rng(0)
        model = init_model(rng.normal(size=(10, 6)), rng.normal(size=(10, 3)), "svgp", n_inducing=2)
        with pytest.raises(DimensionMismatch):
            evaluate(model, Dataset(rng.normal(size=(4, 6)), rng.normal(size=(4, 2))))
