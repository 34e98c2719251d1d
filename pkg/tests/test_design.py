import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from test_acquisition import StubModel
from stochbed import design
from stochbed.design import RunRecord, estimate_pe, latin_hypercube, run_sequential
from stochbed.gp import ConditioningError
from stochbed.oracle import quadrature_pe
from stochbed.problems import FourBranch2D, Synthetic1D, fourbranch_mean


class TestProblems:
    def test_synthetic_mean_and_noise(self):
        assert Synthetic1D.mean_fn([[5.0]])[0] == 0.0
        np.testing.assert_allclose(Synthetic1D.noise_std([[0.0], [8.0]]), [0.1, 6.5])

    def test_synthetic_draw_statistics(self):
        draws = Synthetic1D().respond(np.zeros((10_000, 1)), np.random.default_rng(4))
        se = 0.1 / np.sqrt(10_000)
        assert abs(draws.mean() - 25.0) < 3 * se
        assert draws.std() == pytest.approx(0.1, rel=0.03)

    def test_seeded_sampler(self):
        p = Synthetic1D()
        assert p.itr_sampler([6.0], 9) == p.itr_sampler([6.0], 9)
        assert p.itr_sampler([6.0], 9) != p.itr_sampler([6.0], 10)

    def test_fourbranch_values(self):
        assert fourbranch_mean(0.0, 0.0) == -8.0
        c = 6 / np.sqrt(2)
        # (x1 + x2)/sqrt(2) = 6, so the branches are {14, 2, 6/sqrt(2)+5, 6/sqrt(2)+5}
        assert fourbranch_mean(c, c) == pytest.approx(-2.0, abs=1e-12)
        # on the diagonal x1 = x2 = t the minimum is 8 - sqrt(2) t until the linear branches take over
        assert fourbranch_mean(1.0, 1.0) == pytest.approx(np.sqrt(2) - 8, abs=1e-12)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-6, 6), st.floats(-6, 6))
    def test_fourbranch_swap_symmetry(self, a, b):
        assert fourbranch_mean(a, b) == fourbranch_mean(b, a)

    def test_fourbranch_noise_floor_and_scale(self):
        p = FourBranch2D()
        X = np.array([[0.0, 0.0], [6 / np.sqrt(2), 6 / np.sqrt(2)], [4.0, 4.0 - 1e-9]])
        s = p.noise_std(X)
        assert s[0] == pytest.approx(8 / 6)
        assert np.all(s >= p.noise_floor)

    def test_fourbranch_draw_statistics(self):
        p = FourBranch2D()
        draws = p.respond(np.zeros((10_000, 2)), np.random.default_rng(5))
        sd = 8 / 6
        assert abs(draws.mean() + 8.0) < 3 * sd / 100
        assert draws.std() == pytest.approx(sd, rel=0.03)

    def test_inverse_cdf_mapping(self):
        assert Synthetic1D().map_to_input([[0.5]])[0, 0] == pytest.approx(5.0)
        assert FourBranch2D().map_to_input([[0.97725, 0.5]])[0, 0] == pytest.approx(2.0, abs=1e-3)

    def test_mapping_rejects_points_outside_unit_cube(self):
        with pytest.raises(ValueError):
            Synthetic1D().map_to_input([[1.0]])
        with pytest.raises(ValueError):
            Synthetic1D().design_points([[-0.1]])

    def test_box_design_spans_domain(self):
        X = FourBranch2D().design_points(np.array([[0.0, 0.5], [0.999, 0.25]]), "box")
        np.testing.assert_allclose(X, [[-5.0, 0.0], [4.99, -2.5]])

    def test_default_designs(self):
        U = np.array([[0.5, 0.97725]])
        assert Synthetic1D().design_points(U[:, :1])[0, 0] == pytest.approx(5.0)
        assert Synthetic1D().design_points([[0.1]])[0, 0] == pytest.approx(1.0)
        assert FourBranch2D().design_points(U)[0, 1] == pytest.approx(2.0, abs=1e-3)
        with pytest.raises(ValueError):
            Synthetic1D().design_points([[0.5]], "sobol")

    def test_integration_weights(self):
        nodes, w = FourBranch2D().integration_rule()
        assert nodes.shape == (40_000, 2)
        assert w.sum() == pytest.approx(1.0)
        assert np.dot(w, nodes[:, 0] ** 2) == pytest.approx(1.0, rel=1e-3)

    def test_digest_tracks_settings(self):
        assert Synthetic1D().digest() == Synthetic1D().digest()
        assert Synthetic1D().digest() != Synthetic1D(threshold=8).digest()


class TestLatinHypercube:
    def test_one_point_per_stratum(self):
        U = latin_hypercube(4, 1, 0)
        np.testing.assert_array_equal(np.sort(np.floor(U[:, 0] * 4)), [0, 1, 2, 3])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 40), st.integers(1, 3), st.integers(0, 2**31))
    def test_stratification_every_margin(self, n, d, seed):
        U = latin_hypercube(n, d, seed)
        assert U.shape == (n, d)
        assert np.all((U >= 0) & (U < 1))
        for j in range(d):
            np.testing.assert_array_equal(np.sort(np.floor(U[:, j] * n)), np.arange(n))

    def test_deterministic(self):
        np.testing.assert_array_equal(latin_hypercube(7, 2, 11), latin_hypercube(7, 2, 11))

    def test_needs_points(self):
        with pytest.raises(ValueError):
            latin_hypercube(0, 1, 0)


class TestEstimatePe:
    def test_mean_on_threshold(self):
        assert estimate_pe(StubModel(9.0, 0.0, 1.3, 0.0), Synthetic1D()) == pytest.approx(0.5, abs=1e-12)

    def test_deep_tail(self):
        m = StubModel(9.0 - 10 * np.exp(0.5), 0.0, 1.0, 0.0)
        assert estimate_pe(m, Synthetic1D()) < 1e-20

    def test_true_functions_reproduce_reference(self):
        prob = Synthetic1D()
        m = StubModel(prob.mean_fn, 0.0, lambda X: 2 * np.log(prob.noise_std(X)), 0.0)
        assert estimate_pe(m, prob) == pytest.approx(quadrature_pe(prob), abs=1e-12)
        # frozen value of the integral (fine grid, 4000 nodes)
        assert estimate_pe(m, prob) == pytest.approx(quadrature_pe(prob, 4000), abs=1e-4)
        assert quadrature_pe(prob, 4000) == pytest.approx(0.0161439, abs=2e-6)

    def test_decreases_with_threshold(self):
        m = StubModel(lambda X: (X[:, 0] - 5) ** 2, 0.0, 0.5, 0.0)
        vals = [estimate_pe(m, Synthetic1D(threshold=t)) for t in (1, 3, 5, 9, 12)]
        assert np.all(np.diff(vals) < 0)

    def test_nonfinite_quadrature_raises(self):
        with pytest.raises(FloatingPointError):
            estimate_pe(StubModel(np.nan, 0.0, 0.0, 0.0), Synthetic1D())


class CountingProblem(Synthetic1D):
    def __init__(self):
        super().__init__()
        self.calls = 0

    def itr_sampler(self, x, seed):
        self.calls += 1
        return super().itr_sampler(x, seed)


class TestRunSequential:
    def test_initial_only(self):
        rec = run_sequential(Synthetic1D(), 8, 0, seed=1, method="lh-sgpr")
        assert rec.iters == [0] and len(rec.pe) == 1
        assert rec.xs == [None] and rec.n_queries == 8

    @pytest.mark.parametrize("method", ["seq-vhgpr", "lh-vhgpr", "lh-sgpr"])
    def test_query_budget(self, method):
        prob = CountingProblem()
        rec = run_sequential(prob, 10, 3, seed=2, method=method, n_candidates=300)
        assert prob.calls == 13 == rec.n_queries
        assert len(rec.pe) == 4
        assert all(0 <= p <= 1 for p in rec.pe)
        assert (rec.acq[1] is None) == (method != "seq-vhgpr")

    def test_reference_modes_share_the_design(self):
        a = run_sequential(Synthetic1D(), 10, 3, seed=4, method="lh-vhgpr")
        b = run_sequential(Synthetic1D(), 10, 3, seed=4, method="lh-sgpr")
        np.testing.assert_array_equal(a.X_init, b.X_init)
        np.testing.assert_array_equal(np.array(a.xs[1:]), np.array(b.xs[1:]))
        np.testing.assert_array_equal(a.y_init, b.y_init)

    def test_bit_identical_reruns(self):
        a = run_sequential(Synthetic1D(), 10, 2, seed=3, n_candidates=300)
        b = run_sequential(Synthetic1D(), 10, 2, seed=3, n_candidates=300)
        assert a.to_csv() == b.to_csv()
        assert json.dumps(a.metadata()) == json.dumps(b.metadata())

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="valid"):
            run_sequential(Synthetic1D(), 10, 1, method="random")

    def test_small_initial_design_rejected(self):
        with pytest.raises(ValueError):
            run_sequential(Synthetic1D(), 4, 1)

    def test_persistent_fit_failure_aborts_with_partial_record(self, monkeypatch):
        calls = {"n": 0}
        real = design.fit_surrogate

        def flaky(method, data, previous=None, seed=0):
            calls["n"] += 1
            if data.n > 11:
                raise ConditioningError("synthetic failure")
            return real(method, data, previous, seed)

        monkeypatch.setattr(design, "fit_surrogate", flaky)
        rec = run_sequential(Synthetic1D(), 10, 5, seed=0, method="lh-sgpr")
        assert rec.aborted and "iteration 2" in rec.error
        assert len(rec.pe) == 2

    def test_transient_fit_failure_is_retried(self, monkeypatch):
        real = design.fit_surrogate
        state = {"failed": False}

        def once(method, data, previous=None, seed=0):
            if previous is not None and not state["failed"]:
                state["failed"] = True
                raise ConditioningError("transient")
            return real(method, data, previous, seed)

        monkeypatch.setattr(design, "fit_surrogate", once)
        rec = run_sequential(Synthetic1D(), 10, 2, seed=0, method="lh-sgpr")
        assert state["failed"] and not rec.aborted and len(rec.pe) == 3


class TestRunRecordFiles:
    def test_csv_layout(self, tmp_path):
        rec = run_sequential(FourBranch2D(), 8, 2, seed=0, method="lh-sgpr")
        csv_path, json_path = rec.write(tmp_path / "run")
        rows = list(csv.reader(io.StringIO(csv_path.read_text())))
        assert rows[0] == ["iter", "x1", "x2", "y", "acq_value", "pe_estimate", "wall_ms"]
        assert len(rows) == 4
        assert all(r[-1] == "" for r in rows[1:])
        meta = json.loads(json_path.read_text())
        assert meta["method"] == "lh-sgpr" and len(meta["initial_inputs"]) == 8
        assert meta["design"] == "density"
        assert len(meta["wall_ms"]) == 3
        np.testing.assert_array_equal(RunRecord.read_pe(csv_path), rec.pe)

    def test_timings_optional(self):
        rec = run_sequential(Synthetic1D(), 8, 1, seed=0, method="lh-sgpr")
        last = rec.to_csv(timings=True).strip().splitlines()[-1]
        assert float(last.split(",")[-1]) >= 0
