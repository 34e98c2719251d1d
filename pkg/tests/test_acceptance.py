"""End-to-end acceptance checks.

Each test prints a PASS/FAIL line (collected again in the terminal
summary) and then asserts. The replicated benchmark studies are session
fixtures shared between criteria; together they take roughly an hour on a
single core. Set ``STOCHBED_FULL_SHIP=1`` to add the 1500-hour ship study.
"""

import os

import numpy as np
import pytest
from scipy.special import ndtr

from conftest import central_diff, random_dataset, random_hyper, record_criterion
from test_acquisition import gaussian_monomial
from test_vhgpr import conditioned_instance, moment_gradient, stationary_lambda
from stochbed.acquisition import cubature_points, variance_upper_bound
from stochbed.design import METHODS
from stochbed.experiment import ExperimentConfig, compare, make_problem, run_experiment
from stochbed.gp import Dataset, KernelParams, SgprHyper, gram, sgpr_log_marginal
from stochbed.oracle import brute_force_log_evidence
from stochbed.problems import FourBranch2D, Synthetic1D
from stochbed.vhgpr import PointPosterior, VhgprHyper, elbo, variational_moments, vhgpr_fit

pytestmark = [pytest.mark.acceptance, pytest.mark.slow]

N_REPS = 20
N_ITER = 60


@pytest.fixture(scope="session")
def outdir(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def study(problem, outdir, methods=METHODS, **kw):
    cfg = ExperimentConfig(problem=problem, n_iter=N_ITER, reps=N_REPS, out=str(outdir / problem), **kw)
    return compare(methods, cfg)


@pytest.fixture(scope="session")
def study_1d(outdir):
    return study("synthetic1d", outdir, n_init=40)


@pytest.fixture(scope="session")
def study_2d(outdir):
    return study("fourbranch2d", outdir, n_init=60)


@pytest.fixture(scope="session")
def study_ship(outdir):
    return study("shiproll", outdir, methods=["seq-vhgpr"], n_init=40, ship_hours=150.0)


def median_ratio(comp, method):
    res = comp.results[method]
    return res.summary.median / comp.oracle


def final_ratio(comp, method):
    return median_ratio(comp, method)[-1]


def fmt_ratio(r, at):
    return ", ".join(f"{k}:{r[k]:.3f}" for k in at)


def sup_error(r, start):
    return float(np.max(np.abs(r[start:] - 1)))


# -- replicated benchmark studies ------------------------------------------


def test_c01_synthetic1d_convergence(study_1d):
    r = median_ratio(study_1d, "seq-vhgpr")
    at40, after = abs(r[40] - 1), sup_error(r, 41)
    ok = at40 <= 0.05 and after <= 0.10
    record_criterion(1, "1D Seq-VHGPR median within 5% at iteration 40, within 10% after", ok, f"|r40-1|={at40:.3f}, max|r-1| after={after:.3f}; ratios {fmt_ratio(r, (0, 20, 40, 50, 60))}")
    assert not study_1d.results["seq-vhgpr"].failed
    assert ok


def test_c02_synthetic1d_sgpr_bias(study_1d):
    r = final_ratio(study_1d, "lh-sgpr")
    ok = 2.0 <= r <= 4.0
    record_criterion(2, "1D LH-SGPR final median / Exact-MC in [2, 4]", ok, f"ratio={r:.3f}")
    assert ok


def test_c03_fourbranch_convergence(study_2d):
    r = median_ratio(study_2d, "seq-vhgpr")
    err = sup_error(r, 40)
    sg = final_ratio(study_2d, "lh-sgpr")
    ok_seq, ok_sg = err <= 0.10, 1.8 <= sg <= 3.5
    record_criterion(3, "2D Seq-VHGPR median within 10% from iteration 40; LH-SGPR ratio in [1.8, 3.5]", ok_seq and ok_sg, f"max|r-1| from 40={err:.3f} ({'ok' if ok_seq else 'out'}); LH-SGPR ratio={sg:.3f} ({'ok' if ok_sg else 'out'}); Seq ratios {fmt_ratio(r, (0, 20, 40, 60))}")
    assert not study_2d.results["seq-vhgpr"].failed
    assert ok_seq and ok_sg


def test_c04_variance_ordering(study_1d, study_2d):
    stds = {}
    for name, comp in (("1D", study_1d), ("2D", study_2d)):
        stds[name] = tuple(float(np.std(comp.results[m].final_values())) for m in ("seq-vhgpr", "lh-vhgpr"))
    ok = all(s < l for s, l in stds.values())
    record_criterion(4, "final std Seq-VHGPR < LH-VHGPR on both synthetic problems", ok, "; ".join(f"{k}: {s:.3e} vs {l:.3e}" for k, (s, l) in stds.items()))
    assert ok


def test_c05_ship_desk_scale(study_ship):
    r = final_ratio(study_ship, "seq-vhgpr")
    ok = abs(r - 1) <= 0.25
    record_criterion(5, "ship (150 h) Seq-VHGPR median within 25% of the record value after 60 samples", ok, f"ratio={r:.3f}, exact={study_ship.oracle:.4f}")
    assert not study_ship.results["seq-vhgpr"].failed
    assert ok


@pytest.mark.skipif(os.environ.get("STOCHBED_FULL_SHIP") != "1", reason="1500-hour ship study is opt-in (STOCHBED_FULL_SHIP=1)")
def test_ship_full_scale(outdir):
    comp = study("shiproll", outdir / "full", methods=["seq-vhgpr"], n_init=40, ship_hours=1500.0)
    r = median_ratio(comp, "seq-vhgpr")
    print(f"1500 h ship: ratios {fmt_ratio(r, (0, 10, 20, 30, 40, 60))}")
    assert abs(r[30] - 1) <= 0.25


# -- model-level properties ------------------------------------------------


def test_c06_bound_below_evidence():
    rng = np.random.default_rng(6)
    worst = -np.inf
    violations = 0
    for i in range(20):
        n = 1 + i % 4
        X = np.sort(rng.uniform(-2, 2, n))[:, None]
        d = Dataset(X, rng.normal(0, 1.5, n))
        h = random_hyper(rng)
        # optimising lam with fixed hyperparameters gives the tightest bound
        value = vhgpr_fit(d, init=h, optimize_hyper=False).elbo_value
        est, se = brute_force_log_evidence(d, h, n_mc=200_000, seed=i)
        gap = (value - est) / se
        worst = max(worst, gap)
        violations += value > est + 3 * se
    record_criterion(6, "bound <= brute-force log evidence + 3 SE on 20 datasets (n <= 4)", violations == 0, f"violations={violations}, max (bound - evidence)/SE={worst:.2f}")
    assert violations == 0


def rel_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def test_c07_gradient_checks():
    rng = np.random.default_rng(7)
    worst_sgpr = worst_elbo = 0.0
    for i in range(20):
        dim = 1 + i % 2
        d = random_dataset(rng, n=int(rng.integers(5, 15)), d=dim)
        h = SgprHyper(KernelParams(float(rng.uniform(0.5, 2)), tuple(rng.uniform(0.5, 2, dim))), float(rng.uniform(0.1, 1)))
        _, g = sgpr_log_marginal(d, h, return_grad=True)
        num = central_diff(lambda v: sgpr_log_marginal(d, SgprHyper.from_log(v)), h.to_log())
        worst_sgpr = max(worst_sgpr, rel_error(g, num))

        vh = random_hyper(rng, d=dim)
        lam = rng.uniform(0.2, 2.0, d.n)
        _, g_s, g_th = elbo(d, lam, vh)
        num_s = central_diff(lambda s: elbo(d, np.exp(s), vh, return_grad=False), np.log(lam))
        num_th = central_diff(lambda t: elbo(d, lam, VhgprHyper.from_vector(t), return_grad=False), vh.to_vector())
        worst_elbo = max(worst_elbo, rel_error(np.r_[g_s, g_th], np.r_[num_s, num_th]))
    ok = worst_sgpr < 1e-5 and worst_elbo < 1e-5
    record_criterion(7, "analytic gradients match central differences (rel < 1e-5, 20 instances each)", ok, f"worst SGPR {worst_sgpr:.1e}, worst bound {worst_elbo:.1e}")
    assert ok


def joint_posterior_variance(model, prob, nodes, weights, rng, n_draws=4000):
    """Monte Carlo variance of the integrated exceedance probability over
    joint posterior draws of ``f`` and ``g`` at the quadrature nodes."""

    def root(C):
        w, V = np.linalg.eigh(C)
        return V * np.sqrt(np.clip(w, 0, None))

    post = model.predict(nodes)
    cov_f, cov_g = model.predict_cov(nodes)
    F = post.mu_f[:, None] + root(cov_f) @ rng.standard_normal((len(weights), n_draws))
    G = post.mu_g[:, None] + root(cov_g) @ rng.standard_normal((len(weights), n_draws))
    P = weights @ ndtr((F - prob.threshold) / np.exp(G / 2))
    var = P.var(ddof=1)
    se = np.sqrt(max(np.mean((P - P.mean()) ** 4) - var**2, 0.0) / n_draws)
    return var, se


def test_c08_variance_bound():
    violations = 0
    worst = 0.0
    for s in range(100):
        rng = np.random.default_rng(800 + s)
        prob = Synthetic1D() if s % 2 == 0 else FourBranch2D()
        n = int(rng.integers(8, 31))
        X = prob.map_to_box(rng.uniform(size=(n, prob.dim)))
        model = vhgpr_fit(Dataset(X, prob.respond(X, rng)))
        n_quad = 200 if prob.dim == 1 else 30
        nodes, weights = prob.integration_rule(n_quad)
        var, se = joint_posterior_variance(model, prob, nodes, weights, rng)
        bound = variance_upper_bound(model, prob, n_quad)
        worst = max(worst, var / bound if bound > 0 else 0.0)
        violations += var > bound + 3 * se
    record_criterion(8, "posterior variance of P_e <= bound + 3 SE on 100 trained surrogates", violations == 0, f"violations={violations}, max variance/bound={worst:.3f}")
    assert violations == 0


def test_c09_cubature_exactness():
    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(20):
        mf, mg = rng.uniform(-3, 3, 2)
        vf, vg = rng.uniform(0.01, 3, 2)
        fp, gp, w = cubature_points(PointPosterior(np.array(mf), np.array(vf), np.array(mg), np.array(vg)))
        for a in range(4):
            for b in range(4 - a):
                exact = gaussian_monomial(mf, vf, a) * gaussian_monomial(mg, vg, b)
                worst = max(worst, abs(float(np.dot(w, fp**a * gp**b)) - exact))
    ok = worst <= 1e-10
    record_criterion(9, "4-point cubature exact for monomials of degree <= 3 (1e-10)", ok, f"max abs error {worst:.1e}")
    assert ok


def test_c10_stationarity():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(10):
        d, h = conditioned_instance(rng)
        lam = stationary_lambda(d, h)
        mu, Sigma = variational_moments(lam, gram(d.X, h.kernel_g), h.mu0)
        g_mu, g_sigma = moment_gradient(d, h, mu, Sigma)
        worst = max(worst, float(np.max(np.abs(g_mu))), float(np.max(np.abs(g_sigma))))
    ok = worst < 1e-6
    record_criterion(10, "moment-form gradient vanishes at the fixed point (< 1e-6)", ok, f"max |grad| {worst:.1e}")
    assert ok


def test_c11_determinism(tmp_path):
    cases = [
        dict(problem="synthetic1d", method="seq-vhgpr", n_init=10, n_iter=3, reps=2, n_candidates=500, oracle_n=10_000),
        dict(problem="fourbranch2d", method="lh-vhgpr", n_init=12, n_iter=2, reps=2, oracle_n=10_000),
        dict(problem="shiproll", method="seq-vhgpr", n_init=10, n_iter=2, reps=2, n_candidates=500, ship_hours=12.0),
    ]
    mismatched = []
    for case in cases:
        dirs = []
        for sub in ("a", "b"):
            res = run_experiment(ExperimentConfig(**case, out=str(tmp_path / sub)))
            dirs.append(res.directory)
        for p in sorted(dirs[0].glob("*.csv")):
            if p.read_bytes() != (dirs[1] / p.name).read_bytes():
                mismatched.append(f"{case['problem']}/{p.name}")
        assert len(list(dirs[0].glob("*.csv"))) == case["reps"] + 1
    ok = not mismatched
    record_criterion(11, "reruns with identical config produce byte-identical CSVs", ok, "mismatched: " + ", ".join(mismatched) if mismatched else "3 problems")
    assert ok
