import csv
import io
from dataclasses import replace

import numpy as np
import pytest

from natcomp import ina, sgd
from natcomp.bounds import alpha_beta, gradient_bound
from natcomp.errors import ConfigurationError, DivergenceError
from natcomp.operators import compress, identity, nat, parse_spec
from natcomp.rng import RngStream


@pytest.fixture(scope="module")
def quad():
    return sgd.quadratic_problem(20, 4, seed=1, mu=0.2, L=1.0)


def test_measured_constants(quad):
    c = sgd.measure_problem_constants(quad)
    assert c.L == pytest.approx(1.0)
    assert c.zeta2 == 0.0 and not c.zeta2_estimated
    assert c.sigma2 == 0.0
    x_star = np.linalg.solve(quad.A[0], quad.b[0])
    assert c.fstar == pytest.approx(quad.f(x_star))
    assert c.f0_minus_fstar == pytest.approx(-c.fstar)


def test_identity_hessian_and_noise_level():
    d, n = 100, 3
    A = np.repeat(np.eye(d)[None], n, axis=0)
    b = np.repeat(np.ones(d)[None], n, axis=0)
    p = sgd.SyntheticProblem("quadratic", d, n, 0.1, A, b)
    c = sgd.measure_problem_constants(p)
    assert c.L == 1.0 and c.zeta2 == 0.0
    assert c.sigma2 == pytest.approx(1.0)


def test_heterogeneous_zeta_exact_for_shared_hessian():
    p = sgd.quadratic_problem(10, 4, seed=2, heterogeneity=0.5)
    c = sgd.measure_problem_constants(p)
    dev = p.b - p.b.mean(0)
    assert c.zeta2 == pytest.approx(np.mean(np.sum(dev ** 2, 1)))
    x = np.random.default_rng(0).standard_normal(10)
    spread = np.mean([np.sum((p.worker_grad(i, x) - p.grad(x)) ** 2) for i in range(4)])
    assert spread == pytest.approx(c.zeta2)


def test_non_psd_rejected():
    A = np.repeat(np.diag([1.0, -0.5])[None], 2, axis=0)
    p = sgd.SyntheticProblem("quadratic", 2, 2, 0.0, A, np.zeros((2, 2)))
    with pytest.raises(ConfigurationError):
        sgd.measure_problem_constants(p)


def test_logistic_constants():
    same = sgd.logistic_problem(5, 3, m=30, seed=0)
    c = sgd.measure_problem_constants(same)
    assert c.zeta2 == 0.0 and not c.zeta2_estimated
    assert np.linalg.norm(same.grad(np.zeros(5))) > 0
    assert c.fstar < same.f(np.zeros(5))
    H = same.hessian(np.zeros(5))
    assert np.linalg.eigvalsh(H)[-1] <= c.L + 1e-12
    diff = sgd.logistic_problem(5, 3, m=30, seed=0, identical=False)
    c = sgd.measure_problem_constants(diff)
    assert c.zeta2 > 0 and c.zeta2_estimated


def test_logistic_gradient_matches_finite_differences():
    p = sgd.logistic_problem(4, 2, m=10, seed=3, identical=False)
    x = np.array([0.3, -0.2, 0.1, 0.5])
    g = p.worker_grad(1, x)
    h = 1e-6
    fd = [(p.worker_f(1, x + h * e) - p.worker_f(1, x - h * e)) / (2 * h) for e in np.eye(4)]
    assert np.allclose(g, fd, atol=1e-7)


def test_gradient_descent_monotone(quad):
    c = sgd.measure_problem_constants(quad)
    cfg = sgd.SgdConfig(identity(), identity(), eta=1.0 / c.L, T=300)
    tr = sgd.run(quad, cfg, c)
    assert np.all(np.diff(tr.f) <= 1e-12)
    assert tr.grad_norm2[-1] < 1e-8


def test_identity_update_is_averaged_gradient_step(quad):
    cfg = sgd.SgdConfig(identity(), identity(), eta=0.7, T=1)
    tr = sgd.run(quad, cfg)
    g = sum(compress(quad.worker_grad(i, np.zeros(20)), identity(), RngStream(0)).astype(np.float64)
            for i in range(4))
    assert np.array_equal(tr.x_final, -(0.7 / 4) * g)
    np.testing.assert_allclose(tr.x_final, -0.7 * quad.grad(np.zeros(20)), rtol=1e-6)


def test_nat_both_sides_meets_bound_without_noise(quad):
    c = sgd.measure_problem_constants(quad)
    wW = wM = 0.125
    spec = c.spec(4)
    a, b = alpha_beta(spec, wW, wM)
    assert a == 0.0
    eta = 1 / (2 * b * c.L)
    T = 60
    means = [sgd.run(quad, sgd.SgdConfig(nat(), nat(), eta=eta, T=T, seed=s), c).mean_grad_norm2
             for s in range(20)]
    bound = 2 * c.f0_minus_fstar / (eta * (2 - b * c.L * eta) * T)
    assert np.mean(means) <= bound
    assert bound == pytest.approx(gradient_bound(spec, a, b, eta, T))


def test_single_node_bits():
    p = sgd.quadratic_problem(16, 1, seed=0)
    tr = sgd.run(p, sgd.SgdConfig(nat(), identity(), eta=0.5, T=3))
    assert np.all(tr.bits_w2m == 9 * 16) and np.all(tr.bits_m2w == 32 * 16)


@pytest.mark.parametrize("text, d, bits", [
    ("identity", 100, 3200), ("nat", 100, 900), ("int", 10, 320),
    ("natdither:p=2,s=8", 100, 32 + 500), ("natdither:p=2,s=8,natnorm", 100, 16 + 500),
    ("stddither:p=2,s=3", 10, 32 + 30), ("sparsify:q=10", 100, 10 * (32 + 7)),
    ("compose(nat;sparsify:q=10)", 100, 10 * (9 + 7)),
])
def test_payload_bits(text, d, bits):
    assert sgd.payload_bits(parse_spec(text), d) == bits


def test_determinism(quad):
    cfg = sgd.SgdConfig(parse_spec("natdither:p=2,s=4"), nat(), eta="thm:0.5", T=40, seed=3)
    p = replace(quad, sigma_add=0.05)
    a, b = sgd.run(p, cfg), sgd.run(p, cfg)
    for field in ("f", "grad_norm2", "x_final"):
        assert np.array_equal(getattr(a, field), getattr(b, field))
    c = sgd.run(p, replace(cfg, seed=4))
    assert not np.array_equal(a.x_final, c.x_final)


def test_explicit_eta_range_checked(quad):
    c = sgd.measure_problem_constants(quad)
    with pytest.raises(ConfigurationError):
        sgd.run(quad, sgd.SgdConfig(nat(), nat(), eta=2.0, T=5), c)
    with pytest.raises(ConfigurationError):
        sgd.run(quad, sgd.SgdConfig(eta=0.5), c)
    with pytest.raises(ConfigurationError):
        sgd.run(quad, sgd.SgdConfig(eta="sqrt"), c)  # alpha = 0
    with pytest.raises(ConfigurationError):
        sgd.run(quad, sgd.SgdConfig(eta="bogus:1", T=3), c)


def test_sqrt_rule_runs():
    p = sgd.quadratic_problem(10, 2, seed=0, sigma_add=0.1)
    tr = sgd.run(p, sgd.SgdConfig(nat(), identity(), eta="sqrt", T=50))
    assert tr.k.size == 50 and 0 < tr.eta < 2 / (tr.beta * 1.0)


def test_divergence_guard(quad):
    c = sgd.measure_problem_constants(quad)
    lying = replace(c, L=1e-3)  # lets an unstable step size through
    with pytest.raises(DivergenceError):
        sgd.run(quad, sgd.SgdConfig(identity(), identity(), eta=100.0, T=200), lying)


def test_integer_path_needs_nat():
    with pytest.raises(ConfigurationError):
        sgd.SgdConfig(identity(), nat(), aggregation="ina")
    with pytest.raises(ConfigurationError):
        sgd.SgdConfig(nat(), nat(), aggregation="ina-socket")
    with pytest.raises(ConfigurationError):
        sgd.SgdConfig(aggregation="switch")


def test_ina_paths_agree(quad):
    p = replace(quad, sigma_add=0.05)
    c = sgd.measure_problem_constants(p)
    cfg = sgd.SgdConfig(nat(), nat(), eta="thm:0.5", T=15, seed=2, aggregation="ina", ina_seed=77)
    local = sgd.run(p, cfg, c)
    srv = ina.serve(("127.0.0.1", 0), 4, 77, background=True)
    try:
        remote = sgd.run(p, replace(cfg, aggregation="ina-socket", ina_address=srv.address), c)
    finally:
        srv.shutdown()
        srv.server_close()
    assert np.array_equal(local.x_final, remote.x_final)
    assert np.all(local.bits_w2m == 8 * 20)


def test_linear_speedup_direction():
    # same per-worker noise, so sigma^2 is fixed and alpha = sigma^2 / n halves with n
    floors = []
    for n in (1, 2, 4, 8):
        p = sgd.quadratic_problem(20, n, seed=0, mu=0.5, L=1.0, sigma_add=0.3)
        c = sgd.measure_problem_constants(p)
        a, _ = alpha_beta(c.spec(n), 0.0, 0.0)
        assert a == pytest.approx(c.sigma2 / n)
        runs = [sgd.run(p, sgd.SgdConfig(eta=0.5, T=200, seed=s), c) for s in range(7)]
        floors.append(float(np.median([r.grad_norm2[100:].mean() for r in runs])))
    assert floors == sorted(floors, reverse=True)


def test_estimated_zeta_widens_tolerance():
    p = sgd.logistic_problem(5, 3, m=30, seed=0, identical=False, sigma_add=0.05)
    tr = sgd.run(p, sgd.SgdConfig(nat(), identity(), eta="thm:0.05", seed=0))
    assert tr.zeta2_estimated and tr.bound_tolerance == 2.0
    assert tr.mean_grad_norm2 <= tr.bound * tr.bound_tolerance


def test_config_round_trip(tmp_path):
    f = tmp_path / "run.conf"
    f.write_text("# comment\nproblem = quadratic\nd = 8\nn = 2\nT = 5\nworker_spec = nat\n"
                 "master_spec = compose(nat;sparsify:q=4)\neta = 0.3\nseed = 9\nseeds = 3\n")
    problem, cfg, seeds = sgd.load_config(f)
    assert problem.d == 8 and problem.n == 2
    assert cfg.T == 5 and cfg.eta == "0.3" and seeds == [9, 10, 11]
    tr = sgd.run(problem, cfg)
    buf = io.StringIO()
    sgd.write_trace_csv(tr, buf)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert tuple(rows[0]) == sgd.TRACE_COLUMNS and len(rows) == 6
    assert [int(r[0]) for r in rows[1:]] == list(range(5))


@pytest.mark.parametrize("text", ["d 5", "d = x", "colour = red", "problem = svm"])
def test_config_errors(tmp_path, text):
    f = tmp_path / "bad.conf"
    f.write_text(text + "\n")
    with pytest.raises(ConfigurationError):
        sgd.load_config(f)
