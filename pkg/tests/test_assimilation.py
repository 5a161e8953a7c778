import numpy as np
import pytest

from trackcorr import assimilation as A
from trackcorr.background import build_B
from trackcorr.config import ConfigError, CovConfig, ExperimentConfig, GridConfig, ObsLayoutConfig
from trackcorr.kernels import CorrelationModel


class WhiteR:
    """Minimal diagonal observation-error covariance."""

    def __init__(self, sigma, p):
        self.sigma, self.size = float(sigma), p

    def apply_inverse(self, v):
        return np.asarray(v, dtype=float) / self.sigma**2


def small_problem(n=40, stride=1, spec=CovConfig(0.9, 2, 40.0)):
    cfg = ExperimentConfig(
        grid=GridConfig(n, 25.0),
        background=CovConfig(1.0, 10, 150.0),
        truth=CovConfig(0.7, 2, 60.0),
        specified=spec,
        obs=ObsLayoutConfig(mode="stride", stride=stride),
    ).validate()
    return A.build_operators(cfg)


def dense_solution(B, Rs, G, d):
    Bd, Gd = B.to_dense(), G.to_dense()
    Rd = np.linalg.inv(Rs.apply_inverse(np.eye(G.p)))
    return Bd @ Gd.T @ np.linalg.solve(Gd @ Bd @ Gd.T + Rd, d)


def test_single_observation_equal_variances_splits_innovation():
    B = build_B(64, 25.0, 1.3, CorrelationModel(4, 100.0))
    G = A.select_indices([10], 64)
    res = A.minimize(B, WhiteR(1.3, 1), G, np.array([2.0]))
    assert res.converged
    assert res.increment[10] == pytest.approx(1.0, rel=1e-10)
    # the increment spreads with the background correlation
    np.testing.assert_allclose(res.increment, B.to_dense()[:, 10] / 1.3**2, rtol=1e-10, atol=1e-14)


def test_zero_noise_innovation():
    B, Rt, _, G = small_problem()
    st = A.simulate_innovation(B, Rt, G, 5, zero_noise=True)
    np.testing.assert_array_equal(st.d, 0.0)
    res = A.minimize(B, Rt, G, st.d)
    np.testing.assert_array_equal(res.increment, 0.0)
    assert res.n_iter == 0 and res.converged


def test_innovation_deterministic_and_shapes():
    B, Rt, _, G = small_problem(stride=2)
    a = A.simulate_innovation(B, Rt, G, 11)
    b = A.simulate_innovation(B, Rt, G, 11)
    np.testing.assert_array_equal(a.d, b.d)
    assert a.eps_b.shape == (40,) and a.eps_o.shape == (20,) and a.d.shape == (20,)
    np.testing.assert_allclose(a.d, a.eps_o - a.eps_b[G.indices])
    c = A.simulate_innovation(B, Rt, G, 12)
    assert not np.array_equal(a.d, c.d)


def test_batch_matches_single_draws():
    B, Rt, _, G = small_problem(stride=2)
    seeds = A.replicate_seeds(3, 4)
    eb, eo, d = A.simulate_batch(B, Rt, G, seeds)
    for j, s in enumerate(seeds):
        st = A.simulate_innovation(B, Rt, G, s)
        np.testing.assert_allclose(d[:, j], st.d, atol=1e-13)
        np.testing.assert_allclose(eb[:, j], st.eps_b, atol=1e-13)


def test_innovation_covariance_monte_carlo():
    B, Rt, _, G = small_problem(n=40, stride=2)
    N = 10_000
    _, _, d = A.simulate_batch(B, Rt, G, A.replicate_seeds(0, N))
    emp = d @ d.T / N
    Gd = G.to_dense()
    expected = Gd @ B.to_dense() @ Gd.T + Rt.to_dense()
    se = np.sqrt((np.outer(np.diag(expected), np.diag(expected)) + expected**2) / N)
    assert np.mean(np.abs(emp - expected) <= 3 * se) >= 0.97


@pytest.mark.parametrize("n,stride", [(40, 1), (40, 2), (50, 5)])
def test_converges_within_p_iterations_and_matches_dense(n, stride):
    B, Rt, Rs, G = small_problem(n=n, stride=stride)
    st = A.simulate_innovation(B, Rt, G, 3)
    res = A.minimize(B, Rs, G, st.d)
    assert res.converged and res.n_iter <= G.p
    x = dense_solution(B, Rs, G, st.d)
    assert np.linalg.norm(res.increment - x) <= 1e-8 * np.linalg.norm(x)


def test_cost_non_increasing_and_iterate_zero():
    B, Rt, Rs, G = small_problem(n=50, stride=2)
    st = A.simulate_innovation(B, Rt, G, 8)
    res = A.minimize(B, Rs, G, st.d, eps_b=st.eps_b, record_iterates=True)
    c = res.cost
    assert np.all(np.diff(c) <= 1e-12 * abs(c[0]))
    np.testing.assert_array_equal(res.iterates[0], 0.0)
    assert res.rms[0] == pytest.approx(np.sqrt(np.mean(st.eps_b**2)), rel=1e-14)
    np.testing.assert_allclose(A.analysis_error_series(res.iterates, st.eps_b), res.rms, rtol=1e-12)
    assert res.grad_bnorm_rel[0] == 1.0 and res.grad_bnorm_rel[-1] <= 1e-10


def test_cost_at_zero_is_half_weighted_innovation():
    B, Rt, Rs, G = small_problem(stride=2)
    st = A.simulate_innovation(B, Rt, G, 1)
    res = A.minimize(B, Rs, G, st.d, max_iter=0)
    assert res.cost[0] == pytest.approx(0.5 * st.d @ Rs.apply_inverse(st.d), rel=1e-12)
    assert not res.converged and res.n_iter == 0


def test_perfect_observation_limit():
    n = 32
    B = build_B(n, 25.0, 1.0, CorrelationModel(4, 100.0))
    G = A.select_every(n)
    eps_b = B.apply_sqrt(np.random.default_rng(0).standard_normal(n))
    d = -eps_b
    errs = []
    for s in (1e-1, 1e-2, 1e-3):
        res = A.minimize(B, WhiteR(s, n), G, d, eps_b=eps_b)
        errs.append(res.rms[-1])
    assert errs[0] > errs[1] > errs[2]
    assert errs[2] < 1e-3 * np.sqrt(np.mean(eps_b**2))


def test_batch_equals_columnwise():
    B, Rt, Rs, G = small_problem(stride=2)
    seeds = A.replicate_seeds(1, 5)
    eb, _, d = A.simulate_batch(B, Rt, G, seeds)
    batch = A.minimize(B, Rs, G, d, eps_b=eb)
    for j in range(5):
        one = A.minimize(B, Rs, G, d[:, j], eps_b=eb[:, j])
        assert one.n_iter == batch.n_iter[j]
        np.testing.assert_allclose(batch.increment[:, j], one.increment, rtol=0, atol=1e-12 * np.abs(one.increment).max())
        k = one.n_iter + 1
        np.testing.assert_allclose(batch.rms[:k, j], one.rms, rtol=1e-11)
        # converged columns are padded with their final value
        np.testing.assert_array_equal(batch.rms[k:, j], one.rms[-1])


def test_analysis_error_spectrum_fourier_consistency(rng):
    x = rng.standard_normal((64, 30))
    spec = A.analysis_error_spectrum(x)
    # Parseval: the mean of the spectrum is the mean squared value
    assert spec.mean() == pytest.approx(np.mean(x * x), rel=1e-12)
    B = build_B(64, 25.0, 1.0, CorrelationModel(4, 100.0))
    draws = B.apply_sqrt(rng.standard_normal((64, 20_000)))
    emp = A.analysis_error_spectrum(draws)
    lam = B.spectrum.eigenvalues
    big = lam > 1e-2 * lam.max()
    # each mode's power is a mean of 20000 chi-square(1 or 2) variables
    np.testing.assert_allclose(emp[big], lam[big], rtol=0.06)


def test_analysis_error_spectrum_exact_for_eigenvector():
    n = 16
    j = np.arange(n)
    v = np.cos(2 * np.pi * 3 * j / n)
    spec = A.analysis_error_spectrum(v)
    expected = np.zeros(n)
    expected[[3, n - 3]] = n / 4
    np.testing.assert_allclose(spec, expected, atol=1e-12)


def test_selection_operator_validation():
    G = A.select_stride(10, 3, 1)
    np.testing.assert_array_equal(G.indices, [1, 4, 7])
    x = np.arange(10.0)
    y = np.array([1.0, 2.0, 3.0])
    assert G.apply(x) @ y == pytest.approx(x @ G.adjoint(y))
    np.testing.assert_array_equal(G.to_dense() @ x, G.apply(x))
    for bad in ([3, 2], [0, 0], [-1, 2], [0, 10], []):
        with pytest.raises(ValueError):
            A.select_indices(bad, 10)
    with pytest.raises(ValueError):
        A.select_indices([0.5, 1.5], 10)
    with pytest.raises(ValueError):
        G.apply(np.ones(9))


def test_read_layout(tmp_path):
    f = tmp_path / "idx.csv"
    f.write_text("state_index\n4\n1\n7\n")
    np.testing.assert_array_equal(A.read_layout(f, 10, 25.0).indices, [1, 4, 7])
    g = tmp_path / "arc.csv"
    g.write_text("arc_km\n0\n49\n260\n")
    # 260 km wraps onto grid point 0 of a 250 km domain
    with pytest.raises(ConfigError, match="same grid point"):
        A.read_layout(g, 10, 25.0)
    np.testing.assert_array_equal(A.read_layout(g, 20, 25.0).indices, [0, 2, 10])
    dup = tmp_path / "dup.csv"
    dup.write_text("arc_km\n0\n5\n")
    for path in (dup, tmp_path / "missing.csv"):
        with pytest.raises(ConfigError):
            A.read_layout(path, 10, 25.0)
    bad = tmp_path / "bad.csv"
    bad.write_text("x\n1\n")
    with pytest.raises(ConfigError, match="obs.file"):
        A.read_layout(bad, 10, 25.0)


def test_observation_mesh_is_periodic():
    G = A.select_stride(12, 4)
    mesh = A.observation_mesh(G, 25.0)
    assert mesh.periodic
    np.testing.assert_allclose(mesh.edges, 100.0)


def test_dimension_mismatch():
    B, Rt, _, _ = small_problem(stride=2)
    with pytest.raises(ValueError):
        A.simulate_innovation(B, Rt, A.select_every(40), 0)


def test_run_experiment_independent_of_workers_and_batches():
    cfg = ExperimentConfig(
        grid=GridConfig(64, 25.0),
        background=CovConfig(1.0, 4, 120.0),
        obs=ObsLayoutConfig(mode="stride", stride=2),
        replicates=7,
        seed=4,
        batch_size=3,
    ).validate()
    one = A.run_experiment(cfg)
    two = A.run_experiment(cfg, workers=2)
    assert one.csv_text() == two.csv_text()
    assert one.replicates == 7 and one.converged.all()
    s = one.summary()
    assert s["final_rms"]["mean"] < s["initial_rms"]["mean"]
    assert s["final_rms"]["ci_low"] <= s["final_rms"]["mean"] <= s["final_rms"]["ci_high"]
    header, *rows = one.csv_text().splitlines()
    assert header == ",".join(A.REPORT_COLUMNS)
    assert len(rows) == int(np.sum(one.n_iter + 1))


def test_zero_replicates_empty_report():
    cfg = ExperimentConfig(grid=GridConfig(64, 25.0), background=CovConfig(1.0, 4, 120.0), replicates=0).validate()
    rep = A.run_experiment(cfg)
    assert rep.replicates == 0
    assert rep.csv_text() == ",".join(A.REPORT_COLUMNS) + "\n"
    assert rep.summary()["final_rms"] is None


def test_specified_shares_truth_when_equal():
    B, Rt, Rs, G = small_problem(spec=CovConfig(0.7, 2, 60.0))
    assert Rs is Rt
