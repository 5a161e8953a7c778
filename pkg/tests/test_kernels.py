import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import IntegrationWarning, quad
from scipy.optimize import curve_fit

from trackcorr.kernels import (
    CirculantSpectrum,
    CorrelationModel,
    ar_correlation,
    ar_spectrum,
    circulant_eigenvalues,
    kappa_to_length_scale,
    length_scale_to_kappa,
    periodic_first_row,
)


@pytest.mark.parametrize("rho,m,expected", [(1.0, 1, 1.0), (450.0, 5, 22500.0), (125.0, 2, 125.0**2 / 3)])
def test_kappa_examples(rho, m, expected):
    assert length_scale_to_kappa(rho, m) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("rho,m", [(1.0, 0), (-1.0, 2), (0.0, 2), (10.0, 1.5)])
def test_kappa_rejects_bad_params(rho, m):
    with pytest.raises(ValueError):
        length_scale_to_kappa(rho, m)


@given(st.floats(1e-3, 1e5), st.integers(1, 40))
def test_kappa_round_trip(rho, m):
    back = kappa_to_length_scale(length_scale_to_kappa(rho, m), m)
    assert abs(back - rho) <= 2 * math.ulp(rho)


def test_model_invariants():
    mod = CorrelationModel(4, 300.0)
    assert mod.kappa == 300.0**2 / 7
    assert CorrelationModel.from_kappa(mod.kappa, 4).rho == pytest.approx(300.0, rel=1e-15)
    with pytest.raises(ValueError):
        CorrelationModel(0, 10.0)


@pytest.mark.parametrize("m", [1, 2, 3, 4, 10])
def test_correlation_at_zero_is_one(m):
    assert ar_correlation(CorrelationModel(m, 200.0), 0.0) == pytest.approx(1.0, abs=1e-15)


def test_order_one_is_exponential():
    mod = CorrelationModel(1, 80.0)
    r = np.linspace(0, 500, 11)
    np.testing.assert_allclose(ar_correlation(mod, r), np.exp(-r / 80.0), rtol=1e-14)


def test_order_two_closed_form():
    mod = CorrelationModel(2, 125.0)
    x = np.linspace(0, 900, 31) / mod.scale
    np.testing.assert_allclose(ar_correlation(mod, x * mod.scale), (1 + x) * np.exp(-x), rtol=1e-13)


@given(st.integers(1, 12), st.floats(1.0, 1000.0), st.floats(0.0, 3.0), st.floats(1e-3, 1.0))
@settings(max_examples=200)
def test_correlation_bounded_and_decreasing(m, rho, a, step):
    mod = CorrelationModel(m, rho)
    c0, c1 = ar_correlation(mod, a * rho), ar_correlation(mod, (a + step) * rho)
    assert 0 < c1 < c0 <= 1


@pytest.mark.parametrize("m", [1, 2, 4, 10])
def test_correlation_near_length_scale(m):
    # the literal length-scale parameter does not give c(rho) ~ 0.1; that level is reached near 2 rho
    mod = CorrelationModel(m, 450.0)
    assert 0.3 < ar_correlation(mod, 450.0) < 0.6
    assert 0.1 <= ar_correlation(mod, 900.0) <= 0.15


def test_large_order_is_quasi_gaussian():
    mod = CorrelationModel(10, 450.0)
    r = np.linspace(0, 3000, 601)
    c = ar_correlation(mod, r)
    (L,), _ = curve_fit(lambda rr, L: np.exp(-rr**2 / (2 * L**2)), r, c, p0=[400.0])
    assert np.max(np.abs(c - np.exp(-r**2 / (2 * L**2)))) <= 0.02


def test_spectrum_peak_and_monotone():
    mod = CorrelationModel(3, 200.0)
    k = np.linspace(0, 0.1, 400)
    s = ar_spectrum(mod, k)
    assert np.argmax(s) == 0
    assert np.all(np.diff(s) < 0)


@pytest.mark.parametrize("m", [1, 2, 5])
def test_doubling_order_doubles_log_slope(m):
    # d log S / d log k = -2 m kappa k^2 / (1 + kappa k^2); kappa also shrinks with m at fixed rho
    k = 1.0
    slopes = []
    for order in (m, 2 * m):
        mod = CorrelationModel(order, 450.0)
        kk = np.array([k * 0.999, k * 1.001])
        s = np.log(ar_spectrum(mod, kk))
        slopes.append((s[1] - s[0]) / (np.log(kk[1]) - np.log(kk[0])))
    assert slopes[1] / slopes[0] >= 1.99


def test_larger_rho_moves_rolloff_to_larger_scales():
    k = np.array([0.0, 0.01])
    small, large = ar_spectrum(CorrelationModel(2, 100.0), k), ar_spectrum(CorrelationModel(2, 400.0), k)
    assert large[1] / large[0] < small[1] / small[0]


def _cosine_transform(mod, r):
    # c(r) = (1/pi) int_0^inf S(k) cos(k r) dk
    spec = lambda k: ar_spectrum(mod, k)
    if r == 0.0:
        return quad(spec, 0, np.inf, epsabs=1e-13, epsrel=1e-12)[0] / math.pi
    if mod.m == 1:
        # the slow 1/k^2 tail trips QUADPACK's cycle heuristics; the value still meets the test tolerance
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", IntegrationWarning)
            return quad(spec, 0, np.inf, weight="cos", wvar=r, epsabs=1e-13)[0] / math.pi
    # steep spectra: truncate where S has dropped by 1e-14, the tail is far below tolerance
    kmax = math.sqrt((1e14 ** (1.0 / mod.m) - 1.0) / mod.kappa)
    return quad(spec, 0, kmax, weight="cos", wvar=r, epsabs=1e-13, limit=2000)[0] / math.pi


@pytest.mark.parametrize("m,rho", [(1, 100.0), (2, 125.0), (4, 300.0), (10, 450.0)])
def test_inverse_fourier_transform_reproduces_correlation(m, rho):
    mod = CorrelationModel(m, rho)
    r = np.linspace(0.0, 4 * rho, 21)
    vals = np.array([_cosine_transform(mod, rr) for rr in r])
    assert np.max(np.abs(vals - ar_correlation(mod, r))) <= 1e-6


def test_white_noise_eigenvalues():
    spec = circulant_eigenvalues(None, 32, 10.0)
    np.testing.assert_array_equal(spec.eigenvalues, np.ones(32))


@pytest.mark.parametrize("p,h,m,rho", [(64, 25.0, 2, 100.0), (40, 50.0, 10, 250.0), (17, 30.0, 1, 60.0)])
def test_eigenvalues_match_dense_oracle(p, h, m, rho):
    spec = circulant_eigenvalues(CorrelationModel(m, rho), p, h)
    row = spec.first_row
    dense = np.array([[row[(j - i) % p] for j in range(p)] for i in range(p)])
    np.testing.assert_allclose(np.sort(spec.eigenvalues), np.sort(np.linalg.eigvalsh(dense)), atol=1e-8)
    assert spec.eigenvalues.mean() == pytest.approx(1.0, abs=1e-10)
    np.testing.assert_allclose(np.fft.ifft(spec.eigenvalues).real, row, atol=1e-10)
    np.testing.assert_array_equal(spec.eigenvalues[1:], spec.eigenvalues[1:][::-1])


def test_first_row_is_symmetric_with_unit_diagonal():
    row = periodic_first_row(CorrelationModel(2, 100.0), 50, 20.0)
    assert row[0] == 1.0
    np.testing.assert_allclose(row[1:], row[1:][::-1], rtol=1e-14)


def test_smallest_scale_eigenvalue_is_tiny():
    spec = circulant_eigenvalues(CorrelationModel(10, 250.0), 1600, 25.0)
    assert spec.eigenvalues[800] <= 1e-12
    assert spec.eigenvalues.min() >= 0


def test_domain_guard():
    with pytest.raises(ValueError, match="shorter"):
        circulant_eigenvalues(CorrelationModel(2, 100.0), 20, 5.0)
    spec = circulant_eigenvalues(CorrelationModel(2, 100.0), 20, 5.0, min_domain_ratio=0.5)
    assert spec.p == 20


def test_interpolation_hits_grid_values():
    spec = circulant_eigenvalues(CorrelationModel(4, 200.0), 128, 25.0)
    k = np.arange(128)
    np.testing.assert_allclose(spec.interpolate(k), spec.eigenvalues, atol=1e-12)


def test_spectrum_rejects_negative_or_misshaped():
    with pytest.raises(ValueError):
        CirculantSpectrum(3, 1.0, np.array([1.0, -0.5, 1.0]))
    with pytest.raises(ValueError):
        CirculantSpectrum(3, 1.0, np.ones(4))


def test_eigenvalues_are_read_only():
    spec = circulant_eigenvalues(None, 8, 1.0)
    with pytest.raises(ValueError):
        spec.eigenvalues[0] = 2.0


def test_no_warning_for_well_posed_spectrum():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        circulant_eigenvalues(CorrelationModel(10, 250.0), 1600, 25.0)
