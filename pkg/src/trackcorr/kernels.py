"""AR (Matérn-class) correlation functions, their spectra and circulant eigenvalues.

The AR function of order ``m`` is the smoothing kernel of ``m`` implicit
diffusion steps with constant diffusion coefficient ``kappa``. In 1D it is a
Matérn function with smoothness ``m - 1/2``, i.e. a polynomial of degree
``m - 1`` in ``r / sqrt(kappa)`` times ``exp(-r / sqrt(kappa))``.
"""
from __future__ import annotations

import math
import warnings
from fractions import Fraction
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CorrelationModel",
    "CirculantSpectrum",
    "length_scale_to_kappa",
    "kappa_to_length_scale",
    "ar_correlation",
    "ar_spectrum",
    "circulant_eigenvalues",
    "periodic_first_row",
]

NEGATIVE_EIGENVALUE_TOL = 1e-10


def length_scale_to_kappa(rho, m):
    """Diffusion coefficient (km^2) for length-scale ``rho`` (km) and order ``m``."""
    if int(m) != m or m < 1:
        raise ValueError(f"m must be a positive integer, got {m}")
    if not rho > 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    return rho**2 / (2 * int(m) - 1)


def kappa_to_length_scale(kappa, m):
    return math.sqrt(kappa * (2 * int(m) - 1))


@dataclass(frozen=True)
class CorrelationModel:
    """Parameters of one AR correlation kernel.

    ``m`` is the number of implicit diffusion iterations and ``rho`` the
    length-scale parameter in km; ``kappa`` is derived from both.
    """

    m: int
    rho: float
    kappa: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "kappa", length_scale_to_kappa(self.rho, self.m))
        object.__setattr__(self, "m", int(self.m))

    @classmethod
    def from_kappa(cls, kappa, m):
        return cls(m=m, rho=kappa_to_length_scale(kappa, m))

    @property
    def scale(self):
        """Decay scale ``sqrt(kappa)`` of the exponential factor."""
        return math.sqrt(self.kappa)


def _ar_polynomial_coefficients(m):
    # c(x) = exp(-x) * sum_i a_i x^(m-1-i); Matérn half-integer closed form
    # exact rationals, so the constant term is exactly 1 and c(0) = 1
    n = m - 1
    return [
        float(
            Fraction(
                math.factorial(n) * math.factorial(n + i) * 2 ** (n - i),
                math.factorial(2 * n) * math.factorial(i) * math.factorial(n - i),
            )
        )
        for i in range(m)
    ]


def ar_correlation(model: CorrelationModel, r):
    """Correlation at separation ``r`` (km); scalar or array input."""
    r = np.abs(np.asarray(r, dtype=float))
    x = r / model.scale
    coefs = _ar_polynomial_coefficients(model.m)
    poly = np.zeros_like(x)
    for a in coefs:
        poly = poly * x + a
    out = poly * np.exp(-x)
    return out if out.ndim else float(out)


def ar_spectrum(model: CorrelationModel, k):
    """Spectral density of the AR function at angular wavenumbers ``k`` (rad/km).

    Normalized so that ``(1/2pi) * integral S(k) exp(ikr) dk`` is the
    correlation, which makes it equal to 1 at zero lag.
    """
    k = np.asarray(k, dtype=float)
    kappa, m = model.kappa, model.m
    peak = 2.0 * math.sqrt(math.pi * kappa) * math.exp(math.lgamma(m) - math.lgamma(m - 0.5))
    return peak * (1.0 + kappa * k**2) ** (-m)


def periodic_first_row(model, p, h, min_domain_ratio=6.0):
    """First row of the ``p x p`` circulant correlation matrix on a periodic grid.

    Entry ``j`` is the kernel summed over all periodic images of lag ``j*h``,
    rescaled so the diagonal is exactly 1. ``model=None`` gives white noise.
    """
    if p < 2:
        raise ValueError("p must be >= 2")
    if not h > 0:
        raise ValueError("h must be > 0")
    row = np.zeros(p)
    if model is None:
        row[0] = 1.0
        return row
    length = p * h
    if length < min_domain_ratio * model.rho:
        raise ValueError(
            f"periodic domain {length:g} km is shorter than {min_domain_ratio:g} * rho = "
            f"{min_domain_ratio * model.rho:g} km"
        )
    lags = np.arange(p) * h
    row = ar_correlation(model, lags)
    shift = 1
    while True:
        image = ar_correlation(model, lags + shift * length) + ar_correlation(model, lags - shift * length)
        row = row + image
        if image.max() < 1e-17:
            break
        shift += 1
    return row / row[0]


@dataclass(frozen=True)
class CirculantSpectrum:
    """Eigenvalues (DFT order) of a circulant correlation matrix on a periodic grid."""

    p: int
    h: float
    eigenvalues: np.ndarray
    first_row: np.ndarray | None = None

    def __post_init__(self):
        lam = np.asarray(self.eigenvalues, dtype=float)
        if lam.shape != (self.p,):
            raise ValueError(f"expected {self.p} eigenvalues, got shape {lam.shape}")
        if np.any(lam < 0):
            raise ValueError("eigenvalues must be >= 0")
        lam.setflags(write=False)
        object.__setattr__(self, "eigenvalues", lam)

    def interpolate(self, k):
        """Evaluate the spectrum at real-valued wavenumber index ``k``.

        Uses the real cosine series of the first row over signed lags
        ``-p/2 .. p/2``, so integer ``k`` reproduces ``eigenvalues[k]``.
        """
        if self.first_row is None:
            raise ValueError("spectrum was built without its first row")
        k = np.asarray(k, dtype=float)
        theta = 2.0 * np.pi * k / self.p
        j = np.arange(self.p)
        lag = np.where(j <= self.p // 2, j, j - self.p)
        return np.cos(np.multiply.outer(theta, lag)) @ self.first_row


def circulant_eigenvalues(model, p, h, min_domain_ratio=6.0):
    """Eigenvalues of the periodic circulant correlation matrix for ``model``.

    ``model=None`` gives the uncorrelated case (all eigenvalues 1).
    """
    row = periodic_first_row(model, p, h, min_domain_ratio=min_domain_ratio)
    spec = np.fft.fft(row)
    imag = np.max(np.abs(spec.imag))
    if imag > 1e-10:
        raise ArithmeticError(f"circulant spectrum has imaginary residue {imag:.3g}")
    lam = spec.real.copy()
    # entry k and entry p - k agree up to rounding; make it exact
    lam[1:] = 0.5 * (lam[1:] + lam[1:][::-1])
    if lam.min() < -NEGATIVE_EIGENVALUE_TOL:
        warnings.warn(f"clamping negative eigenvalue {lam.min():.3g} to 0", RuntimeWarning, stacklevel=2)
    np.maximum(lam, 0.0, out=lam)
    return CirculantSpectrum(p=int(p), h=float(h), eigenvalues=lam, first_row=row)
