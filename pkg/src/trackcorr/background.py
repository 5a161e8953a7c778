"""Homogeneous background-error covariance on a uniform periodic grid, applied in Fourier space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_vector
from .kernels import CirculantSpectrum, CorrelationModel, circulant_eigenvalues

__all__ = ["BackgroundCov", "build_B", "apply_B", "apply_B_sqrt"]


@dataclass(frozen=True)
class BackgroundCov:
    n: int
    h: float
    sigma_b: float
    model: CorrelationModel | None
    spectrum: CirculantSpectrum

    @property
    def variances(self):
        """Scale-dependent variances ``sigma_b^2 lambda_b`` in DFT order."""
        return self.sigma_b**2 * self.spectrum.eigenvalues

    def _filter(self, v, weights):
        v = as_vector(v, self.n)
        half = weights[: self.n // 2 + 1]
        shape = (-1,) + (1,) * (v.ndim - 1)
        return np.fft.irfft(np.fft.rfft(v, axis=0) * half.reshape(shape), n=self.n, axis=0)

    def apply(self, v):
        return self._filter(v, self.variances)

    def apply_sqrt(self, eta):
        return self._filter(eta, self.sigma_b * np.sqrt(self.spectrum.eigenvalues))

    def to_dense(self):
        return self.apply(np.eye(self.n))


def build_B(n, h, sigma_b, model: CorrelationModel | None, min_domain_ratio=6.0):
    """Circulant ``B = sigma_b^2 C_b`` with AR correlation ``model`` (``None`` for white noise)."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if not sigma_b > 0:
        raise ValueError("sigma_b must be > 0")
    spec = circulant_eigenvalues(model, n, h, min_domain_ratio=min_domain_ratio)
    return BackgroundCov(n=int(n), h=float(h), sigma_b=float(sigma_b), model=model, spectrum=spec)


def apply_B(B: BackgroundCov, v):
    return B.apply(v)


def apply_B_sqrt(B: BackgroundCov, eta):
    return B.apply_sqrt(eta)
