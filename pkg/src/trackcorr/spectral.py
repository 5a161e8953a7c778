"""Scale-by-scale analysis in the circulant framework.

When ``G B G^T`` and ``R`` are circulant, the gain and the analysis-error
covariance are diagonal in the Fourier basis, so every quantity reduces to a
scalar formula per wavenumber.

Figures use the scale axis ``p h / k`` with ``k = 1..p``, where the ``p``
Fourier modes are ranked by increasing absolute frequency (the mean mode is
``k = 1``, and the two modes of each nonzero frequency take consecutive
ranks). :func:`scale_order` gives that ranking.
"""
from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .kernels import CirculantSpectrum

__all__ = [
    "ScaleDecomposition",
    "SensitivitySpectrum",
    "sensitivity_spectrum",
    "optimal_analysis_spectrum",
    "suboptimal_analysis_spectrum",
    "analysis_error_ratio",
    "ratio_surface",
    "spectral_increment",
    "scalar_analysis",
    "wavenumber_to_scale",
    "scale_order",
    "scale_axis",
    "operator_spectrum",
    "variance_crossing",
    "decomposition_rows",
    "decomposition_csv",
    "ratio_surface_csv",
]


@dataclass(frozen=True)
class ScaleDecomposition:
    """Background, true and (optionally) specified observation-error spectra on one grid.

    The ``lam_*`` arrays hold correlation eigenvalues in DFT order; the
    ``sigma_*2`` fields are the variances that scale them.
    """

    p: int
    h: float
    sigma_b2: float
    sigma_o2: float
    lam_b: np.ndarray
    lam_o: np.ndarray
    sigma_o2_tilde: float | None = None
    lam_o_tilde: np.ndarray | None = None

    def __post_init__(self):
        for name in ("lam_b", "lam_o", "lam_o_tilde"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=float)
            if arr.shape != (self.p,):
                raise ValueError(f"{name} must have length {self.p}")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be >= 0")
            object.__setattr__(self, name, arr)
        if not (self.sigma_b2 > 0 and self.sigma_o2 > 0):
            raise ValueError("variances must be > 0")
        if (self.lam_o_tilde is None) != (self.sigma_o2_tilde is None):
            raise ValueError("sigma_o2_tilde and lam_o_tilde go together")
        if self.sigma_o2_tilde is not None and not self.sigma_o2_tilde > 0:
            raise ValueError("sigma_o2_tilde must be > 0")

    @property
    def var_b(self):
        return self.sigma_b2 * self.lam_b

    @property
    def var_o(self):
        return self.sigma_o2 * self.lam_o

    @property
    def var_o_tilde(self):
        if self.lam_o_tilde is None:
            raise ValueError("no specified (practical) observation-error spectrum")
        return self.sigma_o2_tilde * self.lam_o_tilde

    @property
    def has_practical(self):
        return self.lam_o_tilde is not None


@dataclass(frozen=True)
class SensitivitySpectrum:
    lam_s: np.ndarray
    optimal: bool = True


def sensitivity_spectrum(dec: ScaleDecomposition, use_practical=False):
    """``1 / (1 + nu_k)`` with ``nu_k`` the ratio of observation to background variance at scale k."""
    var_o = dec.var_o_tilde if use_practical else dec.var_o
    var_b = dec.var_b
    zero = var_b == 0
    if np.any(zero):
        warnings.warn("zero background variance at some scales; sensitivity set to 0 there", RuntimeWarning, stacklevel=2)
    with np.errstate(divide="ignore", invalid="ignore"):
        lam_s = np.where(zero, 0.0, var_b / (var_b + var_o))
    return SensitivitySpectrum(lam_s=lam_s, optimal=not use_practical)


def _harmonic(a, b):
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a * b / (a + b)
    return np.where((a == 0) | (b == 0), 0.0, out)


def optimal_analysis_spectrum(dec: ScaleDecomposition):
    """Optimal analysis-error variance per scale, ``(1/var_b + 1/var_o)^-1``."""
    return _harmonic(dec.var_b, dec.var_o)


def suboptimal_analysis_spectrum(dec: ScaleDecomposition):
    """Analysis-error variance per scale when the gain uses the specified observation spectrum."""
    vb, vo, vt = dec.var_b, dec.var_o, dec.var_o_tilde
    den = (vt + vb) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (vb * vt**2 + vo * vb**2) / den
    return np.where(den == 0, 0.0, out)


def analysis_error_ratio(eta_oo, eta_ob):
    """Suboptimal over optimal analysis-error variance at one scale.

    ``eta_oo`` is specified over true observation-error variance and
    ``eta_ob`` true observation over background variance at that scale.
    """
    t = np.asarray(eta_oo, dtype=float)
    q = np.asarray(eta_ob, dtype=float)
    if np.any(t <= 0) or np.any(q <= 0):
        raise ValueError("ratios must be > 0")
    qt2 = (q * t) ** 2
    out = (1.0 + qt2 + (1.0 + t**2) * q) / (1.0 + qt2 + 2.0 * t * q)
    return out if out.ndim else float(out)


def ratio_surface(grid_oo, grid_ob):
    """Matrix of :func:`analysis_error_ratio`; rows follow ``grid_ob``, columns ``grid_oo``."""
    t, q = np.meshgrid(np.asarray(grid_oo, float), np.asarray(grid_ob, float))
    return analysis_error_ratio(t, q)


def spectral_increment(lam_s, innovation_spectrum):
    lam_s = np.asarray(lam_s)
    d_hat = np.asarray(innovation_spectrum)
    if lam_s.shape[0] != d_hat.shape[0]:
        raise ValueError(f"length mismatch: {lam_s.shape[0]} vs {d_hat.shape[0]}")
    return lam_s.reshape((-1,) + (1,) * (d_hat.ndim - 1)) * d_hat


def scalar_analysis(d, sigma_o2, sigma_b2):
    """Increment and analysis variance for one direct observation of a scalar."""
    if not (sigma_o2 >= 0 and sigma_b2 > 0):
        raise ValueError("variances must be positive")
    increment = d / (1.0 + sigma_o2 / sigma_b2)
    variance = 0.0 if sigma_o2 == 0 else 1.0 / (1.0 / sigma_b2 + 1.0 / sigma_o2)
    return increment, variance


def wavenumber_to_scale(k, p, h):
    """Spatial scale ``p h / k`` in km for rank ``1 <= k <= p``."""
    k = np.asarray(k)
    if np.any(k < 1) or np.any(k > p):
        raise ValueError(f"k must lie in [1, {p}]; the mean mode has no finite-k scale")
    out = p * h / k
    return out if np.ndim(out) else float(out)


def scale_order(p):
    """DFT indices ranked by increasing absolute frequency: 0, 1, p-1, 2, p-2, ..."""
    k = np.arange(p)
    return np.argsort(np.minimum(k, p - k), kind="stable")


def scale_axis(p, h):
    """(DFT index, scale in km) for ranks 1..p, largest scale first."""
    return scale_order(p), wavenumber_to_scale(np.arange(1, p + 1), p, h)


def operator_spectrum(apply, p):
    """Diagonal of ``F^H R F`` for an operator given by its action on a batch of vectors.

    For a circulant operator these are its eigenvalues in DFT order; for a
    nearly circulant one they are the variances of each Fourier mode.
    """
    dense = apply(np.eye(p))
    return np.real(np.diagonal(np.fft.ifft(np.fft.fft(dense, axis=0), axis=1))).copy()


def variance_crossing(spec_b: CirculantSpectrum, sigma_b2, spec_o: CirculantSpectrum, sigma_o2):
    """Locate where background and observation variances cross.

    Searches the first sign change over frequencies ``0..p/2`` and refines it
    on the trigonometric interpolants of both spectra. Returns a dict with the
    fractional frequency index, the scale ``p h / (2 k)`` on the ranked axis,
    the common variance and the sensitivity there.
    """
    p = spec_b.p
    half = np.arange(p // 2 + 1)

    def gap(k):
        return np.log(sigma_b2 * spec_b.interpolate(k)) - np.log(sigma_o2 * spec_o.interpolate(k))

    with np.errstate(divide="ignore"):
        g = np.log(sigma_b2 * spec_b.eigenvalues[half]) - np.log(sigma_o2 * spec_o.eigenvalues[half])
    change = np.flatnonzero(np.sign(g[:-1]) != np.sign(g[1:]))
    if change.size == 0:
        raise ValueError("background and observation variances do not cross")
    j = int(change[0])
    k = brentq(gap, j, j + 1, xtol=1e-13, rtol=1e-15) if g[j + 1] != 0 else float(j + 1)
    vb = float(sigma_b2 * spec_b.interpolate(k))
    vo = float(sigma_o2 * spec_o.interpolate(k))
    return {
        "k": float(k),
        "scale_km": p * spec_b.h / (2.0 * k),
        "var_b": vb,
        "var_o": vo,
        "lam_s": vb / (vb + vo),
        "n_crossings": int(change.size),
    }


DECOMPOSITION_COLUMNS = ("scale_km", "lam_b_var", "lam_o_var", "lam_s", "lam_a_var", "lam_a_var_subopt")


def decomposition_rows(dec: ScaleDecomposition):
    """Rows of the scale decomposition, largest scale first.

    ``lam_a_var_subopt`` repeats the optimal value when no specified
    observation spectrum is present.
    """
    order, scales = scale_axis(dec.p, dec.h)
    lam_s = sensitivity_spectrum(dec).lam_s
    opt = optimal_analysis_spectrum(dec)
    sub = suboptimal_analysis_spectrum(dec) if dec.has_practical else opt
    cols = (dec.var_b, dec.var_o, lam_s, opt, sub)
    return [(float(s),) + tuple(float(c[i]) for c in cols) for s, i in zip(scales, order)]


def _to_csv(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in row])
    return buf.getvalue()


def decomposition_csv(dec: ScaleDecomposition):
    return _to_csv(DECOMPOSITION_COLUMNS, decomposition_rows(dec))


def ratio_surface_csv(grid_oo, grid_ob):
    surf = ratio_surface(grid_oo, grid_ob)
    rows = [
        (float(t), float(q), float(surf[i, j]))
        for i, q in enumerate(grid_ob)
        for j, t in enumerate(grid_oo)
    ]
    return _to_csv(("eta_oo", "eta_ob", "eta_aa"), rows)
