"""P1 finite-element implicit diffusion on a track mesh.

With lumped mass ``Mb`` and stiffness ``A`` the inverse diffusion operator is
exact and cheap::

    D^-1 = Mb [Mb^-1 (Mb + A)]^m

while ``D`` itself is applied as ``Mb^-1/2 [T^-1]^m Mb^-1/2`` with
``T = I + Mb^-1/2 A Mb^-1/2``. The ``m`` solves with ``T`` use a fixed number of
Chebyshev iterations: forward iterations for the first ``m/2`` solves and
their exact adjoint for the rest, so the approximate ``D`` stays symmetric.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh_tridiagonal
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted, column_or_1d

from ._validation import as_vector, broadcast_diag
from .kernels import CorrelationModel
from .mesh import MeshPartition, TrackMesh

__all__ = [
    "Tridiagonal",
    "AssembledOperators",
    "ChebyshevCalibration",
    "DiffusionOperator",
    "DiffusionCorrelation",
    "assemble",
    "estimate_extreme_eigenvalues",
    "calibrate_chebyshev",
    "chebyshev_coefficients",
    "chebyshev_solve",
    "chebyshev_solve_adjoint",
    "apply_inverse_diffusion",
    "apply_diffusion",
    "impulse_combs",
    "compute_normalization",
    "operator_rows_csv",
]


@dataclass(frozen=True)
class Tridiagonal:
    """Symmetric matrix with per-row coefficients on the mesh neighbours.

    Row ``i`` reads ``diag[i] v[i] + lower[i] v[i-1] + upper[i] v[i+1]`` with
    indices taken cyclically; on an open track the end coefficients are 0.
    """

    diag: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def rows(self, centre, left, right):
        return (
            broadcast_diag(self.diag, centre) * centre
            + broadcast_diag(self.lower, centre) * left
            + broadcast_diag(self.upper, centre) * right
        )

    def matvec(self, v):
        # same operation order as rows(), so tiled products match bitwise
        out = broadcast_diag(self.diag, v) * v
        out[1:] += broadcast_diag(self.lower[1:], v) * v[:-1]
        out[0] += self.lower[0] * v[-1]
        out[:-1] += broadcast_diag(self.upper[:-1], v) * v[1:]
        out[-1] += self.upper[-1] * v[0]
        return out

    def matvec_partitioned(self, v, part: MeshPartition):
        """Tile-by-tile product; each tile reads its own nodes plus its halo."""
        p = v.shape[0]
        out = np.empty_like(v)
        for (a, b), halo in zip(part.ranges, part.halos):
            # halo exchange: a tile sees its own nodes and its halo, nothing else
            visible = np.zeros_like(v)
            visible[a:b] = v[a:b]
            visible[halo] = v[halo]
            idx = np.arange(a, b)
            left = visible[(idx - 1) % p]
            right = visible[(idx + 1) % p]
            sub = Tridiagonal(self.diag[a:b], self.lower[a:b], self.upper[a:b])
            out[a:b] = sub.rows(v[a:b], left, right)
        return out

    def to_dense(self):
        p = self.diag.size
        out = np.diag(self.diag.astype(float))
        for i in range(p):
            out[i, (i - 1) % p] += self.lower[i]
            out[i, (i + 1) % p] += self.upper[i]
        # an open track has zero end coefficients; a 2-node ring double counts
        return out


def _from_elements(mesh: TrackMesh, diag_block, off_block):
    """Accumulate 2x2 element blocks ``[[d, o], [o, d]]`` edge by edge."""
    p = mesh.size
    left, right = mesh.element_nodes()
    diag = np.zeros(p)
    lower = np.zeros(p)
    upper = np.zeros(p)
    np.add.at(diag, left, diag_block)
    np.add.at(diag, right, diag_block)
    np.add.at(upper, left, off_block)
    np.add.at(lower, right, off_block)
    return Tridiagonal(diag, lower, upper)


@dataclass(frozen=True)
class AssembledOperators:
    """Lumped mass, consistent mass and stiffness matrices of one track."""

    mesh: TrackMesh
    kappa: float
    lumped_mass: np.ndarray
    mass: Tridiagonal
    stiffness: Tridiagonal

    @property
    def p(self):
        return self.mesh.size

    def scaled_stiffness(self):
        """``Mb^-1/2 A Mb^-1/2`` as a :class:`Tridiagonal`."""
        s = 1.0 / np.sqrt(self.lumped_mass)
        a = self.stiffness
        return Tridiagonal(a.diag * s * s, a.lower * s * np.roll(s, 1), a.upper * s * np.roll(s, -1))


def assemble(mesh: TrackMesh, kappa) -> AssembledOperators:
    """Assemble P1 mass and stiffness matrices with constant diffusion coefficient ``kappa``.

    Each edge of length h contributes ``h/6 [[2, 1], [1, 2]]`` to the mass matrix
    and ``kappa/h [[1, -1], [-1, 1]]`` to the stiffness matrix. Natural
    boundary conditions apply at the ends of an open track.
    """
    if not kappa >= 0:
        raise ValueError("kappa must be >= 0")
    h = mesh.edges
    mass = _from_elements(mesh, h / 3.0, h / 6.0)
    stiffness = _from_elements(mesh, kappa / h, -kappa / h)
    lumped = mass.diag + mass.lower + mass.upper
    return AssembledOperators(mesh=mesh, kappa=float(kappa), lumped_mass=lumped, mass=mass, stiffness=stiffness)


@dataclass(frozen=True)
class ChebyshevCalibration:
    lambda_min: float
    lambda_max: float
    n_iter: int
    target_tol: float = 1e-2
    trial_residual: float = float("nan")

    def __post_init__(self):
        if not 1.0 <= self.lambda_min <= self.lambda_max:
            raise ValueError(f"invalid bounds [{self.lambda_min}, {self.lambda_max}]")
        if self.n_iter < 1:
            raise ValueError("n_iter must be >= 1")


def _system_matvec(scaled):
    def matvec(v):
        return v + scaled.matvec(v)

    return matvec


def estimate_extreme_eigenvalues(ops: AssembledOperators, max_steps=40, safety_factor=1.01, random_state=0):
    """Extreme eigenvalues of ``I + Mb^-1/2 A Mb^-1/2`` from the CG-Lanczos relation.

    CG is run on a random right-hand side and the Lanczos tridiagonal matrix is
    rebuilt from the CG step lengths. Returns ``(lambda_min, lambda_max)`` with
    ``lambda_min`` floored at 1 and ``lambda_max`` multiplied by
    ``safety_factor``. Falls back to Gershgorin bounds on breakdown.
    """
    scaled = ops.scaled_stiffness()
    matvec = _system_matvec(scaled)
    p = ops.p
    rng = check_random_state(random_state)
    b = rng.standard_normal(p)
    x = np.zeros(p)
    r = b.copy()
    d = r.copy()
    rr = r @ r
    alphas, betas = [], []
    breakdown = False
    for _ in range(min(max_steps, p)):
        q = matvec(d)
        dq = d @ q
        if dq <= 0:
            breakdown = True
            break
        alpha = rr / dq
        x += alpha * d
        r -= alpha * q
        rr_new = r @ r
        alphas.append(alpha)
        beta = rr_new / rr
        betas.append(beta)
        if rr_new <= (1e-28 * (b @ b)):
            breakdown = len(alphas) < p
            break
        d = r + beta * d
        rr = rr_new
    gersh = 1.0 + float(np.max(np.abs(scaled.diag) + np.abs(scaled.lower) + np.abs(scaled.upper)))
    if breakdown or not alphas:
        return 1.0, gersh
    alphas = np.array(alphas)
    betas = np.array(betas)
    k = alphas.size
    diag = 1.0 / alphas
    diag[1:] += betas[:-1] / alphas[:-1]
    off = np.sqrt(betas[: k - 1]) / alphas[: k - 1]
    ritz = eigh_tridiagonal(diag, off, eigvals_only=True)
    lmin = max(1.0, float(ritz[0]))
    lmax = max(lmin, float(ritz[-1]) * safety_factor)
    return lmin, min(lmax, gersh)


def chebyshev_coefficients(lambda_min, lambda_max, n_iter):
    """Step lengths ``alpha_k`` and direction weights ``beta_k`` of Chebyshev iteration."""
    d = 0.5 * (lambda_max + lambda_min)
    c = 0.5 * (lambda_max - lambda_min)
    alphas = np.empty(n_iter)
    betas = np.zeros(n_iter)
    alpha = 1.0 / d
    alphas[0] = alpha
    for k in range(1, n_iter):
        beta = 0.5 * (c * alpha) ** 2 if k == 1 else (0.5 * c * alpha) ** 2
        alpha = 1.0 / (d - beta / alpha)
        alphas[k] = alpha
        betas[k] = beta
    return alphas, betas


def chebyshev_solve(matvec, b, alphas, betas, counter=None):
    """Approximate ``T^-1 b`` with ``len(alphas)`` Chebyshev steps, starting from ``x = b``."""
    x = b.copy()
    r = b - matvec(b)
    p = None
    for k, (a, bt) in enumerate(zip(alphas, betas)):
        p = r.copy() if k == 0 else r + bt * p
        x += a * p
        r -= a * matvec(p)
    if counter is not None:
        counter["ci_iterations"] += len(alphas)
    return x


def chebyshev_solve_adjoint(matvec, y, alphas, betas, counter=None):
    """Transpose of the linear map implemented by :func:`chebyshev_solve`."""
    rbar = np.zeros_like(y)
    pbar = np.zeros_like(y)
    for k in range(len(alphas) - 1, -1, -1):
        a, bt = alphas[k], betas[k]
        dirbar = pbar + a * y - a * matvec(rbar)
        rbar = rbar + dirbar
        pbar = bt * dirbar if k > 0 else np.zeros_like(y)
    if counter is not None:
        counter["ci_iterations"] += len(alphas)
    return y + rbar - matvec(rbar)


def calibrate_chebyshev(ops: AssembledOperators, eigs, target_tol=1e-2, max_iter=500, random_state=0):
    """Fix the Chebyshev iteration count from one trial solve with a random right-hand side.

    ``n_iter`` is the first count at which ``||b - T x|| / ||b||`` drops below
    ``target_tol``.
    """
    lmin, lmax = eigs
    matvec = _system_matvec(ops.scaled_stiffness())
    rng = check_random_state(random_state)
    b = rng.standard_normal(ops.p)
    bnorm = np.linalg.norm(b)
    alphas, betas = chebyshev_coefficients(lmin, lmax, max_iter)
    x = b.copy()
    r = b - matvec(b)
    p = None
    for k in range(max_iter):
        p = r.copy() if k == 0 else r + betas[k] * p
        x += alphas[k] * p
        r -= alphas[k] * matvec(p)
        rel = np.linalg.norm(r) / bnorm
        if rel < target_tol:
            return ChebyshevCalibration(lmin, lmax, k + 1, target_tol, float(rel))
    raise RuntimeError(
        f"Chebyshev iteration did not reach {target_tol:g} in {max_iter} iterations "
        f"(bounds [{lmin:.6g}, {lmax:.6g}], residual {rel:.3g})"
    )


class DiffusionOperator:
    """Calibrated implicit diffusion operator ``D`` on one track, with normalization ``gamma``.

    ``counters`` records tridiagonal and diagonal products, Chebyshev
    iterations and applications of ``D``.
    """

    def __init__(self, ops: AssembledOperators, m, calibration: ChebyshevCalibration, gamma=None):
        if m < 2 or m % 2:
            raise ValueError(f"m must be a positive even integer, got {m}")
        self.ops = ops
        self.m = int(m)
        self.calibration = calibration
        self.gamma = None if gamma is None else np.asarray(gamma, dtype=float)
        self.counters = Counter()
        self._inv_sqrt_mass = 1.0 / np.sqrt(ops.lumped_mass)
        self._system = _system_matvec(ops.scaled_stiffness())
        self._coefs = chebyshev_coefficients(calibration.lambda_min, calibration.lambda_max, calibration.n_iter)
        self._mass_plus_stiffness = Tridiagonal(
            ops.lumped_mass + ops.stiffness.diag, ops.stiffness.lower, ops.stiffness.upper
        )

    @property
    def p(self):
        return self.ops.p

    def with_n_iter(self, n_iter):
        """Copy of this operator using a different fixed Chebyshev iteration count."""
        cal = self.calibration
        new = ChebyshevCalibration(cal.lambda_min, cal.lambda_max, int(n_iter), cal.target_tol)
        return DiffusionOperator(self.ops, self.m, new, self.gamma)

    def _solve(self, v):
        return chebyshev_solve(self._system, v, *self._coefs, counter=self.counters)

    def _solve_adjoint(self, v):
        return chebyshev_solve_adjoint(self._system, v, *self._coefs, counter=self.counters)

    def _scale(self, d, v):
        return broadcast_diag(d, v) * v


def apply_inverse_diffusion(op: DiffusionOperator, v, partition: MeshPartition | None = None):
    """``Mb [Mb^-1 (Mb + A)]^m v``: m tridiagonal and m + 1 diagonal products, no solves."""
    v = as_vector(v, op.p)
    mass = op.ops.lumped_mass
    tri = op._mass_plus_stiffness
    u = v
    for _ in range(op.m):
        u = tri.matvec(u) if partition is None else tri.matvec_partitioned(u, partition)
        u = op._scale(1.0 / mass, u)
    u = op._scale(mass, u)
    op.counters["tridiagonal"] += op.m
    op.counters["diagonal"] += op.m + 1
    return u


def apply_diffusion(op: DiffusionOperator, v):
    """``D v`` with m/2 forward and m/2 adjoint fixed-iteration Chebyshev solves."""
    v = as_vector(v, op.p)
    u = op._scale(op._inv_sqrt_mass, v)
    for _ in range(op.m // 2):
        u = op._solve(u)
    for _ in range(op.m // 2):
        u = op._solve_adjoint(u)
    op.counters["diffusion_applications"] += 1 if v.ndim == 1 else int(np.prod(v.shape[1:]))
    return op._scale(op._inv_sqrt_mass, u)


def apply_diffusion_sqrt(op: DiffusionOperator, eta):
    """``L eta`` where ``D = L L^T`` and ``L = Mb^-1/2 [adjoint solves]^(m/2)``."""
    u = as_vector(eta, op.p)
    for _ in range(op.m // 2):
        u = op._solve_adjoint(u)
    return op._scale(op._inv_sqrt_mass, u)


def apply_diffusion_sqrt_transpose(op: DiffusionOperator, v):
    u = op._scale(op._inv_sqrt_mass, as_vector(v, op.p))
    for _ in range(op.m // 2):
        u = op._solve(u)
    return u


def impulse_combs(mesh: TrackMesh, stride):
    """Group node indices into combs whose members are at least ``stride`` nodes apart.

    On an open track this gives exactly ``stride`` combs (node ``i`` goes to
    comb ``i % stride``). On a periodic track, members that would sit too close
    across the wrap are moved to extra combs.
    """
    p = mesh.size
    stride = int(min(max(stride, 1), p))
    combs = [list(range(j, p, stride)) for j in range(stride)]
    if mesh.periodic:
        overflow = []
        for comb in combs:
            while len(comb) > 1 and p - comb[-1] + comb[0] < stride:
                overflow.append(comb.pop())
        extra = []
        for i in sorted(overflow):
            for comb in extra:
                gaps = [min(abs(i - j), p - abs(i - j)) for j in comb]
                if min(gaps) >= stride:
                    comb.append(i)
                    break
            else:
                extra.append([i])
        combs += extra
    return [np.array(c, dtype=int) for c in combs if c]


def _diffusion_diagonal(op, combs, chunk=512):
    p = op.p
    diag = np.empty(p)
    for start in range(0, len(combs), chunk):
        block = combs[start : start + chunk]
        vecs = np.zeros((p, len(block)))
        for col, comb in enumerate(block):
            vecs[comb, col] = 1.0
        out = apply_diffusion(op, vecs)
        for col, comb in enumerate(block):
            diag[comb] = out[comb, col]
    return diag


def _exact_diagonal(op, chunk=256):
    # brute force through the square-root factor: D_ii = ||L^T e_i||^2
    p = op.p
    diag = np.empty(p)
    for start in range(0, p, chunk):
        stop = min(start + chunk, p)
        block = np.zeros((p, stop - start))
        block[np.arange(start, stop), np.arange(stop - start)] = 1.0
        diag[start:stop] = np.sum(apply_diffusion_sqrt_transpose(op, block) ** 2, axis=0)
    op.counters["diffusion_applications"] += p
    return diag


def compute_normalization(op: DiffusionOperator, spacing_factor=5.0, rho=None, exact=False):
    """Normalization factors ``1 / sqrt(diag(D))`` and the number of ``D`` applications used.

    Diagonal entries are read off ``D`` applied to combs of unit impulses spaced
    at least ``spacing_factor * rho`` apart, which takes
    ``ceil(spacing_factor * rho / mean spacing)`` applications on an open track.
    ``exact=True`` applies ``D`` to every canonical vector instead.
    """
    mesh = op.ops.mesh
    if exact:
        diag, n_app = _exact_diagonal(op), mesh.size
    else:
        if rho is None:
            raise ValueError("rho is required for the spaced-impulse method")
        stride = math.ceil(spacing_factor * rho / mesh.mean_spacing)
        combs = impulse_combs(mesh, stride)
        diag, n_app = _diffusion_diagonal(op, combs), len(combs)
    if np.any(diag <= 0):
        raise ArithmeticError("nonpositive diagonal of D: the Chebyshev calibration is unreliable")
    return 1.0 / np.sqrt(diag), n_app


class DiffusionCorrelation(BaseEstimator):
    """Normalized diffusion correlation operator ``C = Gamma D Gamma`` fitted to a track.

    Parameters
    ----------
    m : int
        Number of implicit diffusion iterations (even).
    rho : float
        Length-scale parameter in km; ``kappa = rho**2 / (2m - 1)``.
    target_tol : float
        Relative residual used to fix the Chebyshev iteration count.
    spacing_factor : float
        Impulse spacing, in units of ``rho``, for the normalization factors.
    normalization : {"spaced", "exact"}
    lanczos_steps : int
    safety_factor : float
        Inflation of the largest eigenvalue estimate.
    random_state : int, RandomState instance or None
        Seeds the Lanczos start vector and the calibration right-hand side.
    """

    def __init__(
        self,
        m=2,
        rho=125.0,
        target_tol=1e-2,
        spacing_factor=5.0,
        normalization="spaced",
        lanczos_steps=40,
        safety_factor=1.01,
        max_ci_iter=500,
        random_state=0,
    ):
        self.m = m
        self.rho = rho
        self.target_tol = target_tol
        self.spacing_factor = spacing_factor
        self.normalization = normalization
        self.lanczos_steps = lanczos_steps
        self.safety_factor = safety_factor
        self.max_ci_iter = max_ci_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        """Assemble, calibrate and normalize on ``X``: a TrackMesh or 1D arc positions in km."""
        if self.m < 2 or self.m % 2:
            raise ValueError(f"m must be a positive even integer, got {self.m}")
        if self.normalization not in ("spaced", "exact"):
            raise ValueError(f"normalization must be 'spaced' or 'exact', got {self.normalization!r}")
        mesh = X if isinstance(X, TrackMesh) else TrackMesh(column_or_1d(X))
        model = CorrelationModel(self.m, self.rho)
        rng = check_random_state(self.random_state)
        ops = assemble(mesh, model.kappa)
        eigs = estimate_extreme_eigenvalues(ops, self.lanczos_steps, self.safety_factor, rng)
        cal = calibrate_chebyshev(ops, eigs, self.target_tol, self.max_ci_iter, rng)
        op = DiffusionOperator(ops, self.m, cal)
        gamma, n_app = compute_normalization(
            op, self.spacing_factor, rho=self.rho, exact=self.normalization == "exact"
        )
        op.gamma = gamma
        self.model_ = model
        self.mesh_ = mesh
        self.operator_ = op
        self.gamma_ = gamma
        self.n_iter_ = cal.n_iter
        self.normalization_applications_ = n_app
        return self

    def _op(self):
        check_is_fitted(self, "operator_")
        return self.operator_

    def apply(self, v):
        """``C v``."""
        op = self._op()
        g = self.gamma_
        return op._scale(g, apply_diffusion(op, op._scale(g, as_vector(v, op.p))))

    def apply_inverse(self, v):
        """``C^-1 v`` (exact, no iterative solve)."""
        op = self._op()
        ginv = 1.0 / self.gamma_
        return op._scale(ginv, apply_inverse_diffusion(op, op._scale(ginv, as_vector(v, op.p))))

    def apply_sqrt(self, eta):
        """``Gamma L eta`` so that the result has covariance ``C``."""
        op = self._op()
        return op._scale(self.gamma_, apply_diffusion_sqrt(op, eta))

    def to_dense(self):
        op = self._op()
        return self.apply(np.eye(op.p))


def operator_rows_csv(op: DiffusionOperator):
    """Per-node operator data as CSV text (node, arc_km, lumped_mass, a_lower, a_diag, a_upper, gamma)."""
    mesh = op.ops.mesh
    a = op.ops.stiffness
    gamma = op.gamma if op.gamma is not None else np.full(op.p, np.nan)
    lines = ["node,arc_km,lumped_mass,a_lower,a_diag,a_upper,gamma"]
    for i in range(op.p):
        lines.append(
            f"{i},{mesh.positions[i]!r},{op.ops.lumped_mass[i]!r},{a.lower[i]!r},{a.diag[i]!r},{a.upper[i]!r},{gamma[i]!r}"
        )
    return "\n".join(lines) + "\n"
