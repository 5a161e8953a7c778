"""Twin experiments: simulated innovations, a B-preconditioned CG minimizer and analysis-error tracking."""
from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .background import BackgroundCov, build_B
from .config import ConfigError, ExperimentConfig
from .mesh import TrackMesh
from .obs_cov import ObsErrorCov, build_R

__all__ = [
    "SelectionOperator",
    "ExperimentState",
    "MinimizeResult",
    "ExperimentReport",
    "select_every",
    "select_stride",
    "select_indices",
    "read_layout",
    "observation_mesh",
    "simulate_innovation",
    "simulate_batch",
    "minimize",
    "analysis_error_series",
    "analysis_error_spectrum",
    "build_operators",
    "run_experiment",
]


@dataclass(frozen=True)
class SelectionOperator:
    """``G`` picking grid values at ``indices`` on a periodic grid of ``n`` points."""

    indices: np.ndarray
    n: int

    def __post_init__(self):
        idx = np.asarray(self.indices)
        if idx.ndim != 1 or idx.size == 0:
            raise ValueError("indices must be a nonempty 1D array")
        if not np.issubdtype(idx.dtype, np.integer):
            raise ValueError("indices must be integers")
        if idx.min() < 0 or idx.max() >= self.n:
            raise ValueError(f"indices must lie in [0, {self.n})")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("indices must be strictly increasing (one observation per grid point)")
        idx = idx.astype(np.intp)
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def p(self):
        return self.indices.size

    def apply(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise ValueError(f"state has length {x.shape[0]}, expected {self.n}")
        return x[self.indices]

    def adjoint(self, y):
        y = np.asarray(y, dtype=float)
        if y.shape[0] != self.p:
            raise ValueError(f"observation vector has length {y.shape[0]}, expected {self.p}")
        out = np.zeros((self.n,) + y.shape[1:])
        out[self.indices] = y
        return out

    def to_dense(self):
        g = np.zeros((self.p, self.n))
        g[np.arange(self.p), self.indices] = 1.0
        return g


def select_every(n):
    return SelectionOperator(np.arange(n), n)


def select_stride(n, stride, offset=0):
    if stride < 1 or not 0 <= offset < n:
        raise ValueError("need stride >= 1 and 0 <= offset < n")
    return SelectionOperator(np.arange(offset, n, stride), n)


def select_indices(indices, n):
    return SelectionOperator(np.asarray(indices), n)


def read_layout(path, n, h):
    """Grid indices from a CSV with a ``state_index`` or an ``arc_km`` column.

    ``arc_km`` values are mapped to the nearest grid point (periodically).
    """
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            cols = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise ConfigError("obs.file", f"cannot read {path}: {exc.strerror}") from None
    try:
        if "state_index" in cols:
            idx = np.array([int(r["state_index"]) for r in rows], dtype=int)
        elif "arc_km" in cols:
            arc = np.array([float(r["arc_km"]) for r in rows])
            idx = np.mod(np.rint(arc / h).astype(int), n)
        else:
            raise ConfigError("obs.file", "needs a state_index or arc_km column")
    except (TypeError, ValueError) as exc:
        raise ConfigError("obs.file", f"bad value ({exc})") from None
    if idx.size == 0:
        raise ConfigError("obs.file", "no observations")
    if np.any((idx < 0) | (idx >= n)):
        raise ConfigError("obs.file", f"state_index outside [0, {n})")
    uniq = np.unique(idx)
    if uniq.size != idx.size:
        raise ConfigError("obs.file", "more than one observation maps to the same grid point")
    return SelectionOperator(uniq, n)


def observation_mesh(G: SelectionOperator, h):
    """Periodic mesh through the observed grid points; the state domain closes the loop."""
    return TrackMesh(G.indices * float(h), track_id=0, period=G.n * float(h))


@dataclass
class ExperimentState:
    eps_b: np.ndarray
    eps_o: np.ndarray
    d: np.ndarray
    seed: object = None
    iterates: list = field(default_factory=list)
    rms_series: np.ndarray | None = None
    grad_norm_series: np.ndarray | None = None


def _check_dims(B, R, G):
    if B.n != G.n:
        raise ValueError(f"B has size {B.n} but G expects a state of length {G.n}")
    if R.size != G.p:
        raise ValueError(f"R has size {R.size} but G yields {G.p} observations")


def simulate_innovation(B: BackgroundCov, R_true: ObsErrorCov, G: SelectionOperator, seed, zero_noise=False):
    """Draw ``eps_b = U eta_b``, ``eps_o = V eta_o`` and form ``d = eps_o - G eps_b``."""
    _check_dims(B, R_true, G)
    rng = np.random.default_rng(seed)
    eta_b = rng.standard_normal(G.n)
    eta_o = rng.standard_normal(G.p)
    if zero_noise:
        eta_b[:] = 0.0
        eta_o[:] = 0.0
    eps_b = B.apply_sqrt(eta_b)
    eps_o = R_true.apply_sqrt(eta_o)
    return ExperimentState(eps_b=eps_b, eps_o=eps_o, d=eps_o - G.apply(eps_b), seed=seed)


def simulate_batch(B, R_true, G, seeds):
    """Columns of ``eps_b``, ``eps_o`` and ``d``, one per seed (each its own generator)."""
    _check_dims(B, R_true, G)
    eta_b = np.empty((G.n, len(seeds)))
    eta_o = np.empty((G.p, len(seeds)))
    for j, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        eta_b[:, j] = rng.standard_normal(G.n)
        eta_o[:, j] = rng.standard_normal(G.p)
    eps_b = B.apply_sqrt(eta_b)
    eps_o = R_true.apply_sqrt(eta_o)
    return eps_b, eps_o, eps_o - G.apply(eps_b)


@dataclass
class MinimizeResult:
    """Minimizer output; series have one row per iteration (row 0 is the zero increment).

    For a batch, a column stops changing once it has converged, so its series
    are padded with the final value.
    """

    increment: np.ndarray
    n_iter: np.ndarray
    converged: np.ndarray
    grad_bnorm: np.ndarray
    cost: np.ndarray
    rms: np.ndarray | None = None
    iterates: list | None = None

    @property
    def grad_bnorm_rel(self):
        g0 = self.grad_bnorm[0]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(g0 > 0, self.grad_bnorm / np.where(g0 > 0, g0, 1.0), 0.0)


def _colsum(a):
    return np.sum(a, axis=0)


def _rms(a):
    return np.sqrt(np.mean(a * a, axis=0))


def minimize(B, R_spec, G: SelectionOperator, d, tol_orders=10.0, max_iter=500, eps_b=None, record_iterates=False):
    """Minimize ``1/2 x^T B^-1 x + 1/2 (G x - d)^T R~^-1 (G x - d)`` by B-preconditioned CG.

    Only ``B.apply`` and ``R_spec.apply_inverse`` are used: the recurrence
    carries ``B^-1 x`` and ``B^-1 p`` alongside ``x`` and ``p``. ``d`` may hold
    several innovations as columns; each stops once the B-norm of its gradient
    has fallen by ``tol_orders`` orders of magnitude. When ``eps_b`` is given,
    the RMS of ``x + eps_b`` is tracked every iteration.
    """
    d = np.asarray(d, dtype=float)
    single = d.ndim == 1
    d2 = d.reshape(G.p, -1)
    n, N = G.n, d2.shape[1]
    eb = None if eps_b is None else np.asarray(eps_b, dtype=float).reshape(n, N)

    w = -R_spec.apply_inverse(d2)  # R~^-1 (G x - d)
    e = -d2.copy()  # G x - d
    r = -G.adjoint(w)  # minus the gradient
    z = B.apply(r)
    p, ph = z.copy(), r.copy()
    x, xh = np.zeros((n, N)), np.zeros((n, N))
    rz = _colsum(r * z)

    grad = [np.sqrt(np.maximum(rz, 0.0))]
    cost = [0.5 * _colsum(e * w)]
    rms = None if eb is None else [_rms(eb)]
    iterates = [x.copy()] if record_iterates else None
    threshold = grad[0] * 10.0 ** (-tol_orders)
    active = grad[0] > threshold
    n_iter = np.zeros(N, dtype=int)

    k = 0
    while active.any() and k < max_iter:
        # plain slices while every column is active avoid fancy-index copies
        a = slice(None) if active.all() else np.flatnonzero(active)
        pa, pha = p[:, a], ph[:, a]
        gp = G.apply(pa)
        t = R_spec.apply_inverse(gp)
        q = pha + G.adjoint(t)
        pq = _colsum(pa * q)
        if np.any(pq <= 0):
            raise ArithmeticError("nonpositive curvature: B or R~^-1 is not positive definite")
        alpha = rz[a] / pq
        x[:, a] += alpha * pa
        xh[:, a] += alpha * pha
        e[:, a] += alpha * gp
        w[:, a] += alpha * t
        ra = r[:, a] - alpha * q
        za = B.apply(ra)
        rz_new = _colsum(ra * za)
        beta = rz_new / rz[a]
        p[:, a] = za + beta * pa
        ph[:, a] = ra + beta * pha
        r[:, a] = ra
        rz[a] = rz_new
        k += 1
        n_iter[a] = k

        g = grad[-1].copy()
        g[a] = np.sqrt(np.maximum(rz_new, 0.0))
        grad.append(g)
        c = cost[-1].copy()
        c[a] = 0.5 * _colsum(x[:, a] * xh[:, a]) + 0.5 * _colsum(e[:, a] * w[:, a])
        cost.append(c)
        if rms is not None:
            s = rms[-1].copy()
            s[a] = _rms(x[:, a] + eb[:, a])
            rms.append(s)
        if record_iterates:
            iterates.append(x.copy())
        active[a] = g[a] > threshold[a]

    converged = ~active
    out = MinimizeResult(
        increment=x,
        n_iter=n_iter,
        converged=converged,
        grad_bnorm=np.array(grad),
        cost=np.array(cost),
        rms=None if rms is None else np.array(rms),
        iterates=iterates,
    )
    if single:
        out.increment = x[:, 0]
        out.n_iter = n_iter[0]
        out.converged = bool(converged[0])
        out.grad_bnorm = out.grad_bnorm[:, 0]
        out.cost = out.cost[:, 0]
        out.rms = None if out.rms is None else out.rms[:, 0]
        out.iterates = None if iterates is None else [it[:, 0] for it in iterates]
    return out


def analysis_error_series(iterates, eps_b, per_variable=False):
    """RMS over the grid of ``iterate + eps_b`` for each iterate.

    With ``per_variable=True`` the raw analysis errors are returned instead,
    one row per iterate.
    """
    eps_b = np.asarray(eps_b, dtype=float)
    errs = np.array([np.asarray(it, dtype=float) + eps_b for it in iterates])
    if per_variable:
        return errs
    return np.sqrt(np.mean(errs * errs, axis=1))


def analysis_error_spectrum(errors):
    """Mean over columns of ``|FFT(error)|^2 / n``, in DFT order.

    For circulant statistics this estimates the analysis-error variance of
    each Fourier mode.
    """
    errors = np.asarray(errors, dtype=float)
    n = errors.shape[0]
    power = np.abs(np.fft.fft(errors, axis=0)) ** 2 / n
    return power.reshape(n, -1).mean(axis=1)


def _cov_R(cov_cfg, mesh, norm_cfg, exact=False):
    method = "exact" if exact else norm_cfg.method
    return build_R(
        mesh,
        cov_cfg.sigma,
        cov_cfg.model,
        diagonal=cov_cfg.diagonal,
        normalization=method,
        spacing_factor=norm_cfg.spacing_factor,
        target_tol=norm_cfg.target_tol,
    )


def _selection(cfg: ExperimentConfig):
    n, lay = cfg.grid.n, cfg.obs
    if lay.mode == "every":
        return select_every(n)
    if lay.mode == "stride":
        if lay.offset >= n:
            raise ConfigError("obs.offset", f"must be < grid.n = {n}")
        return select_stride(n, lay.stride, lay.offset)
    return read_layout(lay.file, n, cfg.grid.h_km)


def build_operators(cfg: ExperimentConfig, exact_normalization=False):
    """(B, R_true, R_spec, G) for a validated configuration.

    ``R_spec`` is the same object as ``R_true`` when their parameters agree.
    """
    G = _selection(cfg)
    bg = cfg.background
    try:
        B = build_B(cfg.grid.n, cfg.grid.h_km, bg.sigma, bg.model)
    except ValueError as exc:
        raise ConfigError("background.rho_km", str(exc)) from None
    mesh = observation_mesh(G, cfg.grid.h_km)
    R_true = _cov_R(cfg.truth, mesh, cfg.normalize, exact_normalization)
    if cfg.specified == cfg.truth:
        R_spec = R_true
    else:
        R_spec = _cov_R(cfg.specified, mesh, cfg.normalize, exact_normalization)
    return B, R_true, R_spec, G


REPORT_COLUMNS = ("replicate", "iteration", "rms_analysis_error", "grad_bnorm_rel", "cost")

_OPERATOR_CACHE = {}


def _chunk_worker(args):
    cfg, exact, start, seeds = args
    key = (cfg, exact)
    if key not in _OPERATOR_CACHE:
        _OPERATOR_CACHE.clear()
        _OPERATOR_CACHE[key] = build_operators(cfg, exact)
    B, R_true, R_spec, G = _OPERATOR_CACHE[key]
    eps_b, _, d = simulate_batch(B, R_true, G, seeds)
    res = minimize(B, R_spec, G, d, cfg.solver.tol_orders, cfg.solver.max_iter, eps_b=eps_b)
    return start, res.n_iter, res.converged, res.rms, res.grad_bnorm_rel, res.cost


@dataclass
class ExperimentReport:
    n_iter: np.ndarray
    converged: np.ndarray
    rms: list
    grad_bnorm_rel: list
    cost: list
    seed: int = 0

    @property
    def replicates(self):
        return len(self.rms)

    @property
    def final_rms(self):
        return np.array([s[-1] for s in self.rms])

    def csv_text(self):
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(REPORT_COLUMNS)
        for j in range(self.replicates):
            for i in range(len(self.rms[j])):
                wr.writerow(
                    [j, i, repr(float(self.rms[j][i])), repr(float(self.grad_bnorm_rel[j][i])), repr(float(self.cost[j][i]))]
                )
        return buf.getvalue()

    def summary(self, confidence=0.95):
        """Means, standard deviations and t-based confidence intervals."""
        n = self.replicates
        out = {"replicates": n, "seed": self.seed, "confidence": confidence}
        if n == 0:
            out.update(final_rms=None, initial_rms=None, iterations=None, converged=0, mean_rms_by_iteration=[])
            return out

        def describe(x):
            x = np.asarray(x, dtype=float)
            mean = float(x.mean())
            std = float(x.std(ddof=1)) if n > 1 else 0.0
            half = float(stats.t.ppf(0.5 + confidence / 2, n - 1) * std / np.sqrt(n)) if n > 1 else 0.0
            return {"mean": mean, "std": std, "ci_low": mean - half, "ci_high": mean + half}

        longest = max(len(s) for s in self.rms)
        padded = np.array([np.pad(s, (0, longest - len(s)), mode="edge") for s in self.rms])
        out.update(
            final_rms=describe(self.final_rms),
            initial_rms=describe([s[0] for s in self.rms]),
            iterations=describe(self.n_iter),
            converged=int(np.sum(self.converged)),
            mean_rms_by_iteration=[float(v) for v in padded.mean(axis=0)],
        )
        return out

    def summary_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def replicate_seeds(seed, count):
    return np.random.SeedSequence(seed).spawn(count)


def run_experiment(cfg: ExperimentConfig, workers=1, exact_normalization=False):
    """Simulate, minimize and track every replicate of ``cfg``.

    Replicates are processed in batches of ``cfg.batch_size``; results do not
    depend on ``workers``.
    """
    cfg.validate()
    count = cfg.replicates
    seeds = replicate_seeds(cfg.seed, count)
    if count == 0:
        build_operators(cfg, exact_normalization)  # still surfaces config errors
        empty = np.zeros(0, dtype=int)
        return ExperimentReport(empty, empty.astype(bool), [], [], [], seed=cfg.seed)
    jobs = [
        (cfg, exact_normalization, s, seeds[s : s + cfg.batch_size])
        for s in range(0, count, cfg.batch_size)
    ]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_chunk_worker, jobs))
    else:
        results = [_chunk_worker(job) for job in jobs]
    n_iter, converged, rms, grad, cost = [], [], [], [], []
    for start, it, conv, r, g, c in sorted(results, key=lambda t: t[0]):
        for j in range(it.size):
            k = int(it[j]) + 1
            n_iter.append(int(it[j]))
            converged.append(bool(conv[j]))
            rms.append(r[:k, j])
            grad.append(g[:k, j])
            cost.append(c[:k, j])
    return ExperimentReport(np.array(n_iter), np.array(converged), rms, grad, cost, seed=cfg.seed)
