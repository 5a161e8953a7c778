"""Block-diagonal observation-error covariance ``R = Sigma Gamma D Gamma Sigma``, one block per instrument."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import as_vector, broadcast_diag
from .diffusion import DiffusionCorrelation
from .kernels import CorrelationModel
from .mesh import TrackMesh

__all__ = ["ObsBlock", "ObsErrorCov", "build_R", "apply_R", "apply_R_inverse", "apply_R_sqrt"]


@dataclass(frozen=True)
class ObsBlock:
    """One instrument (or track): mesh, standard deviations, and a fitted correlation or ``None`` for diagonal."""

    mesh: TrackMesh
    sigma: np.ndarray
    correlation: DiffusionCorrelation | None = None

    @property
    def size(self):
        return self.mesh.size


class ObsErrorCov:
    """Matrix-free ``R``; cross-block entries are zero and never formed."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        sizes = [b.size for b in self.blocks]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def size(self):
        return int(self.offsets[-1])

    @property
    def sigma(self):
        return np.concatenate([b.sigma for b in self.blocks])

    @property
    def diagonal(self):
        return all(b.correlation is None for b in self.blocks)

    def _blockwise(self, v, fn):
        v = as_vector(v, self.size)
        out = np.empty_like(v)
        for blk, a, b in zip(self.blocks, self.offsets[:-1], self.offsets[1:]):
            out[a:b] = fn(blk, v[a:b])
        return out

    def apply(self, v):
        def fn(blk, x):
            s = broadcast_diag(blk.sigma, x)
            if blk.correlation is None:
                return s * s * x
            return s * blk.correlation.apply(s * x)

        return self._blockwise(v, fn)

    def apply_inverse(self, v):
        def fn(blk, x):
            s = broadcast_diag(blk.sigma, x)
            if blk.correlation is None:
                return x / (s * s)
            return blk.correlation.apply_inverse(x / s) / s

        return self._blockwise(v, fn)

    def apply_sqrt(self, eta):
        def fn(blk, x):
            s = broadcast_diag(blk.sigma, x)
            if blk.correlation is None:
                return s * x
            return s * blk.correlation.apply_sqrt(x)

        return self._blockwise(eta, fn)

    def to_dense(self):
        return self.apply(np.eye(self.size))


def _as_meshes(mesh):
    return [mesh] if isinstance(mesh, TrackMesh) else list(mesh)


def build_R(
    mesh,
    sigma,
    model: CorrelationModel | None = None,
    diagonal=False,
    normalization="spaced",
    spacing_factor=5.0,
    target_tol=1e-2,
    random_state=0,
):
    """Build ``R`` on one mesh or a sequence of meshes (one block each).

    ``sigma`` is a scalar or an array over all nodes. ``model=None`` or
    ``diagonal=True`` gives ``R = Sigma^2``.
    """
    meshes = _as_meshes(mesh)
    total = sum(m.size for m in meshes)
    sig = np.broadcast_to(np.asarray(sigma, dtype=float), (total,)).copy()
    if np.any(sig <= 0):
        raise ValueError("sigma must be > 0")
    if model is not None and not diagonal and model.m % 2:
        raise ValueError(f"m must be even for a diffusion-based R, got {model.m}")
    blocks = []
    start = 0
    for k, msh in enumerate(meshes):
        s = sig[start : start + msh.size]
        start += msh.size
        corr = None
        if model is not None and not diagonal:
            corr = DiffusionCorrelation(
                m=model.m,
                rho=model.rho,
                target_tol=target_tol,
                spacing_factor=spacing_factor,
                normalization=normalization,
                random_state=None if random_state is None else random_state + k,
            ).fit(msh)
        blocks.append(ObsBlock(msh, s, corr))
    return ObsErrorCov(blocks)


def apply_R(R: ObsErrorCov, v):
    return R.apply(v)


def apply_R_inverse(R: ObsErrorCov, v):
    return R.apply_inverse(v)


def apply_R_sqrt(R: ObsErrorCov, eta):
    return R.apply_sqrt(eta)
