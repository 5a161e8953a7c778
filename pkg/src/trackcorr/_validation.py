"""Small input checks shared across modules."""
import numpy as np


def as_vector(v, size, name="v"):
    """Return ``v`` as a float array whose first axis has length ``size``.

    Trailing axes are allowed so that operators can be applied to a batch of
    column vectors at once.
    """
    v = np.asarray(v, dtype=float)
    if v.ndim == 0 or v.shape[0] != size:
        raise ValueError(f"{name} has leading dimension {v.shape[:1]}, expected {size}")
    return v


def broadcast_diag(d, v):
    """Reshape diagonal ``d`` so it multiplies ``v`` along axis 0."""
    return d.reshape((-1,) + (1,) * (v.ndim - 1))


def check_positive(value, name):
    if not np.all(np.asarray(value) > 0):
        raise ValueError(f"{name} must be > 0")
    return value
