"""Input checks shared by the estimators."""
import numpy as np
from sklearn.utils.validation import check_array

from .exceptions import ProtocolError


def check_volume(X, name="X", min_depth=2):
    """Return ``X`` as a finite float64 array of shape (depth, H, W)."""
    X = getattr(X, "voxels", X)
    X = check_array(X, dtype=np.float64, ensure_2d=False, allow_nd=True,
                    input_name=name, ensure_min_samples=min_depth)
    if X.ndim != 3:
        raise ValueError(f"{name} must be a 3-D volume (depth, height, width), got ndim={X.ndim}")
    return X


def check_volumes(X, name="X"):
    """Accept one volume or a sequence of them; returns a list of arrays."""
    if isinstance(X, (list, tuple)):
        if not X:
            raise ValueError(f"{name} is empty")
        return [check_volume(v, name) for v in X]
    X = getattr(X, "voxels", X)
    if np.ndim(X) == 4:
        return [check_volume(v, name) for v in X]
    return [check_volume(X, name)]


def check_dense_depth(depth, r):
    if (depth - 1) % r:
        raise ProtocolError(f"depth {depth} is not r*(d-1)+1 for r={r}")
