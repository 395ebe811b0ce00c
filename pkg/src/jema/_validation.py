"""Small input-validation helpers shared by the losses, model and estimators."""
import numbers

import numpy as np
import torch


def as_float_tensor(x, name="input", dtype=None):
    """Convert array-likes to a floating torch tensor, keeping autograd history."""
    if isinstance(x, torch.Tensor):
        t = x
        if not t.is_floating_point():
            t = t.to(dtype or torch.get_default_dtype())
        elif dtype is not None:
            t = t.to(dtype)
    else:
        arr = np.asarray(x)
        if arr.dtype.kind not in "fiub":
            raise TypeError(f"{name} must be numeric, got dtype {arr.dtype}")
        t = torch.as_tensor(arr, dtype=dtype or (torch.float64 if arr.dtype == np.float64 else None))
        if not t.is_floating_point():
            t = t.to(torch.get_default_dtype())
    return t


def check_finite(t, name="input"):
    if not torch.isfinite(t).all():
        raise ValueError(f"{name} contains non-finite values")
    return t


def check_embeddings(X, name="X", min_rows=2):
    X = as_float_tensor(X, name)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D (N, d), got shape {tuple(X.shape)}")
    if X.shape[0] < min_rows:
        raise ValueError(f"{name} needs at least {min_rows} rows, got {X.shape[0]}")
    if X.shape[1] < 1:
        raise ValueError(f"{name} needs at least one column")
    return check_finite(X, name)


def check_vector(u, n=None, name="u", dtype=None):
    u = as_float_tensor(u, name, dtype=dtype)
    if u.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {tuple(u.shape)}")
    if n is not None and u.shape[0] != n:
        raise ValueError(f"{name} has length {u.shape[0]}, expected {n}")
    return check_finite(u, name)


def check_positive(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value <= 0:
        raise ValueError(f"{name} must be a positive finite number, got {value!r}")
    return float(value)


def check_nonnegative(value, name):
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a nonnegative finite number, got {value!r}")
    return float(value)
