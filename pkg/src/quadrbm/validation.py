"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_float_vector(x, n: int, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ValueError(f"{name} must be a length-{n} vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_float_matrix(x, shape: tuple[int, int], name: str) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def as_binary_vector(x, n: int, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(x)
    if arr.ndim != 1 or arr.shape[0] != n:
        raise ValueError(f"{name} must be a length-{n} vector, got shape {arr.shape}")
    out = arr.astype(np.uint8, copy=True)
    if not np.array_equal(out, arr) or not np.all((out == 0) | (out == 1)):
        raise ValueError(f"{name} must contain only 0/1 entries")
    return out


def as_binary_matrix(x, n_cols: int, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(x)
    if arr.ndim != 2 or arr.shape[1] != n_cols:
        raise ValueError(f"{name} must be a 2-D array with {n_cols} columns, got shape {arr.shape}")
    out = arr.astype(np.uint8, copy=True)
    if not np.array_equal(out, arr) or not np.all((out == 0) | (out == 1)):
        raise ValueError(f"{name} must contain only 0/1 entries")
    return out


def as_spin_matrix(x, n_cols: int, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(x)
    if arr.ndim != 2 or arr.shape[1] != n_cols:
        raise ValueError(f"{name} must be a 2-D array with {n_cols} columns, got shape {arr.shape}")
    out = arr.astype(np.int8, copy=True)
    if not np.array_equal(out, arr) or not np.all((out == 1) | (out == -1)):
        raise ValueError(f"{name} must contain only -1/+1 entries")
    return out


def readonly(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr
