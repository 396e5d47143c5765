"""Small helpers for 3x4 affine transforms (row-major [R | t])."""

from __future__ import annotations

import numpy as np


def identity() -> np.ndarray:
    return np.hstack([np.eye(3), np.zeros((3, 1))])


def from_rt(rotation, translation) -> np.ndarray:
    return np.hstack([np.asarray(rotation, dtype=np.float64),
                      np.asarray(translation, dtype=np.float64).reshape(3, 1)])


def apply(transform: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 3x4 affine to points of shape (..., 3)."""
    t = np.asarray(transform, dtype=np.float64)
    return points @ t[:, :3].T + t[:, 3]


def compose(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transform equal to applying b first, then a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.hstack([a[:, :3] @ b[:, :3], (a[:, :3] @ b[:, 3] + a[:, 3]).reshape(3, 1)])


def invert(transform: np.ndarray) -> np.ndarray:
    t = np.asarray(transform, dtype=np.float64)
    inv_lin = np.linalg.inv(t[:, :3])
    return np.hstack([inv_lin, (-inv_lin @ t[:, 3]).reshape(3, 1)])


def polar_rotation(linear: np.ndarray) -> np.ndarray:
    """Closest proper rotation to a 3x3 linear map (polar decomposition)."""
    u, _, vh = np.linalg.svd(np.asarray(linear, dtype=np.float64))
    r = u @ vh
    if np.linalg.det(r) < 0:
        u = u.copy()
        u[:, -1] = -u[:, -1]
        r = u @ vh
    return r


def is_rigid(transform: np.ndarray, tol: float = 1e-9) -> bool:
    lin = np.asarray(transform, dtype=np.float64)[:, :3]
    return bool(
        np.abs(lin @ lin.T - np.eye(3)).max() < tol and np.linalg.det(lin) > 0
    )
