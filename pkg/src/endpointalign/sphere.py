"""Exact geometry primitives on the unit two-sphere.

All functions accept either a single point (shape ``(3,)``) or a batch
(shape ``(n, 3)``) and broadcast accordingly.  Points are unit vectors in
R^3; tangent vectors at ``x`` satisfy ``v . x == 0``.
"""

import numpy as np

from .errors import AntipodalError

# Dot products this close to -1 are treated as antipodal.
ANTIPODAL_TOL = 1e-12
# Tangent steps below this norm leave the base point unchanged.
ZERO_STEP = 1e-14


def normalize(x: np.ndarray) -> np.ndarray:
    """Project onto the unit sphere along the ray from the origin."""
    x = np.asarray(x, dtype=float)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Euclidean dot product over the last axis, clamped to [-1, 1]."""
    return np.clip(np.sum(np.asarray(x) * np.asarray(y), axis=-1), -1.0, 1.0)


def geodesic_angle(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Great-circle angle in [0, pi] between unit vectors."""
    return np.arccos(dot(x, y))


def exp_map(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Geodesic flow from ``x`` along tangent vector ``v``.

    Returns ``cos(|v|) x + sin(|v|) v/|v|``, re-normalized so that
    repeated composition cannot drift off the sphere.  Steps with
    ``|v| < 1e-14`` return ``x`` unchanged.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    small = nv < ZERO_STEP
    safe = np.where(small, 1.0, nv)
    out = np.cos(nv) * x + np.sin(nv) / safe * v
    out = normalize(out)
    return np.where(small, x, out)


def log_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Tangent vector at ``x`` pointing to ``y`` with norm = geodesic angle.

    Raises:
        AntipodalError: if any pair satisfies ``x . y < -1 + 1e-12``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    c = dot(x, y)
    if np.any(c < -1.0 + ANTIPODAL_TOL):
        raise AntipodalError("log map undefined for antipodal points")
    perp = y - c[..., None] * x
    npn = np.linalg.norm(perp, axis=-1, keepdims=True)
    theta = np.arccos(c)[..., None]
    safe = np.where(npn < ZERO_STEP, 1.0, npn)
    return np.where(npn < ZERO_STEP, 0.0, theta / safe * perp)


def tangent_project(x: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Remove the radial component of ``v`` at base point ``x``."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    return v - np.sum(v * x, axis=-1, keepdims=True) * x


def tangent_frame(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal basis (e1, e2) of the tangent plane at ``x``.

    Uses the coordinate axis least aligned with ``x`` as the seed, so the
    frame is well defined everywhere including the poles.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    seed = np.zeros_like(x)
    idx = np.argmin(np.abs(x), axis=-1)
    seed[np.arange(len(x)), idx] = 1.0
    e1 = normalize(tangent_project(x, seed))
    e2 = np.cross(x, e1)
    return e1, e2


def random_points(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of ``n`` points on the sphere."""
    return normalize(rng.normal(size=(n, 3)))
