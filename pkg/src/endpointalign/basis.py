"""Orthonormal tangent vector fields on the sphere with analytic divergence.

For every real spherical harmonic Y_lm (1 <= l <= L, -l <= m <= l) the basis
contains the normalized surface gradient grad(Y_lm) / sqrt(l(l+1)) and the
normalized rotational field (n x grad Y_lm) / sqrt(l(l+1)), giving
M = 2 (L^2 + 2L) fields.  Gradient fields have divergence
-sqrt(l(l+1)) Y_lm; rotational fields are divergence free.

Evaluation works at arbitrary points through the regular solid harmonic
r^l Y_lm, whose Cartesian gradient is polynomial, so there are no coordinate
singularities at the poles.  Writing the solid harmonic as
N C_m(x, y) T(z, r^2) with C_m + i S_m = (x + i y)^m, the values T, dT/dz and
dT/d(r^2) on the unit sphere follow three-term recurrences in l.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegreeTooLarge

MAX_DEGREE = 16


@dataclass(frozen=True)
class BasisField:
    kind: str  # "gradient" or "rotational"
    degree: int
    order: int


class TangentBasis:
    """Ordered family of gradient and rotational harmonic tangent fields."""

    def __init__(self, max_degree: int):
        if not 1 <= max_degree <= MAX_DEGREE:
            raise DegreeTooLarge(f"basis degree must lie in [1, {MAX_DEGREE}]")
        self.max_degree = max_degree
        self.fields = [BasisField(kind, l, m)
                       for kind in ("gradient", "rotational")
                       for l in range(1, max_degree + 1)
                       for m in range(-l, l + 1)]

    @property
    def size(self) -> int:
        return len(self.fields)

    def __repr__(self):
        return f"TangentBasis(L={self.max_degree}, M={self.size})"


def build_basis(max_degree: int) -> TangentBasis:
    """Real vector spherical harmonics up to ``max_degree`` (M = 2(L^2+2L))."""
    return TangentBasis(max_degree)


def _harmonic_tables(points: np.ndarray, L: int):
    """Per-(l, m) scalar values and Cartesian gradients of Y_lm at unit points.

    Returns ``(y, grad)`` dictionaries keyed by (l, m) holding Y_lm values
    (n,) and the Cartesian gradient of the solid harmonic restricted to the
    sphere (n, 3).
    """
    pts = np.atleast_2d(points)
    x, y, z = pts[:, 0], pts[:, 1], pts[:, 2]
    n = len(pts)

    # C_m + i S_m = (x + i y)^m and their Cartesian derivatives.
    cm = [np.ones(n)]
    sm = [np.zeros(n)]
    for m in range(1, L + 1):
        cm.append(cm[-1] * x - sm[-1] * y)
        sm.append(sm[-1] * x + cm[-2] * y)

    vals: dict[tuple[int, int], np.ndarray] = {}
    grads: dict[tuple[int, int], np.ndarray] = {}
    for m in range(0, L + 1):
        # T(z, r^2) with P_l^m(u) = s^m T_l(u, 1); seeds at l = m.
        dfact = float(np.prod(np.arange(2 * m - 1, 0, -2))) if m > 0 else 1.0
        t_prev = np.full(n, dfact)
        tz_prev = np.zeros(n)
        tr_prev = np.zeros(n)
        t_cur, tz_cur, tr_cur = t_prev, tz_prev, tr_prev
        for l in range(m, L + 1):
            if l == m:
                t_cur, tz_cur, tr_cur = t_prev, tz_prev, tr_prev
            elif l == m + 1:
                c = 2 * m + 1
                t_cur = c * z * t_prev
                tz_cur = c * t_prev
                tr_cur = np.zeros(n)
            else:
                c1 = (2 * l - 1) / (l - m)
                c2 = (l + m - 1) / (l - m)
                t_cur = c1 * z * t_prev - c2 * t_pp
                tz_cur = c1 * (t_prev + z * tz_prev) - c2 * tz_pp
                tr_cur = c1 * z * tr_prev - c2 * (t_pp + tr_pp)
            t_pp, tz_pp, tr_pp = t_prev, tz_prev, tr_prev
            t_prev, tz_prev, tr_prev = t_cur, tz_cur, tr_cur

            if l == 0:
                continue
            norm = np.sqrt((2 * l + 1) / (4 * np.pi)
                           * np.exp(_lgamma(l - m + 1) - _lgamma(l + m + 1)))
            if m > 0:
                norm *= np.sqrt(2.0)
            # d/dx of C_m is m C_{m-1}; d/dy is -m S_{m-1} (Cauchy-Riemann).
            dcx = m * cm[m - 1] if m > 0 else 0.0
            dcy = -m * sm[m - 1] if m > 0 else 0.0
            dsx = m * sm[m - 1] if m > 0 else 0.0
            dsy = m * cm[m - 1] if m > 0 else 0.0
            dtz = tz_cur + 2.0 * z * tr_cur

            for sign in ((1,) if m == 0 else (1, -1)):
                ang = cm[m] if sign > 0 else sm[m]
                dax = dcx if sign > 0 else dsx
                day = dcy if sign > 0 else dsy
                vals[(l, sign * m)] = norm * ang * t_cur
                g = np.empty((n, 3))
                g[:, 0] = norm * (dax * t_cur + ang * tr_cur * 2.0 * x)
                g[:, 1] = norm * (day * t_cur + ang * tr_cur * 2.0 * y)
                g[:, 2] = norm * ang * dtz
                grads[(l, sign * m)] = g
    return vals, grads


def _lgamma(k: int) -> float:
    from math import lgamma

    return lgamma(k)


def eval_scalar_harmonics(points: np.ndarray, L: int) -> dict:
    """Real orthonormal Y_lm values at unit points, keyed by (l, m)."""
    vals, _ = _harmonic_tables(points, L)
    return vals


def eval_basis(basis: TangentBasis, points: np.ndarray) -> np.ndarray:
    """All basis fields at the given points, shape (M, n, 3).

    Each output vector is tangent to its point; gradient fields are the
    tangential projection of the polynomial solid-harmonic gradient.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals, grads = _harmonic_tables(pts, basis.max_degree)
    out = np.empty((basis.size, len(pts), 3))
    for i, fld in enumerate(basis.fields):
        l, m = fld.degree, fld.order
        scale = 1.0 / np.sqrt(l * (l + 1))
        # Surface gradient: grad R - l R n (Euler, homogeneity degree l).
        surf = grads[(l, m)] - l * vals[(l, m)][:, None] * pts
        if fld.kind == "gradient":
            out[i] = scale * surf
        else:
            out[i] = scale * np.cross(pts, surf)
    return out


def basis_divergence(basis: TangentBasis, points: np.ndarray) -> np.ndarray:
    """Surface divergence of each basis field at the points, shape (M, n).

    Zero for rotational fields; -sqrt(l(l+1)) Y_lm for gradient fields.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    vals = eval_scalar_harmonics(pts, basis.max_degree)
    out = np.zeros((basis.size, len(pts)))
    for i, fld in enumerate(basis.fields):
        if fld.kind == "gradient":
            l = fld.degree
            out[i] = -np.sqrt(l * (l + 1)) * vals[(l, fld.order)]
    return out


def synthesize_field(basis: TangentBasis, coeffs: np.ndarray,
                     points: np.ndarray) -> np.ndarray:
    """Tangent field sum_i coeffs[i] b_i evaluated at the points, (n, 3).

    Accumulates per harmonic so the full (M, n, 3) table is never formed;
    this is the inner evaluation of every warp application.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    coeffs = np.asarray(coeffs, dtype=float)
    vals, grads = _harmonic_tables(pts, basis.max_degree)
    out = np.zeros((len(pts), 3))
    for i, fld in enumerate(basis.fields):
        c = coeffs[i]
        if c == 0.0:
            continue
        l, m = fld.degree, fld.order
        surf = grads[(l, m)] - l * vals[(l, m)][:, None] * pts
        w = c / np.sqrt(l * (l + 1))
        if fld.kind == "gradient":
            out += w * surf
        else:
            out += w * np.cross(pts, surf)
    return out
