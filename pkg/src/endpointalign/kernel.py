"""Truncated spherical heat kernel with spectral truncation and sparsification.

The kernel on one sphere is K(x, y) = c * sum_{l<=H} (2l+1) exp(-l(l+1) sigma)
P_l(x . y) with c = 1/(4 pi) in the normalized convention (so the kernel
integrates to one over its sphere) and c = 1 otherwise.  Points on different
hemispheres have kernel value exactly zero.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.sparse import csr_matrix
from . import _accel

MAX_TRUNCATION = 256
DEFAULT_SPECTRAL_TOL = 1e-10
DEFAULT_VALUE_CUTOFF = 1e-8
_PROFILE_SAMPLES = 8192


def truncation_degree(sigma: float, spectral_tol: float) -> int:
    """Smallest H with exp(-H(H+1) sigma) <= spectral_tol, capped at 256."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if not 0 < spectral_tol <= 1:
        raise ValueError("spectral_tol must lie in (0, 1]")
    target = np.log(1.0 / spectral_tol) / sigma
    h = int(np.ceil((-1.0 + np.sqrt(1.0 + 4.0 * target)) / 2.0))
    h = max(h, 0)
    while h > 0 and (h - 1) * h >= target:
        h -= 1
    while h * (h + 1) < target and h < MAX_TRUNCATION:
        h += 1
    return min(h, MAX_TRUNCATION)


@dataclass(frozen=True)
class KernelSpec:
    """Bandwidth, truncation degree, sparsification cutoff, normalization."""

    sigma: float
    truncation: int
    value_cutoff: float = DEFAULT_VALUE_CUTOFF
    normalized: bool = True

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.truncation < 0:
            raise ValueError("truncation must be >= 0")
        if not 0 <= self.value_cutoff < 1:
            raise ValueError("value_cutoff must lie in [0, 1)")

    @classmethod
    def for_bandwidth(cls, sigma: float, spectral_tol: float = DEFAULT_SPECTRAL_TOL,
                      value_cutoff: float = DEFAULT_VALUE_CUTOFF,
                      normalized: bool = True) -> "KernelSpec":
        return cls(sigma=sigma, truncation=truncation_degree(sigma, spectral_tol),
                   value_cutoff=value_cutoff, normalized=normalized)


@lru_cache(maxsize=64)
def spectral_weights(spec: KernelSpec) -> np.ndarray:
    """Per-degree weights (2l+1) exp(-l(l+1) sigma), scaled by 1/(4 pi) if normalized."""
    l = np.arange(spec.truncation + 1, dtype=float)
    w = (2 * l + 1) * np.exp(-l * (l + 1) * spec.sigma)
    if spec.normalized:
        w /= 4.0 * np.pi
    w.setflags(write=False)
    return w


def peak_value(spec: KernelSpec) -> float:
    """Kernel value at zero angle (all Legendre polynomials equal one)."""
    return float(spectral_weights(spec).sum())


def legendre_all(t, degree: int) -> np.ndarray:
    """P_0(t) .. P_degree(t) by the three-term recurrence; shape (degree+1, ...)."""
    t = np.asarray(t, dtype=float)
    if np.any(np.abs(t) > 1 + 1e-12):
        raise ValueError("|t| must not exceed 1")
    t = np.clip(t, -1.0, 1.0)
    out = np.empty((degree + 1,) + t.shape)
    out[0] = 1.0
    if degree >= 1:
        out[1] = t
    for l in range(1, degree):
        out[l + 1] = ((2 * l + 1) * t * out[l] - l * out[l - 1]) / (l + 1)
    return out


def zonal_values(spec: KernelSpec, t) -> tuple[np.ndarray, np.ndarray]:
    """Kernel value (clamped at zero) and radial derivative at cos-angle ``t``.

    Single evaluation path shared with the sparse assembly so matrix entries
    match scalar calls exactly.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float)).ravel()
    n = t.size
    # Degenerate one-row CSR against unit x so the entry dot product equals t.
    rows = np.zeros((n, 3))
    rows[:, 0] = 1.0
    cols = np.zeros((n, 3))
    cols[:, 0] = t
    indptr = np.arange(n + 1, dtype=np.int64)
    indices = np.arange(n, dtype=np.int32)
    k = np.empty(n)
    kp = np.empty(n)
    tt = np.empty(n)
    _accel.csr_zonal_values(indptr, indices, rows, cols, spectral_weights(spec), tt, k, kp)
    return k, kp


def heat_kernel(x, y, spec: KernelSpec, hemi_x=None, hemi_y=None) -> np.ndarray:
    """Kernel between unit points; zero when hemisphere tags differ."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    t = np.clip(np.sum(x * y, axis=-1), -1.0, 1.0)
    k, _ = zonal_values(spec, t)
    k = k.reshape(np.shape(t))
    if hemi_x is not None and hemi_y is not None:
        k = np.where(np.asarray(hemi_x) == np.asarray(hemi_y), k, 0.0)
    return k if k.ndim else float(k)


def heat_kernel_grad(x, y, spec: KernelSpec, hemi_x=None, hemi_y=None) -> np.ndarray:
    """Surface gradient of the kernel with respect to ``x``.

    Equals K'(x . y) (y - (x . y) x), a tangent vector at ``x``; the zero
    vector across hemispheres.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    t = np.clip(np.sum(x * y, axis=-1), -1.0, 1.0)
    _, kp = zonal_values(spec, t)
    kp = kp.reshape(np.shape(t))
    grad = kp[..., None] * (y - t[..., None] * x)
    coincident = np.all(x == y, axis=-1)  # exact-arithmetic peak: zero slope
    grad = np.where(coincident[..., None], 0.0, grad)
    if hemi_x is not None and hemi_y is not None:
        same = (np.asarray(hemi_x) == np.asarray(hemi_y))
        grad = np.where(same[..., None], grad, 0.0)
    return grad


@lru_cache(maxsize=64)
def cutoff_angle(spec: KernelSpec) -> float:
    """Largest geodesic angle whose kernel value still clears the cutoff."""
    if spec.value_cutoff == 0.0:
        return float(np.pi)
    theta = np.linspace(0.0, np.pi, _PROFILE_SAMPLES)
    k, _ = zonal_values(spec, np.cos(theta))
    keep = k >= spec.value_cutoff * peak_value(spec)
    if not keep.any():
        return 0.0
    last = int(np.nonzero(keep)[0][-1])
    return float(theta[min(last + 1, _PROFILE_SAMPLES - 1)])


class KernelMatrices:
    """Sparse kernel structure between grid rows and data columns.

    Holds both layouts of one sparsity pattern: row-major arrays
    (``indptr``, ``indices``, ``t``, ``k``, ``kp`` over grid rows) feed the
    pattern side of the panel products, and the transposed arrays
    (``indptr_t``, ``indices_t``, ``k_t`` over data points) are the streamed
    side.  Constructed from data-major entries; the row-major layout comes
    from a stable counting sort, so both orders are canonical.
    """

    def __init__(self, data_indptr, entry_rows, t, k, kp, n_rows, n_cols):
        self.n_rows = n_rows
        self.n_cols = n_cols
        self.indptr_t = data_indptr
        self.indices_t = entry_rows
        self.k_t = k
        self.kp_t = kp
        self.indptr = np.concatenate([
            [0], np.cumsum(np.bincount(entry_rows, minlength=n_rows))]).astype(np.int64)
        order = _accel.csr_transpose_order(entry_rows.astype(np.int64), self.indptr)
        col_ids = np.repeat(np.arange(n_cols, dtype=np.int32), np.diff(data_indptr))
        nnz = entry_rows.size
        self.indices = np.empty(nnz, dtype=np.int32)
        self.t = np.empty(nnz)
        self.k = np.empty(nnz)
        self.kp = np.empty(nnz)
        _accel.gather_entries(order, col_ids, t, k, kp,
                              self.indices, self.t, self.k, self.kp)
        self._t_order = order

    def to_transposed_order(self, entry_values: np.ndarray) -> np.ndarray:
        """Re-order row-major entry values into the transposed layout."""
        out = np.empty_like(entry_values)
        out[self._t_order] = entry_values
        return out

    @property
    def nnz(self) -> int:
        return self.indices.size

    def to_csr(self) -> csr_matrix:
        return csr_matrix((self.k, self.indices, self.indptr),
                          shape=(self.n_rows, self.n_cols))


_COARSE_LEVEL = 3


class _CoarseIndex:
    """Coarse-face bucketing of a point set for radius candidate lookups.

    Points are grouped by their level-3 icosphere face; for a reach angle
    ``theta`` the candidates of a query are all points whose face center
    lies within ``theta`` plus both face circumradii of the query's face
    center.  Exactness comes from the caller's cos-angle filter.
    """

    def __init__(self, points: np.ndarray):
        from .mesh import build_icosphere, locate_face  # deferred: mesh imports kernel users

        self.points = points
        self.mesh = build_icosphere(_COARSE_LEVEL)
        face = locate_face(self.mesh, points) if len(points) else np.empty(0, np.int64)
        order = np.argsort(face, kind="stable")
        self.member_ids = order.astype(np.int64)
        counts = np.bincount(face, minlength=self.mesh.num_faces)
        self.face_start = np.concatenate([[0], np.cumsum(counts)])
        tri = self.mesh.vertices[self.mesh.faces]
        centers = tri.mean(axis=1)
        centers /= np.linalg.norm(centers, axis=1, keepdims=True)
        self.centers = centers
        self.circumrad = np.arccos(np.clip(
            np.einsum("fij,fj->fi", tri, centers), -1, 1)).max(axis=1)

    def candidate_lists(self, theta: float) -> tuple[np.ndarray, np.ndarray]:
        """Per-face candidate point ids within reach ``theta`` (CSR layout)."""
        reach = np.cos(np.minimum(theta + 2.0 * self.circumrad.max() + 1e-9, np.pi))
        member_counts = np.diff(self.face_start)
        hit = ((self.centers @ self.centers.T) >= reach) & (member_counts > 0)[None, :]
        counts = hit @ member_counts
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        pf, pg = np.nonzero(hit)  # pair list, sorted by source face
        seg_len = member_counts[pg]
        total = int(seg_len.sum())
        seg_dst = np.concatenate([[0], np.cumsum(seg_len)])
        within = np.arange(total) - np.repeat(seg_dst[:-1], seg_len)
        src = np.repeat(self.face_start[pg], seg_len) + within
        out = self.member_ids[src]
        return indptr, out

    def query_faces(self, queries: np.ndarray) -> np.ndarray:
        from .mesh import locate_face

        return locate_face(self.mesh, queries)


class RowIndex:
    """Reusable candidate index for one fixed row point set.

    Holds the per-hemisphere coarse buckets and reach lists for a given
    kernel spec, so repeated assemblies against moving data (the inner
    registration loop) skip rebuilding the row-side structures.
    """

    def __init__(self, row_xyz: np.ndarray, row_hemi: np.ndarray, spec: KernelSpec):
        self.row_xyz = np.ascontiguousarray(row_xyz, dtype=float)
        self.row_hemi = np.asarray(row_hemi)
        self.theta = cutoff_angle(spec)
        self.dense = self.theta >= np.pi - 1e-12
        self.per_hemi: dict[int, tuple] = {}
        for h in (1, 2):
            rows_h = np.nonzero(self.row_hemi == h)[0].astype(np.int64)
            if rows_h.size == 0:
                continue
            if self.dense:
                self.per_hemi[h] = (rows_h, None, None, None)
            else:
                coarse = _CoarseIndex(self.row_xyz[rows_h])
                find, fcand = coarse.candidate_lists(self.theta)
                self.per_hemi[h] = (rows_h, coarse, find, rows_h[fcand])


def assemble_kernel_matrices(row_xyz: np.ndarray, row_hemi: np.ndarray,
                             col_xyz: np.ndarray, col_hemi: np.ndarray,
                             spec: KernelSpec,
                             row_index: RowIndex | None = None) -> KernelMatrices:
    """Build the sparse kernel structure between two tagged point sets.

    Candidate pairs are gathered within the cutoff angle (everything in the
    same hemisphere when the cutoff is zero), evaluated exactly, then entries
    below cutoff * peak are dropped.  Entries are produced column-major
    (per data point) and transposed by a stable counting sort, so both
    layouts are deterministic.
    """
    if row_index is None:
        row_index = RowIndex(row_xyz, row_hemi, spec)
    row_xyz = row_index.row_xyz
    col_xyz = np.ascontiguousarray(col_xyz, dtype=float)
    col_hemi = np.asarray(col_hemi)
    n_rows, n_cols = len(row_xyz), len(col_xyz)

    dense = row_index.dense
    tmin = -1.1 if dense else float(np.cos(row_index.theta))

    # Candidate CSR over all queries (data points), entries = global row ids.
    q_counts = np.zeros(n_cols, dtype=np.int64)
    fills: list[tuple] = []
    for h, entry in row_index.per_hemi.items():
        rows_h, coarse, find, fcand = entry
        cols_h = np.nonzero(col_hemi == h)[0]
        if cols_h.size == 0:
            continue
        if dense:
            q_counts[cols_h] = rows_h.size
            fills.append((cols_h, None, np.array([0, rows_h.size]), rows_h))
            continue
        qf = coarse.query_faces(col_xyz[cols_h])
        q_counts[cols_h] = find[qf + 1] - find[qf]
        fills.append((cols_h, qf, find, fcand))

    q_indptr = np.concatenate([[0], np.cumsum(q_counts)]).astype(np.int64)
    q_cand = np.empty(q_indptr[-1], dtype=np.int64)
    for cols_h, qf, find, fcand in fills:
        if qf is None:
            qf = np.zeros(cols_h.size, dtype=np.int64)
        _accel.fill_candidates(q_indptr, cols_h.astype(np.int64), qf.astype(np.int64),
                               find.astype(np.int64), fcand.astype(np.int64), q_cand)

    kept = np.zeros(n_cols, dtype=np.int64)
    _accel.candidate_tfilter_counts(q_indptr, q_cand, row_xyz, col_xyz, tmin, kept)
    out_indptr = np.concatenate([[0], np.cumsum(kept)]).astype(np.int64)
    nnz = int(out_indptr[-1])
    out_rows = np.empty(nnz, dtype=np.int32)
    t = np.empty(nnz)
    k = np.empty(nnz)
    kp = np.empty(nnz)
    _accel.zonal_eval_filtered(q_indptr, q_cand, row_xyz, col_xyz,
                               spectral_weights(spec), tmin,
                               out_indptr, out_rows, t, k, kp)

    if spec.value_cutoff > 0.0 and nnz:
        keep = k >= spec.value_cutoff * peak_value(spec)
        if not keep.all():
            col_ids = np.repeat(np.arange(n_cols), kept)[keep]
            out_rows, t, k, kp = out_rows[keep], t[keep], k[keep], kp[keep]
            out_indptr = np.concatenate([
                [0], np.cumsum(np.bincount(col_ids, minlength=n_cols))]).astype(np.int64)

    return KernelMatrices(out_indptr, out_rows, t, k, kp, n_rows, n_cols)


def heat_kernel_matrix(grid_xyz, grid_hemi, data_xyz, data_hemi,
                       spec: KernelSpec) -> csr_matrix:
    """Sparse kernel matrix (grid rows by data columns) as scipy CSR."""
    return assemble_kernel_matrices(grid_xyz, grid_hemi, data_xyz, data_hemi,
                                    spec).to_csr()


class LegendreTable:
    """Cached Legendre values on a fixed set of cos-angles.

    Lets a bandwidth sweep reuse the geometric part of the spectral sum: the
    contraction against new per-degree weights is a single matrix-vector
    product.  Memory grows as O(n * (H+1)).
    """

    def __init__(self, t: np.ndarray):
        self.t = np.asarray(t, dtype=float).ravel()
        self._p = np.ones((1, self.t.size))

    def _extend(self, degree: int) -> None:
        have = self._p.shape[0] - 1
        if degree <= have:
            return
        p = np.empty((degree + 1, self.t.size))
        p[: have + 1] = self._p
        if have < 1 <= degree:
            p[1] = self.t
            have = 1
        for l in range(have, degree):
            p[l + 1] = ((2 * l + 1) * self.t * p[l] - l * p[l - 1]) / (l + 1)
        self._p = p

    def contract(self, spec: KernelSpec) -> np.ndarray:
        """Kernel values on the cached angles for a new bandwidth."""
        w = spectral_weights(spec)
        self._extend(spec.truncation)
        return np.clip(w @ self._p[: spec.truncation + 1], 0.0, None)
