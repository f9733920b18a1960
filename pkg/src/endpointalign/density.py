"""KDE density proxy on grid-vertex pairs, Q-transform, analytic gradients,
and leave-one-out bandwidth scoring.

Grids index the product domain by pairs of extended grid indices
``a = hemi_block * V + vertex`` (hemisphere 1 first).  Because every stored
field is symmetric in (a, b), grids keep only the upper triangle in packed
row-major order; ``values`` unpacks on demand.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .errors import EmptyEndpointSet
from .kernel import KernelSpec, KernelMatrices, RowIndex, assemble_kernel_matrices
from .mesh import IcosphereMesh, spatial_vertex_order, vertex_weights

log = logging.getLogger(__name__)

# Relative density floor below which q-gradients are defined as zero.
GRADIENT_FLOOR = 1e-12
# Grids at or below this vertex-pair count take the full-matrix fast path.
_FULL_MATRIX_LIMIT = 6000
_CHUNK_ROWS = 512


@dataclass
class EndpointSet:
    """Paired streamline endpoints on the two-sphere union.

    ``p1``/``p2`` are (N, 3) unit vectors, ``hemi1``/``hemi2`` their
    hemisphere tags in {1, 2}.  Pair order is preserved as loaded.
    """

    hemi1: np.ndarray
    p1: np.ndarray
    hemi2: np.ndarray
    p2: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.hemi1 = np.asarray(self.hemi1, dtype=np.int8)
        self.hemi2 = np.asarray(self.hemi2, dtype=np.int8)
        self.p1 = np.ascontiguousarray(self.p1, dtype=float)
        self.p2 = np.ascontiguousarray(self.p2, dtype=float)
        for h in (self.hemi1, self.hemi2):
            if h.size and not np.isin(h, (1, 2)).all():
                raise ValueError("hemisphere tags must be 1 or 2")
        for p in (self.p1, self.p2):
            if p.size and np.abs(np.linalg.norm(p, axis=1) - 1.0).max() > 1e-9:
                raise ValueError("endpoints must be unit vectors")

    @property
    def count(self) -> int:
        return len(self.p1)

    def copy(self) -> "EndpointSet":
        return EndpointSet(self.hemi1.copy(), self.p1.copy(),
                           self.hemi2.copy(), self.p2.copy(),
                           None if self.labels is None else self.labels.copy())

    def subset(self, mask) -> "EndpointSet":
        return EndpointSet(self.hemi1[mask], self.p1[mask],
                           self.hemi2[mask], self.p2[mask],
                           None if self.labels is None else self.labels[mask])


def grid_points(mesh: IcosphereMesh) -> tuple[np.ndarray, np.ndarray]:
    """Extended grid coordinates and hemisphere tags (hemisphere 1 first)."""
    xyz = np.vstack([mesh.vertices, mesh.vertices])
    hemi = np.repeat(np.array([1, 2], dtype=np.int8), mesh.num_vertices)
    return xyz, hemi


def grid_weights(mesh: IcosphereMesh) -> np.ndarray:
    """Quadrature weights on the extended grid (per-hemisphere copy)."""
    w = vertex_weights(mesh)
    return np.concatenate([w, w])


def packed_size(n: int) -> int:
    return n * (n + 1) // 2


@dataclass
class DensityGrid:
    """Symmetrized KDE values on all grid-vertex pairs (packed storage)."""

    mesh: IcosphereMesh
    packed: np.ndarray

    @property
    def n(self) -> int:
        return 2 * self.mesh.num_vertices

    @property
    def values(self) -> np.ndarray:
        """Full (2V, 2V) matrix; unpacked on demand."""
        out = np.empty((self.n, self.n))
        _accel.packed_unpack(self.packed, self.n, out)
        return out

    def value_at(self, a: int, b: int) -> float:
        return float(self.packed[_accel.tri_index(a, b, self.n)])

    def quadrature_mass(self) -> float:
        w = grid_weights(self.mesh)
        d = np.zeros_like(self.packed)
        return float(_accel.packed_weighted_sq_norm(np.sqrt(np.maximum(self.packed, 0)), w, self.n))


@dataclass
class QGrid:
    """Pointwise square root of a density grid (same packed indexing)."""

    mesh: IcosphereMesh
    packed: np.ndarray
    dqx: np.ndarray | None = field(default=None, repr=False)
    source_engine: "DensityEngine | None" = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return 2 * self.mesh.num_vertices

    @property
    def values(self) -> np.ndarray:
        out = np.empty((self.n, self.n))
        _accel.packed_unpack(self.packed, self.n, out)
        return out

    def value_at(self, a: int, b: int) -> float:
        return float(self.packed[_accel.tri_index(a, b, self.n)])


class DensityEngine:
    """Kernel matrices plus the packed symmetrized density they generate.

    Shared by the public density operations and the registration loop, which
    reuses the matrices for gradient aggregates.  With ``permute=True`` every
    grid-indexed array (rows, weights, packed grids, aggregates) lives in the
    spatially coherent vertex order from :func:`spatial_vertex_order`, which
    roughly halves the kernel contraction time; callers must then contract
    against tables built in the same order.  Public density operations use
    the canonical order.
    """

    def __init__(self, pts: EndpointSet, mesh: IcosphereMesh, spec: KernelSpec,
                 permute: bool = False, row_index: RowIndex | None = None):
        if pts.count == 0:
            raise EmptyEndpointSet("cannot estimate a density from zero pairs")
        self.pts = pts
        self.mesh = mesh
        self.spec = spec
        v = mesh.num_vertices
        self.tau = spatial_vertex_order(mesh) if permute else np.arange(v)
        gxyz, ghemi = grid_points(mesh)
        gxyz = np.ascontiguousarray(gxyz[np.concatenate([self.tau, v + self.tau])])
        self.grid_xyz = gxyz
        if row_index is None:
            row_index = RowIndex(gxyz, ghemi, spec)
        self.row_index = row_index
        self.b1 = assemble_kernel_matrices(gxyz, ghemi, pts.p1, pts.hemi1, spec,
                                           row_index)
        self.b2 = assemble_kernel_matrices(gxyz, ghemi, pts.p2, pts.hemi2, spec,
                                           row_index)
        self.n = len(gxyz)

    def grid_weights(self) -> np.ndarray:
        w = vertex_weights(self.mesh)[self.tau]
        return np.concatenate([w, w])

    def density_full(self) -> np.ndarray:
        """Symmetrized KDE on all vertex pairs as a full (2V, 2V) matrix."""
        n = self.n
        full = np.empty((n, n))
        _accel.panel_product(self.b1.indptr, self.b1.indices, self.b1.k,
                             0, n, self.b2.indptr_t, self.b2.indices_t,
                             self.b2.k_t, n, self.pts.count, full)
        _accel.symmetrize_inplace(full, n)
        full *= 1.0 / self.pts.count
        return full

    def density_packed(self) -> np.ndarray:
        """Symmetrized KDE in packed upper-triangle storage.

        Grids beyond the full-matrix limit stream row chunks of both product
        orders instead of materializing the (2V, 2V) matrix.
        """
        n, inv_n = self.n, 1.0 / self.pts.count
        nd = self.pts.count
        out = np.empty(packed_size(n))
        if n <= _FULL_MATRIX_LIMIT:
            full = self.density_full()
            _accel.pack_symmetric_from_full(full, n, 1.0, out)
        else:
            x = np.empty((_CHUNK_ROWS, n))
            y = np.empty((_CHUNK_ROWS, n))
            for lo in range(0, n, _CHUNK_ROWS):
                hi = min(lo + _CHUNK_ROWS, n)
                _accel.panel_product(self.b1.indptr, self.b1.indices, self.b1.k,
                                     lo, hi, self.b2.indptr_t, self.b2.indices_t,
                                     self.b2.k_t, n, nd, x[: hi - lo])
                _accel.panel_product(self.b2.indptr, self.b2.indices, self.b2.k,
                                     lo, hi, self.b1.indptr_t, self.b1.indices_t,
                                     self.b1.k_t, n, nd, y[: hi - lo])
                _accel.pack_symmetric_mean(x[: hi - lo], y[: hi - lo], lo, n, inv_n, out)
        return out

    def gradient_aggregates(self, q1: np.ndarray, q2: np.ndarray,
                            w: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Per-vertex sums driving the energy gradient, from full q matrices.

        Returns ``(g, s, e)``: ``g[., a] = sum_b w_b r(a,b) dq1(a,b)`` (the
        first-argument q-gradient contracted against the residual),
        ``s[a] = sum_b w_b r(a,b) q2(a,b)``, and the per-row squared-residual
        quadrature ``e[a] = sum_b w_b r(a,b)^2``.
        """
        n = self.n
        q_floor = np.sqrt(GRADIENT_FLOOR) * float(q2.max())
        g = np.zeros((3, n))
        scale = 1.0 / (2.0 * self.pts.count)  # symmetrization pair mean / N
        _accel.panel_gradient(self.b1.indptr, self.b1.indices, self.b1.t, self.b1.kp,
                              self.grid_xyz, self.pts.p1,
                              self.b2.indptr_t, self.b2.indices_t, self.b2.k_t,
                              self.pts.count, q1, q2, w, n, q_floor, scale,
                              g[0], g[1], g[2])
        _accel.panel_gradient(self.b2.indptr, self.b2.indices, self.b2.t, self.b2.kp,
                              self.grid_xyz, self.pts.p2,
                              self.b1.indptr_t, self.b1.indices_t, self.b1.k_t,
                              self.pts.count, q1, q2, w, n, q_floor, scale,
                              g[0], g[1], g[2])
        s = np.empty(n)
        e = np.empty(n)
        _accel.residual_aggregates_full(q1, q2, w, n, s, e)
        return g, s, e

    def data_gradient_coefficients(self, q1: np.ndarray, q2: np.ndarray,
                                   w: np.ndarray, basis,
                                   timing: dict | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Exact derivative of the quadrature energy under endpoint motion.

        For each tangent-basis field the returned coefficient is
        d/dh of sum w_a w_b (q1 - q2_h)^2 where q2_h re-estimates the moving
        density after moving every endpoint by exp(h b).  The chain rule
        factors through per-data-point pullback vectors contracted with the
        field at the data points, so the quantity matches central finite
        differences of the re-estimated energy to discretization error.

        When ``timing`` is given, the kernel-contraction work (the KDE-side
        evaluation of the density-gradient machinery) accumulates under
        "kde" and the basis contraction under "gradient".
        """
        import time as _time

        from .basis import eval_basis

        t0 = _time.perf_counter()
        n = self.n
        q_floor = np.sqrt(GRADIENT_FLOOR) * float(q2.max())
        gvecs = []
        for mats, other in ((self.b1, self.b2), (self.b2, self.b1)):
            z = np.empty(mats.nnz)
            _accel.panel_residual_z(mats.indptr, mats.indices,
                                    other.indptr_t, other.indices_t, other.k_t,
                                    self.pts.count, q1, q2, w, n, q_floor, z)
            gvec = np.empty((self.pts.count, 3))
            _accel.data_point_vectors(mats.indptr_t, mats.indices_t, mats.kp_t,
                                      mats.to_transposed_order(z), w,
                                      self.grid_xyz, gvec)
            gvecs.append(gvec)
        if timing is not None:
            timing["kde"] = timing.get("kde", 0.0) + _time.perf_counter() - t0
        t0 = _time.perf_counter()
        coeffs = [np.zeros(basis.size), np.zeros(basis.size)]
        for gvec, pts_arr, hemi in ((gvecs[0], self.pts.p1, self.pts.hemi1),
                                    (gvecs[1], self.pts.p2, self.pts.hemi2)):
            for h in (1, 2):
                idx = np.nonzero(hemi == h)[0]
                for lo in range(0, idx.size, 20000):
                    sub = idx[lo: lo + 20000]
                    tab = eval_basis(basis, pts_arr[sub])
                    coeffs[h - 1] += np.einsum("mnc,nc->m", tab, gvec[sub])
        scale = -2.0 / self.pts.count
        if timing is not None:
            timing["gradient"] = (timing.get("gradient", 0.0)
                                  + _time.perf_counter() - t0)
        return scale * coeffs[0], scale * coeffs[1]


def estimate_density(pts: EndpointSet, mesh: IcosphereMesh,
                     spec: KernelSpec) -> DensityGrid:
    """Symmetrized product-kernel KDE evaluated on all grid-vertex pairs."""
    return DensityGrid(mesh, DensityEngine(pts, mesh, spec).density_packed())


def q_transform(f: DensityGrid) -> QGrid:
    """Pointwise square root of the density grid."""
    return QGrid(f.mesh, np.sqrt(np.maximum(f.packed, 0.0)))


def q_gradients(pts: EndpointSet, f: DensityGrid, mesh: IcosphereMesh,
                spec: KernelSpec) -> QGrid:
    """Q-grid carrying explicit first-argument gradient grids.

    ``dqx[c, a, b]`` holds the tangential derivative of q at vertex pair
    (a, b) with respect to the first argument; the second-argument gradient
    is its transpose ``dqx[c, b, a]`` by symmetry.  Grids where the density
    falls below 1e-12 of its maximum carry zero gradient.  Materializes
    three full (2V, 2V) matrices; intended for moderate grid levels.
    """
    eng = DensityEngine(pts, mesh, spec)
    n = eng.n
    inv = 1.0 / (2.0 * pts.count)
    dqx = np.zeros((3, n, n))
    for c in range(3):
        a1c = eng.b1.kp * (pts.p1[eng.b1.indices, c] - eng.b1.t * np.repeat(
            eng.grid_xyz[:, c], np.diff(eng.b1.indptr)))
        _accel.spgemm_rows_dense(eng.b1.indptr, eng.b1.indices, a1c, 0, n,
                                 eng.b2.indptr_t, eng.b2.indices_t, eng.b2.k_t,
                                 dqx[c], False)
        a2c = eng.b2.kp * (pts.p2[eng.b2.indices, c] - eng.b2.t * np.repeat(
            eng.grid_xyz[:, c], np.diff(eng.b2.indptr)))
        _accel.spgemm_rows_dense(eng.b2.indptr, eng.b2.indices, a2c, 0, n,
                                 eng.b1.indptr_t, eng.b1.indices_t, eng.b1.k_t,
                                 dqx[c], True)
    q = q_transform(f)
    qfull = q.values
    floor = np.sqrt(GRADIENT_FLOOR * float(f.packed.max()))
    with np.errstate(divide="ignore", invalid="ignore"):
        dqx *= np.where(qfull > floor, inv / (2.0 * qfull), 0.0)
    q.dqx = dqx
    q.source_engine = eng
    return q


def lcv_score(pts: EndpointSet, sigma: float, spectral_tol: float = 1e-10,
              value_cutoff: float = 0.0) -> float:
    """Leave-one-out log-likelihood of the product-kernel KDE at one bandwidth.

    Returns ``-inf`` (with a diagnostic) when any leave-one-out density is
    zero, which happens when the cutoff isolates a pair.
    """
    if pts.count < 2:
        raise EmptyEndpointSet("leave-one-out scoring needs at least two pairs")
    spec = KernelSpec.for_bandwidth(sigma, spectral_tol, value_cutoff)
    k1 = assemble_kernel_matrices(pts.p1, pts.hemi1, pts.p1, pts.hemi1, spec).to_csr()
    k2 = assemble_kernel_matrices(pts.p2, pts.hemi2, pts.p2, pts.hemi2, spec).to_csr()
    prod = k1.multiply(k2)
    loo = np.asarray(prod.sum(axis=1)).ravel() - prod.diagonal()
    loo /= pts.count - 1
    if (loo <= 0.0).any():
        log.warning("degenerate leave-one-out likelihood: %d pairs with zero "
                    "density at sigma=%g", int((loo <= 0).sum()), sigma)
        return float("-inf")
    return float(np.mean(np.log(loo)))


def lcv_sweep(pts: EndpointSet, sigmas, spectral_tol: float = 1e-10,
              cache_budget: int = 50_000_000) -> np.ndarray:
    """LCV scores over a bandwidth grid, reusing pairwise geometry.

    The pairwise cos-angles are computed once; each bandwidth re-contracts
    them against new spectral weights, through cached Legendre values when
    the table fits ``cache_budget`` elements.
    """
    from scipy.sparse import csr_matrix

    from .kernel import LegendreTable, zonal_values

    sigmas = np.asarray(sigmas, dtype=float)
    spec_min = KernelSpec.for_bandwidth(float(sigmas.min()), spectral_tol, 0.0)
    k1 = assemble_kernel_matrices(pts.p1, pts.hemi1, pts.p1, pts.hemi1, spec_min)
    k2 = assemble_kernel_matrices(pts.p2, pts.hemi2, pts.p2, pts.hemi2, spec_min)
    use_table = (k1.nnz + k2.nnz) * (spec_min.truncation + 1) <= cache_budget
    tables = (LegendreTable(k1.t), LegendreTable(k2.t)) if use_table else None
    scores = np.empty(sigmas.size)
    for i, s in enumerate(sigmas):
        spec = KernelSpec.for_bandwidth(float(s), spectral_tol, 0.0)
        if use_table:
            v1, v2 = tables[0].contract(spec), tables[1].contract(spec)
        else:
            v1, _ = zonal_values(spec, k1.t)
            v2, _ = zonal_values(spec, k2.t)
        m1 = csr_matrix((v1, k1.indices, k1.indptr), shape=(pts.count, pts.count))
        m2 = csr_matrix((v2, k2.indices, k2.indptr), shape=(pts.count, pts.count))
        prod = m1.multiply(m2)
        loo = (np.asarray(prod.sum(axis=1)).ravel() - prod.diagonal()) / (pts.count - 1)
        if (loo <= 0.0).any():
            log.warning("degenerate leave-one-out likelihood at sigma=%g", s)
            scores[i] = float("-inf")
        else:
            scores[i] = float(np.mean(np.log(loo)))
    return scores
