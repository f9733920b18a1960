"""Icosphere grids: recursive subdivision, quadrature weights, point location.

Level ``G`` has ``V = 10 * 4**G + 2`` vertices and ``K = 20 * 4**G`` faces.
Vertices of level ``G-1`` occupy the first ``10 * 4**(G-1) + 2`` slots of
level ``G`` (midpoints are appended in canonical sorted-edge order), and the
four children of face ``j`` are faces ``4j .. 4j+3`` of the next level.
Both conventions make meshes and face lookups bit-identical across runs.
"""

import numpy as np

from .errors import LevelTooLarge
from .sphere import normalize

MAX_LEVEL = 7
# Containment slack for signed-determinant tests against great-circle edges.
EDGE_TOL = 1e-12

# Icosahedron with unit-norm vertices: X/Z = Z/(X+Z), X^2 + Z^2 = 1.
_X = np.sqrt((5.0 - np.sqrt(5.0)) / 10.0)
_Z = np.sqrt(1.0 - _X * _X)

_ICO_VERTS = np.array([
    [-_X, 0.0, _Z], [_X, 0.0, _Z], [-_X, 0.0, -_Z], [_X, 0.0, -_Z],
    [0.0, _Z, _X], [0.0, _Z, -_X], [0.0, -_Z, _X], [0.0, -_Z, -_X],
    [_Z, _X, 0.0], [-_Z, _X, 0.0], [_Z, -_X, 0.0], [-_Z, -_X, 0.0],
])

_ICO_FACES = np.array([
    [0, 1, 4], [0, 4, 9], [9, 4, 5], [4, 8, 5], [4, 1, 8],
    [8, 1, 10], [8, 10, 3], [5, 8, 3], [5, 3, 2], [2, 3, 7],
    [7, 3, 10], [7, 10, 6], [7, 6, 11], [11, 6, 0], [0, 6, 1],
    [6, 10, 1], [9, 11, 0], [9, 2, 11], [9, 5, 2], [7, 11, 2],
], dtype=np.int32)


def _subdivide(verts: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split each face into four; midpoints appended in sorted-edge order."""
    nv = len(verts)
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    keys = edges[:, 0].astype(np.int64) * nv + edges[:, 1]
    uniq, inverse = np.unique(keys, return_inverse=True)
    mid_index = nv + inverse.reshape(3, -1)  # rows: ab, bc, ca per face

    ea = (uniq // nv).astype(np.int32)
    eb = (uniq % nv).astype(np.int32)
    midpoints = normalize(verts[ea] + verts[eb])
    new_verts = np.concatenate([verts, midpoints])

    a, b, c = faces[:, 0], faces[:, 1], faces[:, 2]
    mab, mbc, mca = mid_index[0], mid_index[1], mid_index[2]
    children = np.stack([
        np.stack([a, mab, mca], axis=1),
        np.stack([b, mbc, mab], axis=1),
        np.stack([c, mca, mbc], axis=1),
        np.stack([mab, mbc, mca], axis=1),
    ], axis=1)  # (K, 4, 3): children of face j are rows 4j..4j+3
    return new_verts, children.reshape(-1, 3).astype(np.int32)


def _edge_normals(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per face, the three great-circle normals (va x vb, vb x vc, vc x va)."""
    va, vb, vc = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    return np.stack([np.cross(va, vb), np.cross(vb, vc), np.cross(vc, va)], axis=1)


def signed_face_areas(verts: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Signed spherical areas via the van Oosterom-Strackee solid angle.

    Positive for outward counterclockwise faces; the sign doubles as the
    orientation test used by the diffeomorphism checks.
    """
    va, vb, vc = verts[faces[:, 0]], verts[faces[:, 1]], verts[faces[:, 2]]
    num = np.einsum("ij,ij->i", va, np.cross(vb, vc))
    den = (1.0 + np.einsum("ij,ij->i", va, vb)
           + np.einsum("ij,ij->i", vb, vc)
           + np.einsum("ij,ij->i", vc, va))
    return 2.0 * np.arctan2(num, den)


class IcosphereMesh:
    """Hierarchical triangulated sphere grid.

    Holds every subdivision level up to ``level`` so that face lookups can
    descend the 4-way child tree in O(level) per query.
    """

    def __init__(self, level: int):
        if level > MAX_LEVEL:
            raise LevelTooLarge(f"subdivision level {level} exceeds {MAX_LEVEL}")
        if level < 0:
            raise ValueError("subdivision level must be >= 0")
        self.level = level
        verts, faces = _ICO_VERTS.copy(), _ICO_FACES.copy()
        self._levels = [(verts, faces)]
        for _ in range(level):
            verts, faces = _subdivide(verts, faces)
            self._levels.append((verts, faces))
        self.vertices = verts
        self.faces = faces
        self._normals = [_edge_normals(v, f) for v, f in self._levels]
        self._weights = None
        self._rings = None

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    @property
    def parent_map(self) -> np.ndarray:
        """Indices of level ``G-1`` vertices inside this level (a prefix)."""
        if self.level == 0:
            return np.arange(0)
        return np.arange(len(self._levels[-2][0]))

    def vertex_rings(self) -> list[np.ndarray]:
        """Sorted 1-ring neighbor indices per vertex."""
        if self._rings is None:
            nbr: list[set] = [set() for _ in range(self.num_vertices)]
            for a, b, c in self.faces:
                nbr[a].update((b, c))
                nbr[b].update((a, c))
                nbr[c].update((a, b))
            self._rings = [np.array(sorted(s), dtype=np.int32) for s in nbr]
        return self._rings

    def __eq__(self, other) -> bool:
        return isinstance(other, IcosphereMesh) and other.level == self.level

    def __hash__(self):
        return hash(("IcosphereMesh", self.level))


def build_icosphere(level: int) -> IcosphereMesh:
    """Construct the level-``G`` icosphere (0 <= G <= 7)."""
    return IcosphereMesh(level)


def spatial_vertex_order(mesh: IcosphereMesh) -> np.ndarray:
    """Vertex permutation ordered by lowest incident face index.

    Fine face indices follow the 4-way subdivision hierarchy, so this order
    is spatially coherent: vertices with nearby positions get nearby ranks.
    Used internally to improve cache reuse in kernel contractions; all public
    surfaces keep the canonical hierarchical vertex order.
    """
    key = np.full(mesh.num_vertices, mesh.num_faces, dtype=np.int64)
    np.minimum.at(key, mesh.faces.ravel(),
                  np.repeat(np.arange(mesh.num_faces), 3))
    return np.argsort(key, kind="stable")


def vertex_weights(mesh: IcosphereMesh) -> np.ndarray:
    """Quadrature weight per vertex: one third of its incident face areas.

    The weights partition the sphere exactly, so they sum to 4*pi.
    """
    if mesh._weights is None:
        areas = signed_face_areas(mesh.vertices, mesh.faces)
        w = np.zeros(mesh.num_vertices)
        np.add.at(w, mesh.faces.ravel(), np.repeat(areas / 3.0, 3))
        mesh._weights = w
    return mesh._weights


def _pick_face(mindet: np.ndarray) -> np.ndarray:
    """Lowest candidate index whose worst edge test passes, else best fit."""
    ok = mindet >= -EDGE_TOL
    first = np.argmax(ok, axis=1)
    fallback = np.argmax(mindet, axis=1)
    return np.where(ok.any(axis=1), first, fallback)


def locate_face(mesh: IcosphereMesh, points: np.ndarray) -> np.ndarray:
    """Faces containing the central projections of ``points``.

    Ties on shared edges resolve to the lowest face index, which the
    child ordering makes equivalent to a lowest-index-first scan of the
    full face list.  Accepts ``(3,)`` or ``(n, 3)``; returns matching shape.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dets = np.einsum("fej,nj->nfe", mesh._normals[0], pts)
    face = _pick_face(dets.min(axis=2))
    for lvl in range(1, mesh.level + 1):
        cand = 4 * face[:, None] + np.arange(4)[None, :]
        normals = mesh._normals[lvl][cand]  # (n, 4, 3, 3)
        dets = np.einsum("nkej,nj->nke", normals, pts)
        face = cand[np.arange(len(pts)), _pick_face(dets.min(axis=2))]
    face = face.astype(np.int64)
    if np.asarray(points).ndim == 1:
        return face[0]
    return face


def barycentric_weights(mesh: IcosphereMesh, points: np.ndarray,
                        faces: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Barycentric coordinates of the central projections onto their faces.

    Returns ``(faces, weights)`` with weights clamped to be non-negative and
    normalized to sum to one per point.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if faces is None:
        faces = locate_face(mesh, pts)
    tri = mesh.vertices[mesh.faces[faces]]  # (n, 3, 3)
    lam = np.linalg.solve(tri.transpose(0, 2, 1), pts[:, :, None])[:, :, 0]
    lam = np.clip(lam, 0.0, None)
    lam /= lam.sum(axis=1, keepdims=True)
    return faces, lam
