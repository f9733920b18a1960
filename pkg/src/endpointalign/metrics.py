"""Connectivity-level overlap coefficient and MMD between endpoint sets."""

from dataclasses import dataclass

import numpy as np

from .density import EndpointSet
from .errors import EmptyAfterFilter, MeshMismatch
from .kernel import KernelSpec, heat_kernel
from .mesh import IcosphereMesh, locate_face


@dataclass
class ConnectivityCounts:
    """Streamline counts over unordered face pairs of the binning grid.

    Face indices run over both hemispheres: a face f of hemisphere h maps to
    ``(h - 1) * K + f``.  ``counts`` maps ``(a, b)`` with a <= b to integers
    summing to ``n``.
    """

    mesh: IcosphereMesh
    counts: dict
    n: int


@dataclass
class OverlapReport:
    tau: float
    overlap: float
    suprathreshold_sizes: tuple
    degenerate: bool = False


def bin_endpoints(pts: EndpointSet, mesh: IcosphereMesh) -> ConnectivityCounts:
    """Bin each pair by the faces containing its endpoints (unordered)."""
    k = mesh.num_faces
    f1 = locate_face(mesh, pts.p1) + (pts.hemi1.astype(np.int64) - 1) * k
    f2 = locate_face(mesh, pts.p2) + (pts.hemi2.astype(np.int64) - 1) * k
    a = np.minimum(f1, f2)
    b = np.maximum(f1, f2)
    keys, cnt = np.unique(a * (2 * k) + b, return_counts=True)
    counts = {(int(key // (2 * k)), int(key % (2 * k))): int(c)
              for key, c in zip(keys, cnt)}
    return ConnectivityCounts(mesh, counts, pts.count)


def overlap_coefficient(c1: ConnectivityCounts, c2: ConnectivityCounts,
                        tau: float) -> OverlapReport:
    """Shared suprathreshold connections over the smaller suprathreshold set.

    Cells count when their normalized streamline fraction strictly exceeds
    ``tau``; an empty suprathreshold set on either side yields overlap 0
    with the ``degenerate`` flag.
    """
    if c1.mesh != c2.mesh:
        raise MeshMismatch("connectivity counts use different binning grids")
    s1 = {key for key, v in c1.counts.items() if v / c1.n > tau}
    s2 = {key for key, v in c2.counts.items() if v / c2.n > tau}
    if not s1 or not s2:
        return OverlapReport(tau, 0.0, (len(s1), len(s2)), degenerate=True)
    overlap = len(s1 & s2) / min(len(s1), len(s2))
    return OverlapReport(tau, overlap, (len(s1), len(s2)))


def _pair_gram(a: EndpointSet, b: EndpointSet, spec: KernelSpec) -> np.ndarray:
    """Dense product-kernel Gram block between two endpoint sets."""
    k1 = heat_kernel(a.p1[:, None, :], b.p1[None, :, :], spec,
                     a.hemi1[:, None], b.hemi1[None, :])
    k2 = heat_kernel(a.p2[:, None, :], b.p2[None, :, :], spec,
                     a.hemi2[:, None], b.hemi2[None, :])
    return k1 * k2


def _hemi_filter(pts: EndpointSet, subset) -> EndpointSet:
    if subset is None:
        return pts
    mask = (pts.hemi1 == subset) & (pts.hemi2 == subset)
    out = pts.subset(mask)
    if out.count == 0:
        raise EmptyAfterFilter(f"no pairs with both endpoints on hemisphere {subset}")
    return out


def mmd(pts1: EndpointSet, pts2: EndpointSet, spec: KernelSpec,
        subset=None, max_pairs: int | None = None, seed: int = 0) -> float:
    """Unbiased MMD between endpoint-pair distributions, clamped at zero.

    Uses the product heat kernel on the pair space.  ``subset`` keeps only
    pairs whose endpoints both lie on one hemisphere; ``max_pairs``
    subsamples each set (seeded) to bound the Gram computation.
    """
    a = _hemi_filter(pts1, subset)
    b = _hemi_filter(pts2, subset)
    rng = np.random.default_rng(seed)
    if max_pairs is not None:
        if a.count > max_pairs:
            a = a.subset(np.sort(rng.choice(a.count, max_pairs, replace=False)))
        if b.count > max_pairs:
            b = b.subset(np.sort(rng.choice(b.count, max_pairs, replace=False)))
    m, n = a.count, b.count
    if m < 2 or n < 2:
        raise EmptyAfterFilter("need at least two pairs per set for unbiased MMD")
    kaa = _pair_gram(a, a, spec)
    kbb = _pair_gram(b, b, spec)
    kab = _pair_gram(a, b, spec)
    term_a = (kaa.sum() - np.trace(kaa)) / (m * (m - 1))
    term_b = (kbb.sum() - np.trace(kbb)) / (n * (n - 1))
    mmd2 = term_a + term_b - 2.0 * kab.mean()
    return float(np.sqrt(max(mmd2, 0.0)))


def mmd_permutation_null(pts1: EndpointSet, pts2: EndpointSet, spec: KernelSpec,
                         n_permutations: int = 200, subset=None,
                         max_pairs: int | None = None, seed: int = 0):
    """Observed MMD plus its label-permutation null distribution.

    The pooled Gram matrix is computed once and re-indexed per permutation,
    so the test costs one Gram evaluation regardless of permutation count.
    """
    a = _hemi_filter(pts1, subset)
    b = _hemi_filter(pts2, subset)
    rng = np.random.default_rng(seed)
    if max_pairs is not None:
        if a.count > max_pairs:
            a = a.subset(np.sort(rng.choice(a.count, max_pairs, replace=False)))
        if b.count > max_pairs:
            b = b.subset(np.sort(rng.choice(b.count, max_pairs, replace=False)))
    m = a.count
    pooled = EndpointSet(np.concatenate([a.hemi1, b.hemi1]),
                         np.vstack([a.p1, b.p1]),
                         np.concatenate([a.hemi2, b.hemi2]),
                         np.vstack([a.p2, b.p2]))
    gram = _pair_gram(pooled, pooled, spec)
    total = pooled.count

    def stat(idx_a: np.ndarray) -> float:
        mask = np.zeros(total, dtype=bool)
        mask[idx_a] = True
        kaa = gram[np.ix_(mask, mask)]
        kbb = gram[np.ix_(~mask, ~mask)]
        kab = gram[np.ix_(mask, ~mask)]
        na, nb = mask.sum(), (~mask).sum()
        mmd2 = ((kaa.sum() - np.trace(kaa)) / (na * (na - 1))
                + (kbb.sum() - np.trace(kbb)) / (nb * (nb - 1))
                - 2.0 * kab.mean())
        return float(np.sqrt(max(mmd2, 0.0)))

    observed = stat(np.arange(m))
    null = np.array([stat(rng.permutation(total)[:m])
                     for _ in range(n_permutations)])
    return observed, null
