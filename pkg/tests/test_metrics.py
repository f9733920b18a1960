import numpy as np
import pytest

from endpointalign.density import EndpointSet
from endpointalign.errors import EmptyAfterFilter, MeshMismatch
from endpointalign.kernel import KernelSpec
from endpointalign.mesh import build_icosphere, locate_face
from endpointalign.metrics import (ConnectivityCounts, bin_endpoints, mmd,
                                   mmd_permutation_null, overlap_coefficient)
from endpointalign.sim import (SimDensitySpec, SyntheticWarpSpec,
                               random_diffeomorphism, sample_ground_truth)
from endpointalign.sphere import normalize


class TestBinning:
    def test_single_pair(self):
        mesh = build_icosphere(2)
        p = normalize(np.array([[0.2, 0.3, 0.93]]))
        pts = EndpointSet(np.array([1], np.int8), p, np.array([2], np.int8), p)
        c = bin_endpoints(pts, mesh)
        assert c.n == 1
        assert sum(c.counts.values()) == 1
        ((a, b),) = c.counts.keys()
        assert a <= b

    def test_same_triangle_diagonal(self):
        mesh = build_icosphere(2)
        cent = normalize(mesh.vertices[mesh.faces[37]].mean(axis=0))[None]
        pts = EndpointSet(np.array([1], np.int8), cent,
                          np.array([1], np.int8), cent)
        c = bin_endpoints(pts, mesh)
        assert c.counts == {(37, 37): 1}

    def test_matches_brute_force(self, rng):
        mesh = build_icosphere(2)
        pts = sample_ground_truth(SimDensitySpec(), 1000, seed=4)
        c = bin_endpoints(pts, mesh)
        k = mesh.num_faces
        f1 = np.array([int(locate_face(mesh, p)) for p in pts.p1])
        f2 = np.array([int(locate_face(mesh, p)) for p in pts.p2])
        f1 += (pts.hemi1.astype(int) - 1) * k
        f2 += (pts.hemi2.astype(int) - 1) * k
        oracle: dict = {}
        for a, b in zip(np.minimum(f1, f2), np.maximum(f1, f2)):
            oracle[(int(a), int(b))] = oracle.get((int(a), int(b)), 0) + 1
        assert c.counts == oracle
        assert sum(c.counts.values()) == 1000


class TestOverlap:
    def test_hand_example(self):
        mesh = build_icosphere(0)
        c1 = ConnectivityCounts(mesh, {(0, 0): 3, (0, 1): 1}, 4)
        c2 = ConnectivityCounts(mesh, {(0, 0): 2, (1, 1): 2}, 4)
        rep = overlap_coefficient(c1, c2, 0.3)
        assert rep.overlap == 1.0
        assert rep.suprathreshold_sizes == (1, 2)

    def test_self_overlap(self):
        pts = sample_ground_truth(SimDensitySpec(), 500, seed=1)
        mesh = build_icosphere(2)
        c = bin_endpoints(pts, mesh)
        assert overlap_coefficient(c, c, 0.0).overlap == 1.0

    def test_disjoint_supports(self):
        mesh = build_icosphere(0)
        c1 = ConnectivityCounts(mesh, {(0, 0): 5}, 5)
        c2 = ConnectivityCounts(mesh, {(1, 2): 5}, 5)
        assert overlap_coefficient(c1, c2, 0.0).overlap == 0.0

    def test_symmetry(self):
        a = sample_ground_truth(SimDensitySpec(), 800, seed=2)
        b = sample_ground_truth(SimDensitySpec(), 600, seed=3)
        mesh = build_icosphere(2)
        ca, cb = bin_endpoints(a, mesh), bin_endpoints(b, mesh)
        for tau in (0.0, 0.001, 0.01):
            assert (overlap_coefficient(ca, cb, tau).overlap
                    == overlap_coefficient(cb, ca, tau).overlap)

    def test_monotone_suprathreshold_sizes(self):
        pts = sample_ground_truth(SimDensitySpec(), 2000, seed=5)
        mesh = build_icosphere(2)
        c = bin_endpoints(pts, mesh)
        sizes = [overlap_coefficient(c, c, tau).suprathreshold_sizes[0]
                 for tau in (0.0, 1e-4, 1e-3, 1e-2)]
        assert sizes == sorted(sizes, reverse=True)

    def test_degenerate_flag(self):
        mesh = build_icosphere(0)
        c1 = ConnectivityCounts(mesh, {(0, 0): 1}, 1)
        rep = overlap_coefficient(c1, c1, 2.0)
        assert rep.overlap == 0.0 and rep.degenerate

    def test_mesh_mismatch(self):
        c1 = ConnectivityCounts(build_icosphere(1), {(0, 0): 1}, 1)
        c2 = ConnectivityCounts(build_icosphere(2), {(0, 0): 1}, 1)
        with pytest.raises(MeshMismatch):
            overlap_coefficient(c1, c2, 0.0)


class TestMMD:
    spec = KernelSpec.for_bandwidth(0.2)

    def test_identical_sets_near_zero(self):
        pts = sample_ground_truth(SimDensitySpec(), 400, seed=6)
        from endpointalign.kernel import peak_value

        value = mmd(pts, pts, self.spec)
        assert value <= 1e-8 * peak_value(self.spec) ** 2

    def test_symmetry(self):
        a = sample_ground_truth(SimDensitySpec(), 300, seed=7)
        b = sample_ground_truth(SimDensitySpec(), 350, seed=8)
        assert mmd(a, b, self.spec) == mmd(b, a, self.spec)

    def test_warp_increases_mmd(self):
        a = sample_ground_truth(SimDensitySpec(), 600, seed=9)
        b = sample_ground_truth(SimDensitySpec(), 600, seed=10)
        warp = random_diffeomorphism(SyntheticWarpSpec(
            basis_degree=3, amplitude=0.3, n_steps=4, seed=11))
        warped = warp.apply_endpoints(b)
        assert mmd(a, warped, self.spec) > mmd(a, b, self.spec)

    def test_hemisphere_filter(self):
        pts = sample_ground_truth(SimDensitySpec(), 500, seed=12)
        left = mmd(pts, pts, self.spec, subset=1)
        assert left >= 0.0
        only_cross = pts.subset(pts.hemi1 != pts.hemi2)
        with pytest.raises(EmptyAfterFilter):
            mmd(only_cross, only_cross, self.spec, subset=1)

    def test_same_distribution_passes_permutation_null(self):
        a = sample_ground_truth(SimDensitySpec(), 10_000, seed=13)
        b = sample_ground_truth(SimDensitySpec(), 10_000, seed=14)
        observed, null = mmd_permutation_null(a, b, self.spec,
                                              n_permutations=200,
                                              max_pairs=800, seed=0)
        assert observed <= np.quantile(null, 0.95)

    def test_different_distribution_fails_permutation_null(self):
        a = sample_ground_truth(SimDensitySpec(), 4000, seed=15)
        warp = random_diffeomorphism(SyntheticWarpSpec(
            basis_degree=3, amplitude=0.35, n_steps=4, seed=16))
        b = warp.apply_endpoints(sample_ground_truth(SimDensitySpec(), 4000,
                                                     seed=17))
        observed, null = mmd_permutation_null(a, b, self.spec,
                                              n_permutations=100,
                                              max_pairs=600, seed=0)
        assert observed > null.max()
