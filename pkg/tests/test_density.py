import numpy as np
import pytest

from endpointalign.density import (DensityEngine, EndpointSet, estimate_density,
                                   grid_points, grid_weights, lcv_score,
                                   lcv_sweep, q_gradients, q_transform)
from endpointalign.errors import EmptyEndpointSet
from endpointalign.kernel import KernelSpec, heat_kernel
from endpointalign.mesh import build_icosphere, vertex_weights
from endpointalign.sim import SimDensitySpec, sample_ground_truth
from endpointalign.sphere import exp_map, normalize, tangent_frame


def naive_kde(pts, mesh, spec, pairs):
    """Brute-force symmetrized KDE at selected grid-vertex pairs."""
    gxyz, ghemi = grid_points(mesh)
    out = []
    for a, b in pairs:
        k1a = heat_kernel(gxyz[a], pts.p1, spec, ghemi[a], pts.hemi1)
        k2b = heat_kernel(gxyz[b], pts.p2, spec, ghemi[b], pts.hemi2)
        k1b = heat_kernel(gxyz[b], pts.p1, spec, ghemi[b], pts.hemi1)
        k2a = heat_kernel(gxyz[a], pts.p2, spec, ghemi[a], pts.hemi2)
        f_ab = float(np.sum(k1a * k2b)) / pts.count
        f_ba = float(np.sum(k1b * k2a)) / pts.count
        out.append(0.5 * (f_ab + f_ba))
    return np.array(out)


@pytest.fixture(scope="module")
def small_sample():
    return sample_ground_truth(SimDensitySpec(), 2000, seed=11)


class TestEstimateDensity:
    def test_empty_raises(self):
        mesh = build_icosphere(2)
        empty = EndpointSet(np.empty(0, np.int8), np.empty((0, 3)),
                            np.empty(0, np.int8), np.empty((0, 3)))
        with pytest.raises(EmptyEndpointSet):
            estimate_density(empty, mesh, KernelSpec.for_bandwidth(0.1))

    def test_single_pair_peak_location(self):
        mesh = build_icosphere(3)
        x0 = normalize(np.array([0.3, 0.4, 0.9]))
        pts = EndpointSet(np.array([1], np.int8), x0[None, :],
                          np.array([1], np.int8), x0[None, :])
        f = estimate_density(pts, mesh, KernelSpec.for_bandwidth(0.05))
        vals = f.values
        a, b = np.unravel_index(np.argmax(vals), vals.shape)
        best = np.argmax(mesh.vertices @ x0)
        assert a == best and b == best

    def test_symmetry_exact(self, small_sample):
        mesh = build_icosphere(2)
        f = estimate_density(small_sample, mesh, KernelSpec.for_bandwidth(0.05))
        vals = f.values
        assert np.array_equal(vals, vals.T)

    def test_matches_naive_kde(self, small_sample, rng):
        mesh = build_icosphere(2)
        spec = KernelSpec.for_bandwidth(0.05, value_cutoff=0.0)
        f = estimate_density(small_sample, mesh, spec)
        n = f.n
        pairs = [(int(a), int(b)) for a, b in
                 rng.integers(0, n, size=(20, 2))]
        oracle = naive_kde(small_sample, mesh, spec, pairs)
        got = np.array([f.value_at(a, b) for a, b in pairs])
        assert np.abs(got - oracle).max() <= 1e-10

    def test_quadrature_mass(self, small_sample):
        mesh = build_icosphere(3)
        f = estimate_density(small_sample, mesh, KernelSpec.for_bandwidth(0.05))
        w = grid_weights(mesh)
        mass = float(w @ f.values @ w)
        assert abs(mass - 1.0) <= 0.02

    def test_duplication_invariance(self, small_sample):
        mesh = build_icosphere(2)
        spec = KernelSpec.for_bandwidth(0.05)
        doubled = EndpointSet(np.tile(small_sample.hemi1, 2),
                              np.tile(small_sample.p1, (2, 1)),
                              np.tile(small_sample.hemi2, 2),
                              np.tile(small_sample.p2, (2, 1)))
        f1 = estimate_density(small_sample, mesh, spec)
        f2 = estimate_density(doubled, mesh, spec)
        assert np.abs(f1.packed - f2.packed).max() <= 1e-14

    def test_block_structure(self):
        mesh = build_icosphere(2)
        v = mesh.num_vertices
        # only cross pairs: within-hemisphere blocks must vanish
        rng = np.random.default_rng(0)
        n = 500
        p1 = normalize(rng.normal(size=(n, 3)))
        p2 = normalize(rng.normal(size=(n, 3)))
        pts = EndpointSet(np.ones(n, np.int8), p1,
                          np.full(n, 2, np.int8), p2)
        f = estimate_density(pts, mesh, KernelSpec.for_bandwidth(0.1))
        vals = f.values
        assert np.abs(vals[:v, :v]).max() == 0.0
        assert np.abs(vals[v:, v:]).max() == 0.0
        assert vals[:v, v:].max() > 0

    def test_determinism(self, small_sample):
        mesh = build_icosphere(2)
        spec = KernelSpec.for_bandwidth(0.03)
        a = estimate_density(small_sample, mesh, spec)
        b = estimate_density(small_sample, mesh, spec)
        assert np.array_equal(a.packed, b.packed)

    def test_permuted_engine_matches_canonical(self, small_sample):
        mesh = build_icosphere(2)
        spec = KernelSpec.for_bandwidth(0.05)
        plain = DensityEngine(small_sample, mesh, spec, permute=False)
        perm = DensityEngine(small_sample, mesh, spec, permute=True)
        v = mesh.num_vertices
        ext = np.concatenate([perm.tau, v + perm.tau])
        fp = perm.density_full()
        fc = plain.density_full()
        assert np.allclose(fp, fc[np.ix_(ext, ext)], atol=1e-14)


class TestQTransform:
    def test_pointwise_sqrt(self, small_sample):
        mesh = build_icosphere(2)
        f = estimate_density(small_sample, mesh, KernelSpec.for_bandwidth(0.05))
        q = q_transform(f)
        assert np.abs(q.packed ** 2 - f.packed).max() <= 1e-12
        assert q.packed.min() >= 0

    def test_constant_grid(self):
        mesh = build_icosphere(1)
        from endpointalign.density import DensityGrid, packed_size

        c = 0.37
        f = DensityGrid(mesh, np.full(packed_size(2 * mesh.num_vertices), c))
        q = q_transform(f)
        assert np.allclose(q.packed, np.sqrt(c))

    def test_norm_equals_mass(self, small_sample):
        mesh = build_icosphere(2)
        f = estimate_density(small_sample, mesh, KernelSpec.for_bandwidth(0.05))
        q = q_transform(f)
        w = grid_weights(mesh)
        qv = q.values
        assert abs(float(w @ (qv * qv) @ w)
                   - float(w @ f.values @ w)) <= 1e-12


class TestQGradients:
    def test_tangency_and_shape(self, small_sample):
        mesh = build_icosphere(2)
        spec = KernelSpec.for_bandwidth(0.05)
        f = estimate_density(small_sample, mesh, spec)
        q = q_gradients(small_sample, f, mesh, spec)
        gxyz, _ = grid_points(mesh)
        dots = np.einsum("cab,ac->ab", q.dqx, gxyz)
        assert np.abs(dots).max() <= 1e-12

    def test_flat_density_zero_gradient(self, small_sample):
        mesh = build_icosphere(2)
        spec = KernelSpec.for_bandwidth(50.0)  # huge bandwidth: constant KDE
        f = estimate_density(small_sample, mesh, spec)
        q = q_gradients(small_sample, f, mesh, spec)
        scale = np.abs(q.values).max()
        assert np.abs(q.dqx).max() <= 1e-6 * scale

    def test_matches_grid_finite_differences(self, small_sample):
        # compare dq/dx against central differences of freshly estimated q
        # at perturbed first-argument grid positions
        mesh = build_icosphere(2)
        spec = KernelSpec.for_bandwidth(0.08, value_cutoff=0.0)
        f = estimate_density(small_sample, mesh, spec)
        q = q_gradients(small_sample, f, mesh, spec)
        gxyz, ghemi = grid_points(mesh)
        fmax = f.packed.max()
        rng = np.random.default_rng(5)
        h = 1e-5
        checked = 0
        for _ in range(40):
            a = int(rng.integers(0, 2 * mesh.num_vertices))
            b = int(rng.integers(0, 2 * mesh.num_vertices))
            if f.value_at(a, b) < 1e-3 * fmax:
                continue
            e1, _ = tangent_frame(gxyz[a][None])
            d = e1[0]
            vals = []
            for sgn in (1, -1):
                xa = exp_map(gxyz[a], sgn * h * d)
                k1 = heat_kernel(xa, small_sample.p1, spec, ghemi[a],
                                 small_sample.hemi1)
                k2 = heat_kernel(gxyz[b], small_sample.p2, spec, ghemi[b],
                                 small_sample.hemi2)
                k1r = heat_kernel(xa, small_sample.p2, spec, ghemi[a],
                                  small_sample.hemi2)
                k2r = heat_kernel(gxyz[b], small_sample.p1, spec, ghemi[b],
                                  small_sample.hemi1)
                fv = 0.5 * (np.sum(k1 * k2) + np.sum(k1r * k2r)) / small_sample.count
                vals.append(np.sqrt(fv))
            fd = (vals[0] - vals[1]) / (2 * h)
            an = float(q.dqx[:, a, b] @ d)
            assert abs(fd - an) / max(abs(fd), 1e-9) <= 1e-3
            checked += 1
        assert checked >= 10


class TestLCV:
    def test_two_identical_pairs(self):
        p = normalize(np.array([0.1, 0.2, 0.975]))
        pts = EndpointSet(np.array([1, 1], np.int8), np.vstack([p, p]),
                          np.array([1, 1], np.int8), np.vstack([p, p]))
        for sigma in (0.5, 0.1):
            spec = KernelSpec.for_bandwidth(sigma, value_cutoff=0.0)
            peak = heat_kernel(p, p, spec)
            assert np.isclose(lcv_score(pts, sigma), np.log(peak ** 2))
        # increases as sigma shrinks
        assert lcv_score(pts, 0.05) > lcv_score(pts, 0.5)

    def test_matches_naive_double_loop(self):
        pts = sample_ground_truth(SimDensitySpec(), 200, seed=3)
        sigma = 0.1
        spec = KernelSpec.for_bandwidth(sigma, value_cutoff=0.0)
        n = pts.count
        loo = np.empty(n)
        for j in range(n):
            total = 0.0
            for i in range(n):
                if i == j:
                    continue
                total += (heat_kernel(pts.p1[j], pts.p1[i], spec,
                                      pts.hemi1[j], pts.hemi1[i])
                          * heat_kernel(pts.p2[j], pts.p2[i], spec,
                                        pts.hemi2[j], pts.hemi2[i]))
            loo[j] = total / (n - 1)
        oracle = float(np.mean(np.log(loo)))
        assert abs(lcv_score(pts, sigma) - oracle) <= 1e-10

    def test_sweep_matches_single_scores(self):
        pts = sample_ground_truth(SimDensitySpec(), 150, seed=9)
        sigmas = [0.02, 0.05, 0.2]
        sweep = lcv_sweep(pts, sigmas)
        singles = np.array([lcv_score(pts, s) for s in sigmas])
        assert np.allclose(sweep, singles, atol=1e-12)

    def test_degenerate_returns_minus_inf(self):
        # far-apart pairs with a tiny cutoff kernel: leave-one-out is zero
        p = np.eye(3)
        pts = EndpointSet(np.ones(3, np.int8), p, np.ones(3, np.int8), p)
        score = lcv_score(pts, 0.001, value_cutoff=1e-4)
        assert score == float("-inf")
