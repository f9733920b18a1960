import numpy as np
import pytest

from endpointalign.align import (AlignConfig, WarpIncrement, WarpSequence,
                                 apply_warp, register_encore,
                                 register_endpoints, run_multiresolution)
from endpointalign.basis import build_basis
from endpointalign.density import EndpointSet
from endpointalign.errors import ConfigError
from endpointalign.mesh import build_icosphere
from endpointalign.sim import (SimDensitySpec, SyntheticWarpSpec,
                               random_diffeomorphism, sample_ground_truth,
                               warp_error_metrics)
from endpointalign.sphere import geodesic_angle, normalize


@pytest.fixture(scope="module")
def instance():
    spec = SimDensitySpec()
    truth = random_diffeomorphism(SyntheticWarpSpec(
        basis_degree=3, amplitude=0.22, n_steps=6, seed=5))
    fixed = truth.apply_endpoints(sample_ground_truth(spec, 12000, seed=1))
    moving = sample_ground_truth(spec, 12000, seed=2)
    return fixed, moving, truth


SMALL_CFG = AlignConfig(sigma=0.02, step=0.1, tol=1e-6, max_iters=30,
                        grid_level=3, basis_degree=3)


class TestApplyWarp:
    def test_empty_sequence_identity(self, rng):
        pts = normalize(rng.normal(size=(50, 3)))
        hemis = rng.integers(1, 3, size=50).astype(np.int8)
        out = apply_warp(WarpSequence(), pts, hemis)
        assert np.array_equal(out, pts)

    def test_zero_coefficients_identity(self, rng):
        basis = build_basis(3)
        seq = WarpSequence([WarpIncrement(0.1, 3, np.zeros(basis.size),
                                          np.zeros(basis.size))])
        pts = normalize(rng.normal(size=(50, 3)))
        hemis = np.ones(50, dtype=np.int8)
        assert np.array_equal(apply_warp(seq, pts, hemis), pts)

    def test_rotational_increment_on_equator_is_rotation(self):
        # a single exp-map step along the axial l=1 rotational field moves
        # equatorial points exactly along the equator (their geodesic)
        basis = build_basis(1)
        idx = next(i for i, f in enumerate(basis.fields)
                   if f.kind == "rotational" and (f.degree, f.order) == (1, 0))
        coeffs = np.zeros(basis.size)
        coeffs[idx] = 1.0
        seq = WarpSequence([WarpIncrement(0.2, 1, coeffs, coeffs)])
        phi = np.linspace(0, 2 * np.pi, 17)[:-1]
        pts = np.stack([np.cos(phi), np.sin(phi), np.zeros_like(phi)], axis=1)
        out = seq.apply(pts, np.ones(len(pts), dtype=np.int8))
        # field = c * (p x z_hat) on the equator: rotation by -0.2 c about z
        c = -np.sqrt(3.0 / (8.0 * np.pi))
        ang = 0.2 * c
        rot = np.array([[np.cos(ang), -np.sin(ang), 0],
                        [np.sin(ang), np.cos(ang), 0], [0, 0, 1.0]])
        assert np.abs(out - pts @ rot.T).max() <= 1e-9

    def test_rotational_increment_small_step_near_rotation(self, rng):
        # off the equator a single retraction step matches the rotation flow
        # to second order in the step
        basis = build_basis(1)
        idx = next(i for i, f in enumerate(basis.fields)
                   if f.kind == "rotational" and (f.degree, f.order) == (1, 0))
        coeffs = np.zeros(basis.size)
        coeffs[idx] = 1.0
        step = 1e-4
        seq = WarpSequence([WarpIncrement(step, 1, coeffs, coeffs)])
        pts = normalize(rng.normal(size=(40, 3)))
        out = seq.apply(pts, np.ones(40, dtype=np.int8))
        c = -np.sqrt(3.0 / (8.0 * np.pi))
        ang = step * c
        rot = np.array([[np.cos(ang), -np.sin(ang), 0],
                        [np.sin(ang), np.cos(ang), 0], [0, 0, 1.0]])
        assert np.abs(out - pts @ rot.T).max() <= 1e-8

    def test_hemisphere_tags_unchanged(self, instance):
        fixed, moving, truth = instance
        warped = apply_warp(truth, moving)
        assert np.array_equal(warped.hemi1, moving.hemi1)
        assert np.array_equal(warped.hemi2, moving.hemi2)


class TestRegisterEndpoints:
    def test_identity_converges_immediately(self, instance):
        fixed, _, _ = instance
        res = register_endpoints(fixed, fixed.copy(), SMALL_CFG)
        assert res.converged
        assert res.iterations == 0
        disp = geodesic_angle(res.aligned.p1, fixed.p1)
        assert np.degrees(disp.mean()) < 0.5

    def test_fixed_set_untouched(self, instance):
        fixed, moving, _ = instance
        snapshot = (fixed.p1.copy(), fixed.p2.copy())
        register_endpoints(fixed, moving, SMALL_CFG)
        assert np.array_equal(fixed.p1, snapshot[0])
        assert np.array_equal(fixed.p2, snapshot[1])

    def test_recovers_synthetic_warp(self, instance):
        fixed, moving, truth = instance
        mesh = build_icosphere(3)
        res = register_endpoints(fixed, moving, SMALL_CFG)
        before = warp_error_metrics(truth, WarpSequence(), mesh).mean_angular_deg
        after = warp_error_metrics(truth, res.warp, mesh).mean_angular_deg
        assert after < 0.8 * before
        assert res.orientation_ok

    def test_energy_median_trend_non_increasing(self, instance):
        fixed, moving, _ = instance
        res = register_endpoints(fixed, moving, SMALL_CFG)
        e = res.energy_trace
        medians = np.array([np.median(e[i: i + 10])
                            for i in range(len(e) - 9)])
        assert (np.diff(medians) <= 1e-10 * e[0]).all()

    def test_warp_replay_reproduces_alignment(self, instance):
        fixed, moving, _ = instance
        res = register_endpoints(fixed, moving, SMALL_CFG)
        replay = apply_warp(res.warp, moving)
        assert np.linalg.norm(replay.p1 - res.aligned.p1, axis=1).max() <= 1e-9
        assert np.linalg.norm(replay.p2 - res.aligned.p2, axis=1).max() <= 1e-9

    def test_trace_shapes(self, instance):
        fixed, moving, _ = instance
        res = register_endpoints(fixed, moving, SMALL_CFG)
        assert res.iterations <= SMALL_CFG.max_iters
        assert res.gradient_norm_trace.shape[1] == 2
        assert np.isfinite(res.energy_trace).all()

    def test_kde_every_accelerates_consistently(self, instance):
        fixed, moving, truth = instance
        mesh = build_icosphere(3)
        cfg = AlignConfig(sigma=0.02, step=0.1, tol=1e-6, max_iters=24,
                          grid_level=3, basis_degree=3, kde_every=3)
        res = register_endpoints(fixed, moving, cfg)
        after = warp_error_metrics(truth, res.warp, mesh).mean_angular_deg
        before = warp_error_metrics(truth, WarpSequence(), mesh).mean_angular_deg
        assert after < before  # still descends with interleaved grid warps
        assert res.orientation_ok


class TestRegisterEncore:
    def test_identity_near_convergence(self, instance):
        fixed, _, _ = instance
        res = register_encore(fixed, fixed.copy(), SMALL_CFG)
        assert res.iterations == 0 and res.converged

    def test_energy_non_increasing_early(self, instance):
        fixed, moving, _ = instance
        cfg = AlignConfig(sigma=0.02, step=0.01, tol=1e-9, max_iters=10,
                          grid_level=3, basis_degree=3)
        res = register_encore(fixed, moving, cfg)
        assert (np.diff(res.energy_trace[:11]) <= 1e-12).all()

    def test_reduces_warp_error(self, instance):
        fixed, moving, truth = instance
        mesh = build_icosphere(3)
        res = register_encore(fixed, moving, SMALL_CFG)
        before = warp_error_metrics(truth, WarpSequence(), mesh).mean_angular_deg
        after = warp_error_metrics(truth, res.warp, mesh).mean_angular_deg
        assert after < before
        assert res.orientation_ok


class TestMultiresolution:
    def test_single_stage_matches_register(self, instance):
        fixed, moving, _ = instance
        cfg = AlignConfig(sigma=0.02, step=0.1, tol=1e-6, max_iters=10,
                          grid_level=3, basis_degree=3,
                          multires_schedule=[(3, 0.02)])
        multi = run_multiresolution(fixed, moving, cfg)
        single = register_endpoints(fixed, moving, AlignConfig(
            sigma=0.02, step=0.1, tol=1e-6, max_iters=10, grid_level=3,
            basis_degree=3))
        assert np.array_equal(multi.aligned.p1, single.aligned.p1)
        assert multi.iterations == single.iterations

    def test_empty_schedule_rejected(self, instance):
        fixed, moving, _ = instance
        cfg = AlignConfig(multires_schedule=[])
        with pytest.raises(ConfigError):
            run_multiresolution(fixed, moving, cfg)

    def test_decreasing_levels_rejected(self, instance):
        fixed, moving, _ = instance
        cfg = AlignConfig(multires_schedule=[(4, 0.01), (3, 0.02)])
        with pytest.raises(ConfigError):
            run_multiresolution(fixed, moving, cfg)

    def test_two_stage_schedule(self, instance):
        fixed, moving, truth = instance
        mesh = build_icosphere(3)
        cfg = AlignConfig(step=0.1, tol=1e-6, max_iters=12, basis_degree=3,
                          multires_schedule=[(2, 0.04), (3, 0.02)])
        res = run_multiresolution(fixed, moving, cfg)
        assert res.iterations <= 24
        before = warp_error_metrics(truth, WarpSequence(), mesh).mean_angular_deg
        after = warp_error_metrics(truth, res.warp, mesh).mean_angular_deg
        assert after < before
        replay = apply_warp(res.warp, moving)
        assert np.linalg.norm(replay.p1 - res.aligned.p1, axis=1).max() <= 1e-9


def test_config_validation():
    with pytest.raises(ConfigError):
        AlignConfig(sigma=-1.0).validate()
    with pytest.raises(ConfigError):
        AlignConfig(step=0.0).validate()
    with pytest.raises(ConfigError):
        AlignConfig(grid_level=9).validate()
    with pytest.raises(ConfigError):
        AlignConfig(kde_every=0).validate()
