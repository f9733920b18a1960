import json

import numpy as np
import pytest

from endpointalign.align import WarpIncrement, WarpSequence
from endpointalign.cli import main
from endpointalign.density import EndpointSet
from endpointalign.errors import (ConfigError, NormError, ParseError,
                                  SchemaVersionError)
from endpointalign.io import (load_config, load_endpoints, load_warp,
                              save_endpoints, save_warp)
from endpointalign.sim import (SimDensitySpec, SyntheticWarpSpec,
                               random_diffeomorphism, sample_ground_truth)
from endpointalign.sphere import normalize


class TestEndpointCSV:
    def test_round_trip(self, tmp_path):
        pts = sample_ground_truth(SimDensitySpec(), 50, seed=1)
        path = tmp_path / "pts.csv"
        save_endpoints(path, pts)
        back = load_endpoints(path)
        assert back.count == 50
        assert np.array_equal(back.p1, pts.p1)
        assert np.array_equal(back.hemi2, pts.hemi2)

    def test_well_formed_three_rows(self, tmp_path):
        path = tmp_path / "three.csv"
        path.write_text(
            "id,hemi1,x1,y1,z1,hemi2,x2,y2,z2\n"
            "0,1,1,0,0,2,0,1,0\n"
            "1,1,0,0,1,1,0,0,1\n"
            "2,2,0,1,0,2,1,0,0\n")
        pts = load_endpoints(path)
        assert pts.count == 3

    def test_bad_hemisphere_names_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("id,hemi1,x1,y1,z1,hemi2,x2,y2,z2\n"
                        "0,1,1,0,0,2,0,1,0\n"
                        "1,3,1,0,0,2,0,1,0\n")
        with pytest.raises(ParseError, match=":3"):
            load_endpoints(path)

    def test_small_norm_deviation_renormalized(self, tmp_path):
        path = tmp_path / "near.csv"
        path.write_text("id,hemi1,x1,y1,z1,hemi2,x2,y2,z2\n"
                        f"0,1,1.0005,0,0,2,0,1,0\n")
        pts = load_endpoints(path)
        assert np.isclose(np.linalg.norm(pts.p1[0]), 1.0)

    def test_large_norm_deviation_rejected(self, tmp_path):
        path = tmp_path / "far.csv"
        path.write_text("id,hemi1,x1,y1,z1,hemi2,x2,y2,z2\n"
                        "0,1,1.01,0,0,2,0,1,0\n")
        with pytest.raises(NormError):
            load_endpoints(path)

    def test_labels_preserved(self, tmp_path):
        pts = sample_ground_truth(SimDensitySpec(), 10, seed=2)
        pts.labels = np.array([f"bundle{i % 3}" for i in range(10)])
        path = tmp_path / "lab.csv"
        save_endpoints(path, pts)
        back = load_endpoints(path)
        assert list(back.labels) == list(pts.labels)


class TestWarpFiles:
    def test_identity_round_trip(self, tmp_path):
        path = tmp_path / "id.warp"
        save_warp(path, WarpSequence())
        assert len(load_warp(path)) == 0

    def test_long_sequence_round_trip(self, tmp_path, rng):
        from endpointalign.basis import build_basis

        basis = build_basis(4)
        seq = WarpSequence([
            WarpIncrement(0.05 * (1 + i % 3), 4,
                          rng.normal(size=basis.size),
                          rng.normal(size=basis.size))
            for i in range(60)])
        path = tmp_path / "seq.warp"
        save_warp(path, seq)
        back = load_warp(path)
        pts = normalize(rng.normal(size=(100, 3)))
        hemis = rng.integers(1, 3, size=100).astype(np.int8)
        a = seq.apply(pts, hemis)
        b = back.apply(pts, hemis)
        assert np.abs(a - b).max() <= 1e-12

    def test_truncated_file_rejected(self, tmp_path, rng):
        from endpointalign.basis import build_basis

        basis = build_basis(2)
        seq = WarpSequence([WarpIncrement(0.1, 2, rng.normal(size=basis.size),
                                          rng.normal(size=basis.size))
                            for _ in range(3)])
        path = tmp_path / "trunc.warp"
        save_warp(path, seq)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-3]))
        with pytest.raises((ParseError, SchemaVersionError)):
            load_warp(path)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "v9.warp"
        path.write_text("endpointalign-warp 9\nincrements 0\n")
        with pytest.raises(SchemaVersionError):
            load_warp(path)

    def test_garbage_rejected(self, tmp_path):
        path = tmp_path / "noise.txt"
        path.write_text("hello world\n")
        with pytest.raises(SchemaVersionError):
            load_warp(path)


class TestConfigFiles:
    def test_keys_and_overrides(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("sigma = 0.01\ndelta = 0.2\nepsilon = 1e-5\n"
                        "max_iters = 7\ngrid_level = 2\nbasis_degree = 3\n"
                        "kde_every = 2\nseed = 11\ndeterministic = true\n")
        cfg = load_config(path)
        assert cfg.sigma == 0.01 and cfg.step == 0.2 and cfg.tol == 1e-5
        assert cfg.max_iters == 7 and cfg.grid_level == 2
        assert cfg.kde_every == 2 and cfg.seed == 11 and cfg.deterministic

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("sigma = 0.01\nnot_a_key = 5\n")
        with pytest.raises(ConfigError):
            load_config(path)


@pytest.fixture()
def sim_files(tmp_path):
    fixed = tmp_path / "fixed.csv"
    moving = tmp_path / "moving.csv"
    assert main(["simulate", "--n", "3000", "--seed", "1",
                 "--warp-amplitude", "0.15", "--out", str(fixed)]) == 0
    assert main(["simulate", "--n", "3000", "--seed", "2",
                 "--out", str(moving)]) == 0
    return fixed, moving


class TestCLI:
    def test_mesh_command(self, tmp_path):
        assert main(["mesh", "--level", "2", "--out-dir", str(tmp_path)]) == 0
        verts = (tmp_path / "icosphere2_vertices.csv").read_text().splitlines()
        faces = (tmp_path / "icosphere2_faces.csv").read_text().splitlines()
        assert verts[0] == "index,x,y,z"
        assert faces[0] == "index,v0,v1,v2"
        assert len(verts) == 163 and len(faces) == 321

    def test_register_identity_and_manifest(self, tmp_path, sim_files):
        fixed, _ = sim_files
        prefix = tmp_path / "run"
        code = main(["register", "--fixed", str(fixed), "--moving", str(fixed),
                     "--out-prefix", str(prefix), "--sigma", "0.05",
                     "--grid-level", "2", "--basis-degree", "2",
                     "--max-iters", "5", "--emit-plots"])
        assert code == 0
        manifest = json.loads(prefix.with_suffix(".manifest.json").read_text())
        assert manifest["convergence"]["converged"] is True
        warp = load_warp(prefix.with_suffix(".warp.txt"))
        assert len(warp) == 0  # identity fit stops before any increment
        assert prefix.with_suffix(".trace.csv").exists()

    def test_register_deterministic_outputs(self, tmp_path, sim_files):
        fixed, moving = sim_files
        outs = []
        for name in ("a", "b"):
            prefix = tmp_path / name
            assert main(["register", "--fixed", str(fixed), "--moving",
                         str(moving), "--out-prefix", str(prefix), "--sigma",
                         "0.05", "--grid-level", "2", "--basis-degree", "2",
                         "--max-iters", "4"]) == 0
            outs.append((prefix.with_suffix(".aligned.csv").read_bytes(),
                         prefix.with_suffix(".warp.txt").read_bytes()))
        assert outs[0] == outs[1]

    def test_register_encore_smoke(self, tmp_path, sim_files):
        fixed, moving = sim_files
        prefix = tmp_path / "enc"
        assert main(["register-encore", "--fixed", str(fixed), "--moving",
                     str(moving), "--out-prefix", str(prefix), "--sigma",
                     "0.05", "--grid-level", "2", "--basis-degree", "2",
                     "--max-iters", "4"]) == 0
        assert prefix.with_suffix(".warp.txt").exists()

    def test_evaluate_self_overlap(self, tmp_path, sim_files):
        fixed, _ = sim_files
        out = tmp_path / "metrics.csv"
        assert main(["evaluate", "--endpoints1", str(fixed), "--endpoints2",
                     str(fixed), "--metric", "overlap", "--tau", "0",
                     "--grid-level", "2", "--out", str(out)]) == 0
        rows = out.read_text().splitlines()
        metric, tau, value = rows[1].split(",")[:3]
        assert metric == "overlap" and float(value) == 1.0

    def test_select_bandwidth_lcv(self, tmp_path, sim_files):
        fixed, _ = sim_files
        out = tmp_path / "sweep.json"
        assert main(["select-bandwidth", "--endpoints", str(fixed),
                     "--method", "lcv", "--sigmas", "0.005", "0.02", "0.1",
                     "--out", str(out)]) == 0
        result = json.loads(out.read_text())
        assert result["best_sigma"] in (0.005, 0.02, 0.1)
        assert len(result["rows"]) == 3

    def test_missing_file_is_machine_readable_error(self, tmp_path, capsys):
        code = main(["register", "--fixed", str(tmp_path / "nope.csv"),
                     "--moving", str(tmp_path / "nope.csv"),
                     "--out-prefix", str(tmp_path / "x")])
        assert code != 0
