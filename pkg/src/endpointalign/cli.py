"""Command-line surface tying the pipeline together.

Subcommands: mesh, simulate, register, register-encore, evaluate,
select-bandwidth.  Every run writes its outputs plus one JSON manifest;
failures exit nonzero after writing a machine-readable error record.
"""

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .align import (AlignConfig, register_encore, register_endpoints,
                    run_multiresolution)
from .density import lcv_sweep
from .errors import EndpointAlignError
from .io import (config_dict, load_config, load_endpoints, load_warp,
                 save_endpoints, save_warp, write_manifest)
from .kernel import KernelSpec
from .mesh import build_icosphere, vertex_weights
from .metrics import bin_endpoints, mmd, overlap_coefficient
from .sim import (SimDensitySpec, SyntheticWarpSpec, random_diffeomorphism,
                  sample_ground_truth)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="flat key=value config file")
    p.add_argument("--sigma", type=float, help="KDE bandwidth")
    p.add_argument("--delta", type=float, help="gradient step size")
    p.add_argument("--epsilon", type=float, help="gradient-norm stopping tolerance")
    p.add_argument("--max-iters", type=int)
    p.add_argument("--grid-level", type=int)
    p.add_argument("--basis-degree", type=int)
    p.add_argument("--kde-every", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--kernel-cutoff", type=float)
    p.add_argument("--workers", type=int, help="thread count for kernel contractions")


def _resolve_config(args) -> AlignConfig:
    cfg = load_config(args.config) if args.config else AlignConfig()
    overrides = {"sigma": "sigma", "delta": "step", "epsilon": "tol",
                 "max_iters": "max_iters", "grid_level": "grid_level",
                 "basis_degree": "basis_degree", "kde_every": "kde_every",
                 "seed": "seed", "kernel_cutoff": "kernel_cutoff"}
    updates = {attr: getattr(args, flag) for flag, attr in overrides.items()
               if getattr(args, flag, None) is not None}
    cfg = replace(cfg, **updates)
    cfg.validate()
    if getattr(args, "workers", None):
        import numba

        numba.set_num_threads(args.workers)
    return cfg


def _cmd_mesh(args) -> int:
    mesh = build_icosphere(args.level)
    verts_path = args.out_dir / f"icosphere{args.level}_vertices.csv"
    faces_path = args.out_dir / f"icosphere{args.level}_faces.csv"
    with open(verts_path, "w") as fh:
        fh.write("index,x,y,z\n")
        for i, v in enumerate(mesh.vertices):
            fh.write(f"{i},{v[0]:.17g},{v[1]:.17g},{v[2]:.17g}\n")
    with open(faces_path, "w") as fh:
        fh.write("index,v0,v1,v2\n")
        for i, f in enumerate(mesh.faces):
            fh.write(f"{i},{f[0]},{f[1]},{f[2]}\n")
    write_manifest(args.out_dir / "mesh_manifest.json", "mesh", sys.argv[1:],
                   None, {}, [verts_path, faces_path],
                   extra={"level": args.level, "vertices": mesh.num_vertices,
                          "faces": mesh.num_faces})
    print(f"wrote {verts_path} ({mesh.num_vertices} vertices), "
          f"{faces_path} ({mesh.num_faces} faces)")
    return 0


def _cmd_simulate(args) -> int:
    spec = SimDensitySpec(alpha=args.alpha, kappa=args.kappa)
    pts = sample_ground_truth(spec, args.n, args.seed)
    outputs = [args.out]
    if args.warp_amplitude > 0:
        wspec = SyntheticWarpSpec(basis_degree=args.warp_degree,
                                  amplitude=args.warp_amplitude,
                                  n_steps=args.warp_steps, seed=args.seed)
        warp = random_diffeomorphism(wspec)
        if args.warp_out:
            save_warp(args.warp_out, warp)
            outputs.append(args.warp_out)
        pts = warp.apply_endpoints(pts)
    save_endpoints(args.out, pts)
    write_manifest(args.out.with_suffix(".manifest.json"), "simulate",
                   sys.argv[1:], None, {}, outputs,
                   extra={"n": args.n, "alpha": args.alpha, "kappa": args.kappa,
                          "seed": args.seed,
                          "warp_amplitude": args.warp_amplitude})
    print(f"wrote {args.out} with {pts.count} pairs")
    return 0


def _register_common(args, method) -> int:
    cfg = _resolve_config(args)
    fixed = load_endpoints(args.fixed)
    moving = load_endpoints(args.moving)
    t0 = time.perf_counter()
    if method == "endpoints" and cfg.multires_schedule:
        result = run_multiresolution(fixed, moving, cfg)
    elif method == "endpoints":
        result = register_endpoints(fixed, moving, cfg)
    else:
        result = register_encore(fixed, moving, cfg)
    wall = time.perf_counter() - t0

    out_endpoints = args.out_prefix.with_suffix(".aligned.csv")
    out_warp = args.out_prefix.with_suffix(".warp.txt")
    save_endpoints(out_endpoints, result.aligned)
    save_warp(out_warp, result.warp)
    outputs = [out_endpoints, out_warp]
    if args.emit_plots:
        trace_path = args.out_prefix.with_suffix(".trace.csv")
        with open(trace_path, "w") as fh:
            fh.write("iteration,energy,grad_norm_hemi1,grad_norm_hemi2\n")
            for i, (e, (n1, n2)) in enumerate(zip(result.energy_trace,
                                                  result.gradient_norm_trace)):
                fh.write(f"{i},{e:.17g},{n1:.17g},{n2:.17g}\n")
        outputs.append(trace_path)
    convergence = {"converged": result.converged,
                   "iterations": result.iterations,
                   "final_energy": float(result.energy_trace[-1]),
                   "final_gradient_norms": list(map(float, result.gradient_norm_trace[-1])),
                   "orientation_ok": result.orientation_ok,
                   "step_halvings": result.step_halvings,
                   "wall_seconds": wall}
    write_manifest(args.out_prefix.with_suffix(".manifest.json"),
                   f"register-{method}", sys.argv[1:], cfg,
                   {args.fixed: None, args.moving: None},
                   outputs, timings=result.timing, convergence=convergence)
    print(result.timing_table())
    print(f"converged={result.converged} iterations={result.iterations} "
          f"final_energy={result.energy_trace[-1]:.6g}")
    return 0


def _cmd_register(args) -> int:
    return _register_common(args, "endpoints")


def _cmd_register_encore(args) -> int:
    return _register_common(args, "encore")


def _cmd_evaluate(args) -> int:
    pts1 = load_endpoints(args.endpoints1)
    pts2 = load_endpoints(args.endpoints2)
    rows = []
    if args.metric in ("overlap", "both"):
        mesh = build_icosphere(args.grid_level)
        c1 = bin_endpoints(pts1, mesh)
        c2 = bin_endpoints(pts2, mesh)
        for tau in args.tau:
            rep = overlap_coefficient(c1, c2, tau)
            rows.append(("overlap", tau, rep.overlap, pts1.count, pts2.count))
    if args.metric in ("mmd", "both"):
        spec = KernelSpec.for_bandwidth(args.mmd_sigma)
        value = mmd(pts1, pts2, spec, subset=args.hemisphere,
                    max_pairs=args.max_pairs, seed=args.seed or 0)
        rows.append(("mmd", args.mmd_sigma, value, pts1.count, pts2.count))
    with open(args.out, "w") as fh:
        fh.write("metric,parameter,value,n1,n2\n")
        for row in rows:
            fh.write(f"{row[0]},{row[1]:.17g},{row[2]:.17g},{row[3]},{row[4]}\n")
    write_manifest(Path(args.out).with_suffix(".manifest.json"), "evaluate",
                   sys.argv[1:], None,
                   {args.endpoints1: None, args.endpoints2: None}, [args.out])
    for row in rows:
        print(f"{row[0]}({row[1]:g}) = {row[2]:.6g}")
    return 0


def _cmd_select_bandwidth(args) -> int:
    pts = load_endpoints(args.endpoints)
    sigmas = np.array(args.sigmas)
    rows = []
    best = None
    if args.method == "lcv":
        scores = lcv_sweep(pts, sigmas)
        for s, sc in zip(sigmas, scores):
            rows.append({"sigma": float(s), "lcv": float(sc)})
        best = float(sigmas[int(np.argmax(scores))])
    else:
        fixed = load_endpoints(args.fixed)
        mesh = build_icosphere(args.grid_level)
        base_cfg = _resolve_config(args)
        c_fixed = bin_endpoints(fixed, mesh)
        labels = pts.labels
        for s in sigmas:
            cfg = replace(base_cfg, sigma=float(s))
            res = register_endpoints(fixed, pts, cfg)
            aligned = res.aligned
            rep = overlap_coefficient(c_fixed, bin_endpoints(aligned, mesh),
                                      args.tau[0])
            row = {"sigma": float(s), "overlap": rep.overlap}
            if labels is not None:
                per = {}
                for lab in sorted(set(labels)):
                    mask = labels == lab
                    rep_l = overlap_coefficient(
                        bin_endpoints(fixed.subset(fixed.labels == lab), mesh)
                        if fixed.labels is not None else c_fixed,
                        bin_endpoints(aligned.subset(mask), mesh), args.tau[0])
                    per[str(lab)] = rep_l.overlap
                row["per_label"] = per
                row["equal_weight"] = float(np.mean(list(per.values())))
            rows.append(row)
        key = "equal_weight" if labels is not None else "overlap"
        best = float(sigmas[int(np.argmax([r[key] for r in rows]))])
    with open(args.out, "w") as fh:
        json.dump({"rows": rows, "best_sigma": best}, fh, indent=2)
        fh.write("\n")
    write_manifest(Path(args.out).with_suffix(".manifest.json"),
                   "select-bandwidth", sys.argv[1:], None,
                   {args.endpoints: None}, [args.out],
                   extra={"best_sigma": best, "method": args.method})
    print(f"best sigma: {best}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="endpointalign",
        description="Diffeomorphic alignment of paired endpoint point clouds "
                    "on a union of two spheres")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="emit icosphere vertices/faces as CSV")
    p.add_argument("--level", type=int, required=True)
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.set_defaults(func=_cmd_mesh)

    p = sub.add_parser("simulate", help="sample endpoint pairs from the "
                       "ground-truth mixture density")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--alpha", type=float, default=0.85)
    p.add_argument("--kappa", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--warp-amplitude", type=float, default=0.0,
                   help="apply a random synthetic warp of this mean displacement")
    p.add_argument("--warp-degree", type=int, default=4)
    p.add_argument("--warp-steps", type=int, default=8)
    p.add_argument("--warp-out", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_simulate)

    for name, fn in (("register", _cmd_register),
                     ("register-encore", _cmd_register_encore)):
        p = sub.add_parser(name, help=f"{name} alignment run")
        p.add_argument("--fixed", type=Path, required=True)
        p.add_argument("--moving", type=Path, required=True)
        p.add_argument("--out-prefix", type=Path, required=True)
        p.add_argument("--emit-plots", action="store_true",
                       help="write energy/gradient trace CSV")
        _add_config_flags(p)
        p.set_defaults(func=fn)

    p = sub.add_parser("evaluate", help="overlap / MMD metrics between two "
                       "endpoint files")
    p.add_argument("--endpoints1", type=Path, required=True)
    p.add_argument("--endpoints2", type=Path, required=True)
    p.add_argument("--metric", choices=("overlap", "mmd", "both"),
                   default="overlap")
    p.add_argument("--tau", type=float, nargs="+", default=[0.0])
    p.add_argument("--grid-level", type=int, default=4)
    p.add_argument("--mmd-sigma", type=float, default=0.005,
                   help="product heat-kernel bandwidth for MMD")
    p.add_argument("--hemisphere", type=int, choices=(1, 2))
    p.add_argument("--max-pairs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("select-bandwidth", help="bandwidth sweep by LCV or "
                       "registration overlap")
    p.add_argument("--endpoints", type=Path, required=True)
    p.add_argument("--method", choices=("lcv", "overlap"), default="lcv")
    p.add_argument("--sigmas", type=float, nargs="+", required=True)
    p.add_argument("--fixed", type=Path, help="fixed subject (overlap method)")
    p.add_argument("--tau", type=float, nargs="+", default=[0.0])
    p.add_argument("--out", type=Path, required=True)
    _add_config_flags(p)
    p.set_defaults(func=_cmd_select_bandwidth)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (EndpointAlignError, OSError) as err:
        record = {"error": type(err).__name__, "message": str(err)}
        print(json.dumps(record), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
