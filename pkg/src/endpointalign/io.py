"""File formats: endpoint CSV, versioned warp files, flat config files,
and JSON run manifests."""

import hashlib
import json
import time
from pathlib import Path

import numpy as np

from .align import AlignConfig, WarpIncrement, WarpSequence
from .density import EndpointSet
from .errors import ConfigError, NormError, ParseError, SchemaVersionError

ENDPOINT_HEADER = ["id", "hemi1", "x1", "y1", "z1", "hemi2", "x2", "y2", "z2"]
WARP_MAGIC = "endpointalign-warp"
WARP_VERSION = 1
NORM_ACCEPT = 1e-3  # larger deviations from unit norm are rejected

_CONFIG_KEYS = {
    "sigma": ("sigma", float),
    "delta": ("step", float),
    "epsilon": ("tol", float),
    "max_iters": ("max_iters", int),
    "grid_level": ("grid_level", int),
    "basis_degree": ("basis_degree", int),
    "kde_every": ("kde_every", int),
    "seed": ("seed", int),
    "deterministic": ("deterministic", lambda s: s.lower() in ("1", "true", "yes")),
    "kernel_cutoff": ("kernel_cutoff", float),
}


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def load_endpoints(path) -> EndpointSet:
    """Parse an endpoint CSV, re-normalizing small unit-norm deviations.

    Raises ``ParseError`` (with the line number) for malformed rows or
    hemisphere tags outside {1, 2}, and ``NormError`` when a point deviates
    from unit norm by more than 1e-3.
    """
    path = Path(path)
    rows = []
    labels = []
    with open(path) as fh:
        header = fh.readline().strip()
        cols = [c.strip() for c in header.split(",")]
        if cols[:9] != ENDPOINT_HEADER:
            raise ParseError(f"{path}:1: expected header "
                             f"'{','.join(ENDPOINT_HEADER)}[,label]'")
        has_label = len(cols) == 10 and cols[9] == "label"
        if len(cols) > 9 and not has_label:
            raise ParseError(f"{path}:1: unexpected columns after z2")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(cols):
                raise ParseError(f"{path}:{lineno}: expected {len(cols)} fields, "
                                 f"got {len(parts)}")
            try:
                h1 = int(parts[1])
                h2 = int(parts[5])
                xyz = [float(p) for p in parts[2:5] + parts[6:9]]
            except ValueError as err:
                raise ParseError(f"{path}:{lineno}: {err}") from None
            if h1 not in (1, 2) or h2 not in (1, 2):
                raise ParseError(f"{path}:{lineno}: hemisphere tags must be 1 or 2")
            rows.append((h1, *xyz[:3], h2, *xyz[3:]))
            if has_label:
                labels.append(parts[9])
    if not rows:
        raise ParseError(f"{path}: no endpoint rows")
    arr = np.array(rows)
    hemi1 = arr[:, 0].astype(np.int8)
    hemi2 = arr[:, 4].astype(np.int8)
    p1 = arr[:, 1:4]
    p2 = arr[:, 5:8]
    for name, p in (("first", p1), ("second", p2)):
        norms = np.linalg.norm(p, axis=1)
        bad = np.abs(norms - 1.0) > NORM_ACCEPT
        if bad.any():
            raise NormError(f"{path}: {int(bad.sum())} {name} endpoints deviate "
                            f"from unit norm by more than {NORM_ACCEPT}")
        # renormalize only meaningful deviations so round trips stay bit-exact
        scale = np.where(np.abs(norms - 1.0) > 1e-12, norms, 1.0)
        p /= scale[:, None]
    return EndpointSet(hemi1, p1, hemi2, p2,
                       np.array(labels) if labels else None)


def save_endpoints(path, pts: EndpointSet) -> None:
    path = Path(path)
    has_label = pts.labels is not None
    with open(path, "w") as fh:
        fh.write(",".join(ENDPOINT_HEADER + (["label"] if has_label else [])) + "\n")
        for i in range(pts.count):
            row = [str(i), str(int(pts.hemi1[i])),
                   *(_fmt(v) for v in pts.p1[i]),
                   str(int(pts.hemi2[i])),
                   *(_fmt(v) for v in pts.p2[i])]
            if has_label:
                row.append(str(pts.labels[i]))
            fh.write(",".join(row) + "\n")


def save_warp(path, warp: WarpSequence) -> None:
    """Write a warp sequence as a versioned, diff-friendly text document."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"{WARP_MAGIC} {WARP_VERSION}\n")
        fh.write(f"increments {len(warp)}\n")
        for i, inc in enumerate(warp.increments):
            fh.write(f"increment {i}\n")
            fh.write(f"step {_fmt(inc.step)}\n")
            fh.write(f"degree {inc.degree}\n")
            fh.write("coeffs1 " + " ".join(_fmt(c) for c in inc.coeffs1) + "\n")
            fh.write("coeffs2 " + " ".join(_fmt(c) for c in inc.coeffs2) + "\n")


def load_warp(path) -> WarpSequence:
    """Read a warp file; truncated or unversioned files never load partially."""
    path = Path(path)
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise SchemaVersionError(f"{path}: empty warp file")
    head = lines[0].split()
    if len(head) != 2 or head[0] != WARP_MAGIC:
        raise SchemaVersionError(f"{path}: not a warp file (bad magic line)")
    if head[1] != str(WARP_VERSION):
        raise SchemaVersionError(f"{path}: unsupported warp format version {head[1]}")
    try:
        count = int(lines[1].split()[1])
    except (IndexError, ValueError):
        raise ParseError(f"{path}:2: expected 'increments <n>'") from None
    seq = WarpSequence()
    pos = 2
    for i in range(count):
        try:
            fields = {}
            if lines[pos].split() != ["increment", str(i)]:
                raise ParseError(f"{path}:{pos + 1}: expected 'increment {i}'")
            for key in ("step", "degree", "coeffs1", "coeffs2"):
                parts = lines[pos + 1 + ("step degree coeffs1 coeffs2".split().index(key))].split()
                if parts[0] != key:
                    raise ParseError(f"{path}: expected '{key}' record in increment {i}")
                fields[key] = parts[1:]
            step = float(fields["step"][0])
            degree = int(fields["degree"][0])
            c1 = np.array([float(v) for v in fields["coeffs1"]])
            c2 = np.array([float(v) for v in fields["coeffs2"]])
            m = 2 * (degree * degree + 2 * degree)
            if c1.size != m or c2.size != m:
                raise ParseError(f"{path}: increment {i} expects {m} coefficients")
            seq.append(WarpIncrement(step, degree, c1, c2))
            pos += 5
        except IndexError:
            raise ParseError(f"{path}: truncated warp file "
                             f"(increment {i} of {count})") from None
    return seq


def load_config(path) -> AlignConfig:
    """Flat key=value configuration; CLI flags override these values."""
    cfg = AlignConfig()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key '{key}'")
        attr, conv = _CONFIG_KEYS[key]
        try:
            setattr(cfg, attr, conv(value))
        except ValueError as err:
            raise ConfigError(f"{path}:{lineno}: {err}") from None
    cfg.validate()
    return cfg


def config_dict(cfg: AlignConfig) -> dict:
    return {"sigma": cfg.sigma, "delta": cfg.step, "epsilon": cfg.tol,
            "max_iters": cfg.max_iters, "grid_level": cfg.grid_level,
            "basis_degree": cfg.basis_degree, "kde_every": cfg.kde_every,
            "seed": cfg.seed, "deterministic": cfg.deterministic,
            "kernel_cutoff": cfg.kernel_cutoff,
            "multires_schedule": cfg.multires_schedule}


def file_digest(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def write_manifest(path, command: str, argv: list, cfg: AlignConfig | None,
                   inputs: dict, outputs: list, timings: dict | None = None,
                   convergence: dict | None = None, extra: dict | None = None) -> dict:
    """One manifest per run: configuration, input digests, outputs, timings."""
    manifest = {
        "tool": "endpointalign",
        "command": command,
        "argv": list(argv),
        "config": None if cfg is None else config_dict(cfg),
        "inputs": {str(k): file_digest(k) for k in inputs},
        "outputs": [str(p) for p in outputs],
        "timings": timings or {},
        "convergence": convergence or {},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    if extra:
        manifest.update(extra)
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
