"""Command-line interface: ``sparsecorr {match,eval,synth,descriptors,plot,config}``.

Errors are reported on stderr as one line ``error: <code>: <message>`` and
the process exits with 2 (input/output), 3 (configuration) or 4 (numeric).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import descriptors as desc
from .anchors import AnchorSet, Correspondence, PipelineConfig, run_pipeline
from .errors import BadIndexError, ConfigError, InputError, NumericalError, SparseCorrError
from .evaluation import (ErrorReport, GroundTruth, cdf_svg, distortion_report,
                         error_cdf, geodesic_error, read_columns, synth_pair, write_columns)
from .geometry import PointCloud, TriMesh, geodesic_diameter, load_cloud, load_mesh, save_mesh
from .pointcloud import CloudSurface

logger = logging.getLogger("sparsecorr")

# keys accepted in config files besides the pipeline fields
CLOUD_KEYS = {"K0": 200, "ratio": 0.05, "shrink": 6, "Kmin": 12}
RUN_KEYS = {"kind": "auto"}
PUBLISHED = {"outer_iters", "epsilon_schedule", "distortion_ring", "sparsity_ring", "step0", "num_eigs", "hks_t",
             "K0", "ratio", "shrink"}


def _defaults():
    cfg = PipelineConfig()
    d = {f.name: getattr(cfg, f.name) for f in fields(PipelineConfig)}
    d.update(CLOUD_KEYS)
    d.update(RUN_KEYS)
    return d


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(f"{x:g}" for x in v)
    return str(v)


def default_config_text():
    lines = ["# sparsecorr configuration: one 'key = value' per line, '#' starts a comment.",
             "# Command-line '--key value' options override these values."]
    for k, v in _defaults().items():
        note = "  # published default" if k in PUBLISHED else ""
        lines.append(f"{k} = {_format_value(v)}{note}")
    return "\n".join(lines) + "\n"


def _coerce(key, raw, default):
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(float(x) for x in raw.replace(" ", "").split(",") if x)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def read_config(path):
    path = Path(path)
    if not path.exists():
        raise InputError(f"{path}: no such file", code="io.not_found")
    defaults = _defaults()
    out = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (x.strip() for x in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, raw, defaults[key])
    return out


def resolve_config(args):
    """Defaults, then config file, then command-line overrides."""
    defaults = _defaults()
    values = dict(defaults)
    if getattr(args, "config", None):
        values.update(read_config(args.config))
    for key, default in defaults.items():
        raw = getattr(args, "opt_" + key, None)
        if raw is not None:
            values[key] = _coerce(key, raw, default)
    if getattr(args, "seed", None) is not None:
        values["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        values["workers"] = args.threads
    if "epsilon_schedule" not in _explicit(args) and values["outer_iters"] != defaults["outer_iters"]:
        values["epsilon_schedule"] = None
    pipe = {f.name: values[f.name] for f in fields(PipelineConfig)}
    try:
        cfg = PipelineConfig(**pipe)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    cloud = {k: values[k] for k in CLOUD_KEYS}
    return cfg, cloud, values


def _explicit(args):
    keys = set()
    if getattr(args, "config", None):
        keys |= set(read_config(args.config))
    keys |= {k for k in _defaults() if getattr(args, "opt_" + k, None) is not None}
    return keys


def _add_config_options(p):
    p.add_argument("--config", help="flat key = value configuration file; any key can also be given "
                   "as --key-name VALUE (see 'sparsecorr config' for the list)")
    for key in _defaults():
        if key in ("seed", "workers"):
            continue
        p.add_argument("--" + key.replace("_", "-"), dest="opt_" + key, metavar="VALUE", help=argparse.SUPPRESS)
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=None, help="worker threads for neighbor queries")


# ------------------------------------------------------------------- inputs


def _kind_of(path, kind):
    if kind in ("mesh", "cloud"):
        return kind
    suffix = Path(path).suffix.lower()
    if suffix == ".xyz":
        return "cloud"
    if suffix == ".ply":
        text = Path(path).read_text(encoding="utf-8", errors="replace") if Path(path).exists() else ""
        for line in text.splitlines():
            if line.startswith("element face"):
                return "mesh" if int(line.split()[2]) > 0 else "cloud"
            if line.strip() == "end_header":
                break
        return "cloud"
    return "mesh"


def load_surface(path, kind="auto", cloud_params=None):
    kind = _kind_of(path, kind)
    if kind == "mesh":
        return load_mesh(path)
    suffix = Path(path).suffix.lower()
    pts = load_cloud(path).points if suffix in (".xyz", ".ply") else load_mesh(path).vertices
    return CloudSurface(PointCloud(pts), **(cloud_params or {}))


def _fmt(x):
    return f"{x:.17g}"


def write_log(path, log, timings):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "epsilon", "num_anchors", "objective", "seconds"])
        for r in log:
            w.writerow([r["iter"], _fmt(r["epsilon"]), r["num_anchors"], _fmt(r["objective"]),
                        _fmt(r["seconds"]) if timings else "nan"])


# ----------------------------------------------------------------- commands


def cmd_match(args):
    cfg, cloud, values = resolve_config(args)
    s1 = load_surface(args.source, values["kind"], cloud)
    s2 = load_surface(args.target, values["kind"], cloud)
    if isinstance(s1, CloudSurface) and cfg.postprocess == "hks" and not _is_set(args, "postprocess"):
        cfg.postprocess = "geodesic_sig"
    phi0 = None
    if args.init_map:
        phi0 = Correspondence.load_csv(args.init_map, s2.n_vertices)
        if phi0.n1 != s1.n_vertices:
            raise BadIndexError(f"initial map has {phi0.n1} sources, source has {s1.n_vertices}")
    res = run_pipeline(s1, s2, cfg, phi0)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res.correspondence.save_csv(out / "map.csv")
    res.anchors.save_csv(out / "anchors.csv")
    write_log(out / "log.csv", res.log, args.timings)
    return 0


def _is_set(args, key):
    return key in _explicit(args)


def cmd_eval(args):
    target = load_surface(args.target, args.kind)
    n2 = target.n_vertices
    gt = GroundTruth.load_csv(args.gt, n2)
    labels = args.label or [Path(m).stem for m in args.map]
    if len(labels) != len(args.map):
        raise ConfigError("give one --label per --map")
    diam = None
    series, errs = [], []
    for path in args.map:
        phi = _load_map(path, n2)
        if len(phi.targets) != len(gt.targets):
            raise BadIndexError(f"{path}: {len(phi.targets)} sources, ground truth has {len(gt.targets)}")
        if diam is None:
            diam = geodesic_diameter(target, min(args.diameter_samples, n2))
        e = geodesic_error(phi, gt, target, diameter=diam)
        errs.append(e)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t = np.linspace(0.0, args.max_error, args.points)
    cdfs = [error_cdf(e, t)[1] for e in errs]
    cols = [(f"error_{l}" if len(errs) > 1 else "error", e) for l, e in zip(labels, errs)]
    if args.source:
        src = load_surface(args.source, args.kind)
        for l, path in zip(labels, args.map):
            d, _, _ = distortion_report(_load_map(path, n2), src, target)
            cols.append((f"distortion_{l}" if len(errs) > 1 else "distortion", d))
    write_columns(out / "errors.csv", "source_index", np.arange(len(gt.targets)), cols)
    write_columns(out / "cdf.csv", "threshold", t,
                  [(f"fraction_{l}" if len(errs) > 1 else "fraction", c) for l, c in zip(labels, cdfs)])
    (out / "cdf.svg").write_text(cdf_svg(list(zip(labels, [t] * len(cdfs), cdfs)), title="correspondence accuracy"),
                                 encoding="utf-8")
    for l, e in zip(labels, errs):
        rep = ErrorReport.from_errors(e, t)
        print(f"{l}: mean {rep.mean:.6g} median {rep.median:.6g} unreachable {rep.n_unreachable}")
    return 0


def _load_map(path, n2):
    phi = Correspondence.load_csv(path)
    if phi.n2 > n2:
        raise BadIndexError(f"{path}: target index {phi.n2 - 1} outside [0, {n2})")
    return Correspondence(phi.targets, n2)


def _parse_kv(tokens, keys):
    out = {}
    for tok in tokens:
        if "=" not in tok:
            raise ConfigError(f"expected key=value, got {tok!r}")
        k, v = tok.split("=", 1)
        if k not in keys:
            raise ConfigError(f"unknown key {k!r}; expected one of {sorted(keys)}")
        out[k] = float(v)
    return out


def cmd_synth(args):
    mesh = load_mesh(args.mesh)
    crop = None
    if args.crop_ball:
        kv = _parse_kv(args.crop_ball, {"center", "radius"})
        crop = (int(kv.get("center", 0)), kv.get("radius", 0.3))
    translation = None
    if args.translate:
        try:
            translation = [float(x) for x in args.translate.split(",")]
        except ValueError:
            raise ConfigError(f"bad translation {args.translate!r}") from None
        if len(translation) != 3:
            raise ConfigError("translation needs three comma-separated values")
    try:
        mesh2, gt = synth_pair(mesh, rotation=args.rotate, translation=translation,
                               permutation_seed=args.permute_seed, delete_faces=args.delete_faces,
                               crop=crop, noise=args.noise, seed=args.seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    save_mesh(mesh2, args.out)
    gt.save_csv(args.gt)
    return 0


def _anchor_list(spec, surface):
    if spec is None:
        return np.arange(0, surface.n_vertices, max(1, surface.n_vertices // 20))
    p = Path(spec)
    if p.exists():
        return AnchorSet.load_csv(p).sources
    try:
        return np.array([int(x) for x in spec.split(",")])
    except ValueError:
        raise ConfigError(f"anchors must be a CSV path or comma-separated ids, got {spec!r}") from None


def cmd_descriptors(args):
    s = load_surface(args.input, args.kind)
    out = Path(args.out)
    if args.which in ("stiffness", "mass"):
        if isinstance(s, CloudSurface):
            op = s.stiffness if args.which == "stiffness" else s.mass
        else:
            op = desc.assemble_stiffness(s) if args.which == "stiffness" else desc.assemble_mass(s)
        op.save(out)
        return 0
    if args.which == "shot":
        sig = desc.shot_like_descriptor(s, workers=args.threads or 1)
    elif args.which == "hks":
        if not isinstance(s, TriMesh):
            raise NumericalError("hks needs a mesh; use geodesic_sig for clouds", code="descriptors.hks_size_limit")
        anchors = _anchor_list(args.anchors, s) if args.anchors else None
        if anchors is None:
            sig = desc.hks(s, num_eigs=args.num_eigs, t=args.t)
        else:
            sig = desc.hks_cross(s, anchors, num_eigs=args.num_eigs, t=args.t)
    else:
        sig = desc.geodesic_signature(s, _anchor_list(args.anchors, s))
    sig.save_csv(out)
    return 0


def cmd_plot(args):
    series = []
    for path in args.csv:
        head, data = read_columns(path)
        for j in range(1, len(head)):
            label = head[j].removeprefix("fraction_") if len(head) > 2 else Path(path).stem
            series.append((label, data[:, 0], data[:, j]))
    Path(args.out).write_text(cdf_svg(series, title=args.title, xlabel=args.xlabel), encoding="utf-8")
    return 0


def cmd_config(args):
    text = default_config_text()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    ap = argparse.ArgumentParser(prog="sparsecorr", description="Sparse dense-correspondence pipeline for meshes and point clouds.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="compute a correspondence between two shapes")
    p.add_argument("source")
    p.add_argument("target")
    p.add_argument("--out", default=".", help="output directory for map.csv, anchors.csv, log.csv")
    p.add_argument("--init-map", help="initial correspondence CSV (implies init = provided)")
    p.add_argument("--timings", action="store_true", help="record wall-clock seconds in log.csv (breaks bit-reproducibility)")
    _add_config_options(p)
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="geodesic error of one or more maps against ground truth")
    p.add_argument("--map", action="append", required=True)
    p.add_argument("--label", action="append")
    p.add_argument("--gt", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--source", help="source shape; adds per-vertex local distortion to errors.csv")
    p.add_argument("--kind", default="auto", choices=["auto", "mesh", "cloud"])
    p.add_argument("--out", default=".")
    p.add_argument("--max-error", type=float, default=0.25)
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--diameter-samples", type=int, default=16)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="make a rigidly moved, relabeled, optionally damaged copy")
    p.add_argument("mesh")
    p.add_argument("--out", required=True, help="target mesh path (.off, .obj or .ply)")
    p.add_argument("--gt", required=True, help="ground-truth CSV path")
    p.add_argument("--rotate", help="'random' or '<axis>:<degrees>', e.g. z:90")
    p.add_argument("--translate", help="x,y,z")
    p.add_argument("--permute-seed", type=int, default=None)
    p.add_argument("--delete-faces", type=float, default=0.0, metavar="PERCENT")
    p.add_argument("--crop-ball", nargs="+", metavar="KEY=VALUE", help="center=<vertex> radius=<fraction of diameter>")
    p.add_argument("--noise", type=float, default=0.0, help="vertex jitter as a fraction of mean edge length")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("descriptors", help="export operators (MatrixMarket) or signatures (CSV)")
    p.add_argument("input")
    p.add_argument("--which", required=True, choices=["stiffness", "mass", "shot", "hks", "geodesic_sig"])
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="auto", choices=["auto", "mesh", "cloud"])
    p.add_argument("--anchors", help="anchor ids 'i,j,k' or an anchors CSV")
    p.add_argument("--num-eigs", type=int, default=300)
    p.add_argument("--t", type=float, default=50.0)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_descriptors)

    p = sub.add_parser("plot", help="render CDF CSV files to one SVG")
    p.add_argument("csv", nargs="+")
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="")
    p.add_argument("--xlabel", default="geodesic error")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("config", help="print or write the default configuration")
    p.add_argument("--out")
    p.set_defaults(func=cmd_config)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SparseCorrError as exc:
        print(f"error: {exc.code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numeric.failure: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"error: io.error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
