"""Command-line entry points: optimize, check, sweep."""
from __future__ import annotations

import argparse
import copy
import csv
import itertools
import json
import sys
import time
from pathlib import Path

import numpy as np
from jsonschema import ValidationError

from .errors import MillforgeError
from .heat import solve_heat
from .io import (
    extract_surface,
    read_grid_file,
    read_stl,
    voxelize_stl,
    write_grid_file,
    write_stl,
    write_surface_stl,
)
from .levelset import LevelSet
from .milling import (
    DirectionSet,
    ToolModel,
    filter_3axis,
    filter_5axis_heat_search,
    filter_5axis_hemisphere,
    filter_5axis_normal_search,
)
from .optimizer import run
from .problems import build_problem, load_problem

_AXIS_TOKENS = {
    "+x": (1, 0, 0), "-x": (-1, 0, 0),
    "+y": (0, 1, 0), "-y": (0, -1, 0),
    "+z": (0, 0, 1), "-z": (0, 0, -1),
    "x": (1, 0, 0), "y": (0, 1, 0), "z": (0, 0, 1),
}


def parse_directions(text: str) -> DirectionSet:
    """Directions like '0,0,-1;1,0,0' or compact axis tokens '+x;-z'."""
    vecs = []
    for token in text.split(";"):
        token = token.strip()
        if not token:
            continue
        if token.lower() in _AXIS_TOKENS:
            vecs.append(_AXIS_TOKENS[token.lower()])
        else:
            parts = [float(p) for p in token.split(",")]
            if len(parts) != 3:
                raise ValueError(f"direction {token!r} is not a 3-vector")
            vecs.append(parts)
    d = np.asarray(vecs, dtype=float)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return DirectionSet(d)


# ------------------------------------------------------------------
# optimize
# ------------------------------------------------------------------

def cmd_optimize(args) -> int:
    problem, meta = load_problem(args.problem)
    if args.max_iters:
        problem.max_iters = args.max_iters
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run(
        problem,
        log_path=out / "log.csv",
        checkpoint_every=args.checkpoint_every or None,
        checkpoint_dir=out if args.checkpoint_every else None,
        verbose=args.verbose,
    )
    write_grid_file(out / "final.lsg", result.omega)
    write_surface_stl(out / "final.stl", result.omega, name=meta["name"])
    summary = {
        "name": meta["name"],
        "iterations": len(result.history),
        "converged": result.converged,
        "feasible": result.feasible,
        "final_compliance": result.final_compliance,
        "final_volume_fraction": result.final_volume_fraction,
        "wall_time_s": result.wall_time,
        "s_per_iteration": result.wall_time / max(len(result.history), 1),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))
    if not result.feasible:
        print("warning: run ended infeasible (volume target not met)", file=sys.stderr)
        return 3
    return 0


# ------------------------------------------------------------------
# check
# ------------------------------------------------------------------

def _load_shape(path: str, spacing: float | None, tool: ToolModel) -> LevelSet:
    p = Path(path)
    if p.suffix.lower() == ".lsg":
        ls = read_grid_file(p)
        return ls.redistance(max(ls.band_width, tool.band_requirement(ls.h)))
    tris = read_stl(p)
    extent = tris.reshape(-1, 3)
    h = spacing or float(np.min(extent.max(axis=0) - extent.min(axis=0)) / 48.0)
    pad = max(tool.head_radius + 2.0 * h, 4.0 * h)
    return voxelize_stl(tris, h, padding=pad,
                        band_width=tool.band_requirement(h))


def _run_filter(mode, omega, samples, tool, directions, max_iters=8):
    if mode == "3axis":
        return filter_3axis(omega, samples, directions, tool)
    if mode == "hemisphere":
        return filter_5axis_hemisphere(omega, samples, tool)
    if mode == "normal":
        return filter_5axis_normal_search(omega, samples, tool, max_iters)
    temperature = solve_heat(omega.offset(tool.bit_radius))
    return filter_5axis_heat_search(omega, samples, tool, temperature, max_iters)


def cmd_check(args) -> int:
    with open(args.tool) as fh:
        t = json.load(fh)
    tool = ToolModel(t["bit_radius"], t["bit_length"], t["head_radius"])
    directions = parse_directions(args.dirs) if args.dirs else None
    if args.mode == "3axis" and directions is None:
        print("error: 3-axis mode needs --dirs", file=sys.stderr)
        return 2
    omega = _load_shape(args.shape, args.spacing, tool)
    samples = omega.sample_boundary()
    ff = _run_filter(args.mode, omega, samples, tool, directions, args.max_iters)
    millable = ff.eta > 0.0

    # borderline contacts: a sample failing by less than one voxel of
    # clearance passes the check with a tool shrunk by h
    slack = np.zeros(len(samples), dtype=bool)
    failing = np.where(~millable)[0]
    if failing.size:
        h = omega.h
        rb = max(tool.bit_radius - h, 0.25 * h)
        shrunk = ToolModel(rb, tool.bit_length + h, max(tool.head_radius - h, rb))
        sub = type(samples)(samples.positions[failing], samples.normals[failing],
                            samples.node_indices[failing])
        ff2 = _run_filter(args.mode, omega, sub, tool=shrunk,
                          directions=directions, max_iters=args.max_iters)
        slack[failing] = ff2.eta > 0.0

    out_csv = Path(args.output) if args.output else Path(args.shape).with_suffix(".check.csv")
    with open(out_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "z", "nx", "ny", "nz", "eta", "mx", "my", "mz"])
        for i in range(len(samples)):
            p = samples.positions[i]
            n = samples.normals[i]
            m = ff.best_directions[i]
            w.writerow([f"{v:.6g}" for v in (*p, *n, ff.eta[i], *m)])

    if args.stl_out:
        verts, faces = extract_surface(omega)
        write_stl(args.stl_out, verts, faces, name="checked")
        from scipy.spatial import cKDTree
        tree = cKDTree(samples.positions)
        _, nearest = tree.query(verts, k=1)
        eta_path = Path(args.stl_out).with_suffix(".eta.csv")
        with open(eta_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["vertex", "eta"])
            for i, e in enumerate(ff.eta[nearest]):
                w.writerow([i, f"{e:.6g}"])

    total = len(samples)
    ok = int(millable.sum())
    ok_slack = int((millable | slack).sum())
    frac = ok / total if total else 1.0
    print(f"samples: {total}  millable: {ok} ({frac:.2%})  "
          f"within tangency slack: {ok_slack} ({ok_slack / max(total, 1):.2%})")
    print(f"per-sample report: {out_csv}")
    return 0 if ok_slack == total else 1


# ------------------------------------------------------------------
# sweep
# ------------------------------------------------------------------

def _set_by_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def _parse_value(key: str, text: str):
    if key.endswith("directions"):
        return [list(v) for v in parse_directions(text).directions]
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def cmd_sweep(args) -> int:
    with open(args.problem) as fh:
        base_doc = json.load(fh)
    axes = []
    for spec in args.vary:
        key, _, values = spec.partition("=")
        if not values:
            print(f"error: --vary needs key=v1,v2,..., got {spec!r}", file=sys.stderr)
            return 2
        axes.append((key, [_parse_value(key, v) for v in values.split(",")]))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for idx, combo in enumerate(itertools.product(*(vals for _, vals in axes))):
        doc = copy.deepcopy(base_doc)
        desc = []
        for (key, _), value in zip(axes, combo):
            _set_by_path(doc, key, value)
            desc.append(f"{key}={value}")
        label = " ".join(desc)
        problem, meta = build_problem(doc)
        if args.max_iters:
            problem.max_iters = args.max_iters
        run_dir = out / f"run_{idx:03d}"
        run_dir.mkdir(exist_ok=True)
        t0 = time.perf_counter()
        result = run(problem, log_path=run_dir / "log.csv", verbose=args.verbose)
        wall = time.perf_counter() - t0
        write_surface_stl(run_dir / "final.stl", result.omega, name=meta["name"])
        rows.append({
            "params": label,
            "compliance": result.final_compliance,
            "volume": result.final_volume_fraction,
            "iterations": len(result.history),
            "s_per_iter": wall / max(len(result.history), 1),
        })
        print(f"[{idx}] {label}: C={result.final_compliance:.4g} "
              f"vf={result.final_volume_fraction:.3f} "
              f"iters={len(result.history)} ({rows[-1]['s_per_iter']:.2f} s/iter)")
    ref = rows[0]["compliance"] if rows else 1.0
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["params", "relative_compliance", "compliance", "volume",
                    "iterations", "s_per_iter"])
        for r in rows:
            w.writerow([r["params"], f"{r['compliance'] / ref:.4f}",
                        f"{r['compliance']:.6g}", f"{r['volume']:.4f}",
                        r["iterations"], f"{r['s_per_iter']:.3f}"])
    print(f"\n{'params':<50} {'rel C':>8} {'volume':>8} {'iters':>6} {'s/iter':>8}")
    for r in rows:
        print(f"{r['params']:<50} {r['compliance'] / ref:>8.3f} "
              f"{r['volume']:>8.3f} {r['iterations']:>6d} {r['s_per_iter']:>8.2f}")
    return 0


# ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="millforge",
        description="Level-set topology optimization with CNC milling constraints",
    )
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="run a problem file to convergence")
    p.add_argument("problem", help="problem JSON file")
    p.add_argument("-o", "--out-dir", required=True)
    p.add_argument("--checkpoint-every", type=int, default=0, metavar="N",
                   help="write a level-set checkpoint every N iterations")
    p.add_argument("--threads", type=int, default=0,
                   help="numba thread budget (results are thread-count independent)")
    p.add_argument("--max-iters", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("check", help="verify every surface sample is tool-accessible")
    p.add_argument("shape", help="shape file (.lsg or .stl)")
    p.add_argument("--tool", required=True, help="tool JSON (bit_radius, bit_length, head_radius)")
    p.add_argument("--mode", required=True,
                   choices=["3axis", "hemisphere", "normal", "heat"])
    p.add_argument("--dirs", help="3-axis directions, e.g. '0,0,-1;1,0,0' or '+x;-x'")
    p.add_argument("--spacing", type=float, help="voxel size for STL input")
    p.add_argument("--max-iters", type=int, default=8)
    p.add_argument("-o", "--output", help="per-sample CSV path")
    p.add_argument("--stl-out", help="write the surface STL plus an eta sidecar CSV")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("sweep", help="run the cartesian product of parameter overrides")
    p.add_argument("problem")
    p.add_argument("--vary", action="append", required=True, metavar="KEY=V1,V2,...",
                   help="e.g. tool.bit_radius=3,7,10 or milling.mode=hemisphere,heat,off")
    p.add_argument("-o", "--out-dir", default="sweep_out")
    p.add_argument("--max-iters", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", 0):
        import numba
        numba.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        print(f"error: problem file invalid at {loc}: {exc.message}", file=sys.stderr)
        return 2
    except (MillforgeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
