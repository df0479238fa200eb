"""Command-line front end.

Subcommands::

    synth      write a synthetic exact butterfly and its manifest
    factorize  reconstruct a butterfly from an operator and log the run
    verify     check the per-level block error bounds against a dense oracle
    bench      scaling sweep over levels or sizes
    comm       communication model table, optionally cross-checked by simulation
    inspect    print a container's header (and optionally its assembled factors)

Every subcommand exits 0 iff the checks it was asked to perform pass.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np
import scipy.sparse

from . import butterfly as bfm
from . import layout, operators
from .hier import auto_levels, build_tree, uniform_tree
from .reconstruct import ReconstructionConfig, estimate_error, factorize, predicted_transfer_cols, theorem_report

SCHEMA_VERSION = 1

FACTORIZE_COLUMNS = (
    "schema_version", "operator", "n", "L", "eps", "max_rank", "error", "nnz", "bytes", "matvec_cols", "time_s",
)
VERIFY_COLUMNS = ("schema_version", "operator", "n", "L", "eps", "side", "level", "residual_sq", "bound_sq", "pass")
BENCH_COLUMNS = (
    "schema_version", "operator", "n", "L", "eps", "max_rank", "error", "nnz", "bytes",
    "mem_ratio", "matvec_cols", "predicted_cols", "time_s",
)
COMM_COLUMNS = ("schema_version",) + layout.COMM_COLUMNS + ("sim_exch_vol", "sim_exch_msgs", "sim_a2a_vol", "sim_a2a_msgs")


class UsageError(Exception):
    pass


# ----------------------------------------------------------------------------
# helpers


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(path, columns, rows, append=False):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    new = not (append and path.exists() and path.stat().st_size > 0)
    with open(path, "a" if append and not new else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row.get(c, "")) for c in columns])


def load_run_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from None


def _pick(args, cfg, name, default=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(name, default)


def operator_config(args, cfg, need_L: bool = True) -> dict:
    """Operator mapping from the config file, with command-line overrides."""
    op = dict(cfg.get("operator", {}))
    if getattr(args, "operator", None):
        op["type"] = args.operator
    for key in ("n", "r", "kappa", "k0"):
        v = getattr(args, key, None)
        if v is not None:
            op[key] = v
    if not op.get("type"):
        raise UsageError("no operator given: use --config with an 'operator' entry or --operator")
    if op["type"] == "synthetic" and need_L:
        L = _pick(args, cfg, "L")
        if L is None:
            raise UsageError("synthetic operators need --L")
        op.setdefault("L", L)
    if op["type"] == "synthetic":
        op.setdefault("r", 4)
    op.setdefault("seed", _pick(args, cfg, "seed", 0))
    return op


def build_problem(op_cfg: dict, L, dense_cap: int):
    """``(operator, tree_t, tree_s, ground_truth, label)``."""
    op, truth = operators.build_operator(op_cfg, dense_cap)
    if truth is not None:
        return op, truth.tree_t, truth.tree_s, truth, op_cfg["type"]
    m, n = op.shape
    if L is None:
        L = auto_levels(min(m, n))
    if op.points_t is None or op.points_s is None:
        return op, uniform_tree(m, L), uniform_tree(n, L), None, op_cfg["type"]
    return op, build_tree(op.points_t, L), build_tree(op.points_s, L), None, op_cfg["type"]


def recon_config(args, cfg, eps=None) -> ReconstructionConfig:
    return ReconstructionConfig(
        eps=float(eps if eps is not None else _pick(args, cfg, "eps", 1e-6)),
        oversample=int(_pick(args, cfg, "oversample", 2)),
        r0=int(_pick(args, cfg, "r0", 4)),
        lm=cfg.get("lm"),
        seed=int(_pick(args, cfg, "seed", 0)),
        cap=cfg.get("cap"),
        transfer_rank=cfg.get("transfer_rank", "child_sum"),
        truncation=cfg.get("truncation", "tail"),
        threads=int(_pick(args, cfg, "threads", 1)),
    )


def _out_dir(args, cfg) -> Path:
    out = Path(_pick(args, cfg, "out", "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = load_run_config(args.config)
    L = _pick(args, cfg, "L")
    r = _pick(args, cfg, "r", 4)
    seed = int(_pick(args, cfg, "seed", 0))
    if L is None:
        raise UsageError("synth needs --L")
    try:
        spec = operators.SyntheticButterflySpec(int(L), int(r), seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    bf, _ = operators.synth_butterfly(spec)
    out = _out_dir(args, cfg)
    name = f"synthetic_L{spec.L}_r{spec.r}_s{seed}.hbf"
    bfm.serialize(bf, out / name)
    manifest = {"type": "synthetic", "n": spec.n, "L": spec.L, "r": spec.r, "seed": seed, "container": name}
    manifest.update({k: v for k, v in bfm.summary(bf).items() if k in ("nnz", "bytes", "max_rank")})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(json.dumps(manifest, sort_keys=True))
    return 0


def _run_factorization(args, cfg):
    op_cfg = operator_config(args, cfg)
    dense_cap = int(_pick(args, cfg, "dense_cap", operators.DENSE_N_CAP))
    op, tt, ts, truth, label = build_problem(op_cfg, _pick(args, cfg, "L"), dense_cap)
    rc = recon_config(args, cfg)
    t0 = time.perf_counter()
    bf, log = factorize(op, tt, ts, rc)
    elapsed = time.perf_counter() - t0
    err = estimate_error(op, bf, 16, rc.seed)
    return op, bf, log, err, elapsed, label, rc


def cmd_factorize(args) -> int:
    cfg = load_run_config(args.config)
    op, bf, log, err, elapsed, label, rc = _run_factorization(args, cfg)
    out = _out_dir(args, cfg)
    bfm.serialize(bf, out / "factorization.hbf")
    (out / "factorization_log.json").write_text(log.to_json() + "\n")
    mem = bfm.memory_report(bf)
    row = {
        "schema_version": SCHEMA_VERSION,
        "operator": label,
        "n": op.shape[1],
        "L": bf.L,
        "eps": rc.eps,
        "max_rank": bf.max_rank(),
        "error": err,
        "nnz": mem["nnz"],
        "bytes": mem["bytes"],
        "matvec_cols": log.total_cols,
        "time_s": round(elapsed, 6),
    }
    if args.csv:
        write_csv(args.csv, FACTORIZE_COLUMNS, [row], append=True)
    print(" ".join(f"{k}={_fmt(row[k])}" for k in FACTORIZE_COLUMNS[1:]))
    limit = args.max_error
    if limit is not None and not err <= limit:
        print(f"FAIL: error {err:.3e} exceeds {limit:.3e}", file=sys.stderr)
        return 1
    return 0


def cmd_verify(args) -> int:
    cfg = load_run_config(args.config)
    op, bf, log, err, elapsed, label, rc = _run_factorization(args, cfg)
    dense_cap = int(_pick(args, cfg, "dense_cap", operators.DENSE_N_CAP))
    A = operators.dense_of(op, dense_cap)
    eps = args.bound_eps if args.bound_eps is not None else rc.eps
    report = theorem_report(A, bf, eps)
    rows = []
    for rec in report:
        rows.append({"schema_version": SCHEMA_VERSION, "operator": label, "n": op.shape[1], "L": bf.L, "eps": eps, **rec})
        status = "PASS" if rec["pass"] else "FAIL"
        print(f"{status} {rec['side']:>3} level {rec['level']}: {rec['residual_sq']:.3e} <= {rec['bound_sq']:.3e}")
    if args.csv:
        write_csv(args.csv, VERIFY_COLUMNS, rows)
    ok = all(r["pass"] for r in report)
    print(f"error={err:.3e} max_rank={bf.max_rank()} bounds={'pass' if ok else 'fail'}")
    return 0 if ok else 1


def _fit_slope(x, y) -> float:
    if len(x) < 2:
        return float("nan")
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])


def cmd_bench(args) -> int:
    cfg = load_run_config(args.config)
    sweep = dict(cfg.get("sweep", {}))
    for key in ("Ls", "ns", "epss"):
        v = getattr(args, key)
        if v is not None:
            sweep[key[:-1]] = v
    base = operator_config(args, cfg, need_L=False)
    kind = base["type"]
    if kind == "synthetic":
        grid = sweep.get("L")
        if not grid:
            raise UsageError("synthetic sweeps need a nonempty --Ls list")
        points = [{**base, "L": int(L)} for L in grid]
    else:
        grid = sweep.get("n")
        if not grid:
            raise UsageError("this operator needs a nonempty --ns list")
        points = [{**base, "n": int(n)} for n in grid]
    eps_list = sweep.get("eps") or [float(_pick(args, cfg, "eps", 1e-6))]
    if not eps_list:
        raise UsageError("empty eps list")
    dense_cap = int(_pick(args, cfg, "dense_cap", operators.DENSE_N_CAP))
    rows = []
    for eps in eps_list:
        for pt in points:
            op, tt, ts, truth, label = build_problem(pt, _pick(args, cfg, "L"), dense_cap)
            rc = recon_config(args, cfg, eps)
            t0 = time.perf_counter()
            bf, log = factorize(op, tt, ts, rc)
            elapsed = time.perf_counter() - t0
            err = estimate_error(op, bf, 16, rc.seed)
            mem = bfm.memory_report(bf)
            n = op.shape[1]
            pred = ""
            if truth is not None:
                pred = predicted_transfer_cols(bf.L, bf.lm, pt["r"], rc.oversample, rc.transfer_rank) + log.leaf_cols
            rows.append({
                "schema_version": SCHEMA_VERSION,
                "operator": label,
                "n": n,
                "L": bf.L,
                "eps": float(eps),
                "max_rank": bf.max_rank(),
                "error": err,
                "nnz": mem["nnz"],
                "bytes": mem["bytes"],
                "mem_ratio": mem["nnz"] / (n * math.log2(n)),
                "matvec_cols": log.total_cols,
                "predicted_cols": pred,
                "time_s": round(elapsed, 6),
            })
            print(" ".join(f"{k}={_fmt(rows[-1][k])}" for k in BENCH_COLUMNS[1:]))
    ok = True
    fits = {}
    for eps in eps_list:
        sel = [r for r in rows if r["eps"] == float(eps)]
        ns = [r["n"] for r in sel]
        ratios = [r["mem_ratio"] for r in sel]
        fits[repr(float(eps))] = {
            "mem_over_nlogn_slope": _fit_slope(ns, ratios),
            "matvec_over_sqrt_n_slope": _fit_slope(ns, [r["matvec_cols"] / math.sqrt(r["n"]) for r in sel]),
            "mem_ratio_spread": max(ratios) / min(ratios),
        }
        if args.check:
            if fits[repr(float(eps))]["mem_ratio_spread"] > 1.5:
                ok = False
            if any(r["predicted_cols"] != "" and r["predicted_cols"] != r["matvec_cols"] for r in sel):
                ok = False
    if args.csv:
        write_csv(args.csv, BENCH_COLUMNS, rows)
        Path(args.csv).with_suffix(".fit.json").write_text(json.dumps(fits, indent=2, sort_keys=True) + "\n")
    print(json.dumps(fits, sort_keys=True))
    if not ok:
        print("FAIL: scaling checks did not hold", file=sys.stderr)
    return 0 if ok else 1


def cmd_comm(args) -> int:
    cfg = load_run_config(args.config)
    Ls = args.Ls or cfg.get("sweep", {}).get("L") or ([args.L] if args.L is not None else None)
    if not Ls:
        raise UsageError("comm needs --Ls (or --L)")
    kinds = args.kinds or list(layout.KINDS)
    r = args.r if args.r is not None else cfg.get("r", 2)
    rows = []
    ok = True
    for L in Ls:
        ps = args.ps or cfg.get("sweep", {}).get("p") or [2**q for q in range(L + 1)]
        bf = operators.synth_butterfly(operators.SyntheticButterflySpec(L, r, int(_pick(args, cfg, "seed", 0))))[0] if args.simulate else None
        for kind in kinds:
            for p in ps:
                if p > 2**L:
                    continue
                try:
                    spec = layout.LayoutSpec(int(p), kind, int(L), int(r))
                except ValueError as exc:
                    raise UsageError(str(exc)) from None
                model = layout.comm_cost(spec)
                row = {"schema_version": SCHEMA_VERSION, **layout.comm_row(spec, model)}
                if bf is not None:
                    X = np.ones((bf.shape[1], 1))
                    _, sim, _ = layout.simulated_parallel_apply(bf, X, spec, threads=_pick(args, cfg, "threads", 1))
                    row.update(
                        sim_exch_vol=sim.exchange_volume,
                        sim_exch_msgs=sim.exchange_msgs,
                        sim_a2a_vol=sim.alltoall_volume,
                        sim_a2a_msgs=sim.alltoall_msgs,
                    )
                    if sim != model:
                        ok = False
                        print(f"MISMATCH {kind} L={L} p={p}: model {model} simulated {sim}", file=sys.stderr)
                rows.append(row)
    if args.csv:
        write_csv(args.csv, COMM_COLUMNS, rows)
    w = csv.writer(sys.stdout, lineterminator="\n")
    cols = COMM_COLUMNS if args.simulate else ("schema_version",) + layout.COMM_COLUMNS
    w.writerow(cols)
    for row in rows:
        w.writerow([_fmt(row.get(c, "")) for c in cols])
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    try:
        hdr = bfm.inspect_header(args.container)
        if not args.dump:
            print(json.dumps({k: v for k, v in hdr.items() if k != "tag"}, sort_keys=True))
            return 0
        bf = bfm.deserialize(args.container)
    except (bfm.ButterflyFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(bfm.summary(bf), sort_keys=True))
    factors = bfm.assembled_factors(bf)
    names = ["U"] + [f"R{l}" for l in range(bf.L - 1, bf.lm - 1, -1)] + ["B"] + [f"W{l}" for l in range(bf.lm, 0, -1)] + ["V"]
    for name, F in zip(names, factors):
        print(f"{name}: {F.shape[0]}x{F.shape[1]} nnz={F.nnz}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for i, (name, F) in enumerate(zip(names, factors)):
            scipy.sparse.save_npz(out / f"factor_{i:02d}_{name}.npz", F)
    return 0


# ----------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--eps", type=float)
    p.add_argument("--L", type=int)
    p.add_argument("--r0", type=int)
    p.add_argument("--oversample", type=int)
    p.add_argument("--dense-cap", dest="dense_cap", type=int)
    p.add_argument("--csv", help="CSV output path")


def _operator_flags(p: argparse.ArgumentParser):
    p.add_argument("--operator", choices=("synthetic", "helmholtz3d", "scattering2d", "dense", "container"))
    p.add_argument("--n", type=int, help="points per surface / segments")
    p.add_argument("--r", type=int, help="rank of synthetic operators")
    p.add_argument("--kappa", type=float)
    p.add_argument("--k0", type=float)


def _positive_list(kind):
    def parse(text):
        vals = [kind(v) for v in text.split(",") if v.strip()]
        if not vals:
            raise argparse.ArgumentTypeError("list must not be empty")
        return vals

    return parse


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvbutterfly", description="Matrix-free hybrid butterfly factorization")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic exact butterfly")
    _common(p)
    p.add_argument("--r", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("factorize", help="reconstruct a butterfly from an operator")
    _common(p)
    _operator_flags(p)
    p.add_argument("--max-error", dest="max_error", type=float, help="fail if the estimated error exceeds this")
    p.set_defaults(func=cmd_factorize)

    p = sub.add_parser("verify", help="check block error bounds with a dense oracle")
    _common(p)
    _operator_flags(p)
    p.add_argument("--bound-eps", dest="bound_eps", type=float, help="tolerance used in the bounds (default: --eps)")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="scaling sweep")
    _common(p)
    _operator_flags(p)
    p.add_argument("--Ls", type=_positive_list(int), help="comma-separated level list (synthetic)")
    p.add_argument("--ns", type=_positive_list(int), help="comma-separated size list")
    p.add_argument("--epss", type=_positive_list(float), help="comma-separated tolerance list")
    p.add_argument("--check", action="store_true", help="fail unless the memory and matvec checks hold")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("comm", help="communication cost table")
    _common(p)
    p.add_argument("--Ls", type=_positive_list(int))
    p.add_argument("--ps", type=_positive_list(int))
    p.add_argument("--r", type=int)
    p.add_argument("--kinds", type=lambda s: s.split(","))
    p.add_argument("--simulate", action="store_true", help="cross-check against a simulated product")
    p.set_defaults(func=cmd_comm)

    p = sub.add_parser("inspect", help="show a container header")
    p.add_argument("container")
    p.add_argument("--dump", action="store_true", help="also list (and with --out, save) the assembled factors")
    p.add_argument("--out")
    p.set_defaults(func=cmd_inspect)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        ap.exit(2, f"{ap.prog} {args.command}: error: {exc}\n")
    except (MemoryError, operators.ConditioningError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
