"""
Command-line interface.

Exit codes: 0 success, 2 usage error, 3 input format error, 4 when
``--require-certified`` is given and the solve is not certified.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .bcd import BcdConfig, estimate_moi
from .core import (
    CapacityError,
    DimensionError,
    Measurement,
    NoiseModel,
    ProblemDims,
    StrainMatrix,
    forward,
)
from .evaluation import (
    BenchmarkSpec,
    add_noise,
    error_vs_w_map,
    run_benchmark,
    sample_ground_truth,
)
from .io import (
    FormatError,
    format_result,
    format_table,
    ingest_read_counts,
    parse_counts_file,
    read_matrix,
    read_vector,
    write_matrix,
    write_table,
    write_vector,
)
from .miqp import solve_global
from .posterior import entropy_map, posterior_stats

log = logging.getLogger("strainsolve")

EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_UNCERTIFIED = 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# helpers


def _gamma_list(text: str) -> List[float]:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not vals or any(not v > 0 for v in vals):
        raise argparse.ArgumentTypeError("noise levels must be > 0")
    return vals


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _load_measurement(args, n: int) -> Measurement:
    data = read_vector(args.input)
    if data.size % (args.p - 1):
        raise FormatError(f"{data.size} values cannot be split into blocks of p-1 = {args.p - 1}", args.input)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        d = Measurement.from_array(data, n, args.p)
    for w in caught:
        log.warning("%s", w.message)
    return d


def _emit(args, fields, blocks, kind: str) -> Optional[Path]:
    text = format_result(fields, blocks, args.format, not args.no_timestamp, kind)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        return out
    sys.stdout.write(text)
    return None


def _figure_path(args, out: Optional[Path], suffix: str = "") -> Optional[Path]:
    if args.no_figures or out is None:
        return None
    return out.with_name(out.stem + suffix + ".png")


def _bcd_config(args) -> BcdConfig:
    return BcdConfig(
        n_trials=args.trials,
        tol_w=args.tol_w,
        max_iters=args.max_iters,
        rng_seed=0 if args.seed is None else args.seed,
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_reconstruct(args) -> int:
    d = _load_measurement(args, args.n)
    noise = NoiseModel.uniform(args.gamma, d.dims.q)
    fields = {"method": args.method, "m": d.dims.m, "n": d.dims.n, "p": d.dims.p, "gamma": args.gamma}
    nodes = 0
    if args.method == "bcd":
        from .bcd import bcd_map

        modes = bcd_map(d, noise, d.dims, _bcd_config(args))
        rec = modes.best
        fields["modes"] = len(modes.modes)
    else:
        warm = None
        if args.method == "hybrid":
            from .bcd import bcd_map

            warm = bcd_map(d, noise, d.dims, _bcd_config(args)).best
        rep = solve_global(d, noise, d.dims, args.mip_gap, args.node_limit, warm_start=warm)
        rec, nodes = rep.incumbent, rep.nodes_explored
        fields["nodes"] = nodes
    fields.update(
        objective=rec.objective,
        certified=rec.certified,
        gap=rec.gap if rec.gap is not None else float("nan"),
    )
    _emit(args, fields, {"M": rec.matrix.entries, "w": rec.weights.values[None, :]}, "reconstruction")
    if args.require_certified and not rec.certified:
        print("error: the solution is not certified", file=sys.stderr)
        return EXIT_UNCERTIFIED
    return 0


def cmd_posterior(args) -> int:
    d = _load_measurement(args, args.n)
    noise = NoiseModel.uniform(args.gamma, d.dims.q)
    st = posterior_stats(d, noise, d.dims, args.nodes, args.seed)
    fields = {"m": d.dims.m, "n": d.dims.n, "p": d.dims.p, "gamma": args.gamma, "nodes": st.node_count}
    if args.seed is not None:
        fields["seed"] = args.seed
    blocks = {
        "M_mean": st.M_mean,
        "M_std": st.M_std,
        "w_mean": st.w_mean[None, :],
        "w_std": st.w_std[None, :],
    }
    out = _emit(args, fields, blocks, "posterior")
    fig = _figure_path(args, out)
    if fig is not None:
        from .plotting import plot_posterior

        plot_posterior(st.M_mean, st.M_std, st.w_mean, st.w_std, fig)
    return 0


def cmd_entropy_map(args) -> int:
    if args.n != 3:
        raise UsageError("entropy maps need --n 3")
    d = _load_measurement(args, 3)
    noise = NoiseModel.uniform(args.gamma, d.dims.q)
    rows = entropy_map(d, noise, d.dims, args.resolution)
    text = format_table(["w1", "w2", "w3", "entropy_bits"], rows)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        fig = _figure_path(args, out)
        if fig is not None:
            from .plotting import plot_entropy_map

            plot_entropy_map(rows, fig)
    else:
        sys.stdout.write(text)
    return 0


def cmd_moi(args) -> int:
    d = _load_measurement(args, 1)
    noise = NoiseModel.uniform(args.gamma, d.dims.q)
    cfg = _bcd_config(args)
    est = estimate_moi(d, noise, n_max=args.n_max, solver=args.method, config=cfg,
                       mip_gap=args.mip_gap, node_limit=args.node_limit)
    bound = float(np.sum(noise.variance))
    print(f"estimated n: {est.n}" + ("" if est.reached else " (noise level not reached)"), file=sys.stderr)
    fields = {"method": args.method, "n": est.n, "reached": est.reached, "bound": bound}
    out = _emit(args, fields, {"discrepancy": np.array(est.discrepancies)[None, :]}, "moi")
    fig = _figure_path(args, out)
    if fig is not None:
        from .plotting import plot_moi

        plot_moi(est.discrepancies, bound, fig)
    return 0


def cmd_synth(args) -> int:
    dims = ProblemDims(args.m, args.n, args.p)
    seed = 0 if args.seed is None else args.seed
    rng = np.random.default_rng(seed)
    M, w = sample_ground_truth(dims, rng)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        clean = Measurement(dims, forward(M, w))
    d = add_noise(clean, NoiseModel.uniform(args.gamma, dims.q), rng)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    note = [f"m={args.m} n={args.n} p={args.p} gamma={args.gamma:g} seed={seed}"]
    write_matrix(f"{prefix}_M.csv", M.entries, note)
    write_vector(f"{prefix}_w.csv", w.values, note)
    write_vector(f"{prefix}_d.csv", d.data, note)
    return 0


def load_benchmark_spec(path) -> BenchmarkSpec:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON: {exc.msg}", path, exc.lineno) from None
    if not isinstance(doc, dict):
        raise FormatError("benchmark spec must be a JSON object", path)
    try:
        kw = dict(doc)
        if "cells" in kw:
            kw["cells"] = tuple(ProblemDims(*c) for c in kw["cells"])
        if "gammas" in kw:
            kw["gammas"] = tuple(kw["gammas"])
        if "backends" in kw:
            kw["backends"] = tuple(kw["backends"])
        if "bcd" in kw:
            kw["bcd"] = BcdConfig(**kw["bcd"])
        return BenchmarkSpec(**kw)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid benchmark spec: {exc}", path) from None


def cmd_benchmark(args) -> int:
    spec = load_benchmark_spec(args.spec)
    if args.seed is not None:
        spec = BenchmarkSpec(**{**spec.__dict__, "rng_seed": args.seed})
    res = run_benchmark(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cols = ["m", "n", "p", "gamma", "sample", "backend", "error", "objective", "certified", "gap", "status"]
    rows = [
        [r.dims.m, r.dims.n, r.dims.p, r.gamma, r.sample, r.backend, r.error, r.objective,
         "true" if r.certified else "false", r.gap, r.status.replace(",", ";")]
        for r in res.rows
    ]
    write_table(out / "rows.csv", cols, rows)
    qs = sorted(res.summaries[0].quantiles) if res.summaries else []
    scols = ["m", "n", "p", "gamma", "backend", "mean"] + [f"q{int(100 * q)}" for q in qs] + [
        "baseline", "failures", "certified_fraction"]
    srows = [
        [s.dims.m, s.dims.n, s.dims.p, s.gamma, s.backend, s.mean] + [s.quantiles[q] for q in qs]
        + [s.baseline, s.failures, s.certified_fraction]
        for s in res.summaries
    ]
    write_table(out / "summary.csv", scols, srows)
    if not args.no_figures:
        from .plotting import plot_sorted_errors

        for ci, dims in enumerate(spec.cells):
            curves = {
                f"{s.backend}, gamma={s.gamma:g}": s.sorted_errors for s in res.summaries if s.dims == dims
            }
            name = f"sorted_errors_m{dims.m}_n{dims.n}_p{dims.p}.png"
            plot_sorted_errors(curves, res.baselines[ci], f"m={dims.m}, n={dims.n}, p={dims.p}", out / name)
    return 0


def cmd_ingest(args) -> int:
    records = parse_counts_file(args.counts)
    res = ingest_read_counts(records, args.min_depth)
    for idx, reason in res.dropped:
        print(f"dropped site {idx + 1}: {reason}", file=sys.stderr)
    if res.measurement is None:
        raise FormatError("no usable sites", args.counts)
    comments = [f"sites: {','.join(records[i].site_id for i in res.kept)}", f"p={res.measurement.dims.p}"]
    write_vector(args.out, res.measurement.data, comments)
    return 0


def cmd_error_map(args) -> int:
    E = read_matrix(args.truth_matrix)
    try:
        M = StrainMatrix.from_array(E, args.p)
    except ValueError as exc:
        raise FormatError(str(exc), args.truth_matrix) from None
    if M.dims.n != 3:
        raise UsageError("error maps need a truth matrix with 3 columns")
    cfg = BcdConfig(n_trials=args.trials, tol_w=args.tol_w, max_iters=args.max_iters, rng_seed=0)
    seed = 0 if args.seed is None else args.seed
    maps = error_vs_w_map(M, args.gamma, args.resolution, seed, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for gamma, rows in maps.items():
        write_table(out / f"error_map_gamma{gamma:g}.csv", ["w1", "w2", "w3", "error"], rows)
    if not args.no_figures:
        from .plotting import plot_error_maps

        plot_error_maps(maps, out / "error_map.png")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed")
    common.add_argument("--format", choices=("text", "json"), default="text", help="result file format")
    common.add_argument("--no-timestamp", action="store_true", help="omit the creation time line")
    common.add_argument("--no-figures", action="store_true", help="do not render PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--input", required=True, help="measurement vector file")
    data.add_argument("--p", type=int, default=2, help="classes per site")
    data.add_argument("--gamma", type=_positive_float, required=True, help="noise standard deviation")
    data.add_argument("--out", default=None, help="output file (default: standard output)")

    solver = argparse.ArgumentParser(add_help=False)
    solver.add_argument("--trials", type=int, default=20)
    solver.add_argument("--tol-w", type=float, default=1e-3)
    solver.add_argument("--max-iters", type=int, default=10)
    solver.add_argument("--mip-gap", type=_positive_float, default=1e-6)
    solver.add_argument("--node-limit", type=int, default=10**6)

    parser = argparse.ArgumentParser(prog="strainsolve", description="Strain deconvolution from mixed samples.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconstruct", parents=[common, data, solver], help="MAP estimate of (M, w)")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--method", choices=("bcd", "global", "hybrid"), default="bcd")
    p.add_argument("--require-certified", action="store_true")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("posterior", parents=[common, data], help="conditional means and standard deviations")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--nodes", type=int, default=10_000)
    p.set_defaults(func=cmd_posterior)

    p = sub.add_parser("entropy-map", parents=[common, data], help="entropy of M over a grid of w (n = 3)")
    p.add_argument("--n", type=int, default=3)
    p.add_argument("--resolution", type=int, default=100)
    p.set_defaults(func=cmd_entropy_map)

    p = sub.add_parser("moi", parents=[common, data, solver], help="estimate the number of strains")
    p.add_argument("--n-max", type=int, default=6)
    p.add_argument("--method", choices=("bcd", "global", "hybrid"), default="bcd")
    p.set_defaults(func=cmd_moi)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic instance")
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--gamma", type=_positive_float, required=True)
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("benchmark", parents=[common], help="run a benchmark spec (JSON)")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("ingest", parents=[common], help="read counts to a measurement vector")
    p.add_argument("--counts", required=True)
    p.add_argument("--min-depth", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("error-map", parents=[common], help="reconstruction error over w for a fixed M (n = 3)")
    p.add_argument("--truth-matrix", required=True)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--gamma", type=_gamma_list, required=True, help="comma-separated noise levels")
    p.add_argument("--resolution", type=int, default=60)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol-w", type=float, default=1e-3)
    p.add_argument("--max-iters", type=int, default=10)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_error_map)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except (DimensionError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
