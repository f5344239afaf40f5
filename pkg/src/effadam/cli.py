"""Command line entry point: ``effadam {run,sweep,theory,cases,report}``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import MISSING, asdict, fields, replace
from pathlib import Path

from effadam import experiment as ex
from effadam.node import HyperParams
from effadam.problems import make_case, save_case
from effadam.quantize import parse_kind

DEFAULT_CASES = 20


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    p.add_argument("--seed", type=int, help="sets case_seed and noise_seed unless given explicitly")
    g = p.add_argument_group("RunConfig overrides")
    for f in fields(ex.RunConfig):
        default = f.default if f.default is not MISSING else None
        if f.name == "error_feedback":
            typ = _bool
        elif isinstance(default, bool):
            typ = _bool
        elif isinstance(default, int):
            typ = int
        elif isinstance(default, float):
            typ = float
        else:
            typ = str
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=typ, default=None)


def _config(args) -> ex.RunConfig:
    data = asdict(ex.RunConfig())
    if args.config is not None:
        with open(args.config) as fh:
            data.update(json.load(fh))
    if args.seed is not None:
        data["case_seed"] = data["noise_seed"] = args.seed
    for f in fields(ex.RunConfig):
        val = getattr(args, "cfg_" + f.name)
        if val is not None:
            data[f.name] = val
    return ex.config_from_dict(data)


def cmd_run(args) -> int:
    cfg = _config(args)
    if args.trace is not None:
        with open(args.trace, "w") as fh:
            res = ex.run_reference(cfg, on_round=lambda tr, _: fh.write(tr.to_line() + "\n"))
    else:
        res = ex.run(cfg, engine=args.engine)
    if args.out is None or str(args.out) == "-":
        ex.write_csv([res], sys.stdout)
    else:
        with open(args.out, "w", newline="") as fh:
            ex.write_csv([res], fh)
    if args.plot_dir is not None:
        from effadam.report import render

        render(list(res), args.plot_dir, stem=cfg.run_id)
    return 0


def _parse_alphas(text: str) -> list[float]:
    if text == "full":
        return list(ex.FULL_ALPHA_GRID)
    return [float(a) for a in text.split(",") if a]


def _case_seeds(args) -> list[int]:
    if args.case_seeds:
        return [int(s) for s in args.case_seeds.split(",") if s]
    return list(range(args.cases))


def cmd_sweep(args) -> int:
    base = _config(args)
    algos = args.algos.split(",")
    alphas = _parse_alphas(args.alphas)
    seeds = _case_seeds(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bases = [replace(base, algo=a) for a in algos]
    start = time.time()
    results = ex.grid_search_many(
        bases, alphas, seeds, progress=lambda cs: print(f"case {cs} done ({time.time() - start:.0f}s)", file=sys.stderr)
    )
    with open(out / "selection.csv", "w", newline="") as fh:
        fh.write("algo,alpha,mean_final_grad_norm_sq,median_final_grad_norm_sq,selected\n")
        for algo, gr in zip(algos, results):
            for a, mean_f, med_f in gr.table:
                fh.write(f"{algo},{a!r},{mean_f!r},{med_f!r},{int(a == gr.best_alpha)}\n")
    with open(out / "metrics.csv", "w", newline="") as fh:
        ex.write_csv([r for gr in results for r in gr.best.runs], fh)
    for algo, gr in zip(algos, results):
        print(f"{algo}: alpha={gr.best_alpha!r} median_final={gr.best.median_final!r} mean_final={gr.best.mean_final!r}")
    if not args.no_plots:
        from effadam.report import render

        rows = [row for gr in results for r in gr.best.runs for row in r]
        for p in render(rows, out):
            print(f"wrote {p}")
    return 0


def cmd_theory(args) -> int:
    from effadam.theory import TheoryInputs, constants

    h = HyperParams(
        alpha=args.alpha, beta=args.beta, theta=args.theta, epsilon=args.epsilon, T=args.T, schedule="horizon"
    )
    G, L, F_gap = args.G, args.L, args.F_gap
    if args.case is not None and None in (G, L, F_gap):
        emp = ex.empirical_constants(ex.RunConfig(case_seed=args.case, noise_seed=args.case, d=args.d, N=args.N))
        G = G if G is not None else emp.G
        L = L if L is not None else emp.L
        F_gap = F_gap if F_gap is not None else emp.F_gap
        print("# G measured along a full-precision run (empirical)")
    if None in (G, L, F_gap):
        print("theory: give --G, --L and --F-gap, or --case to measure them", file=sys.stderr)
        return 2
    inp = TheoryInputs.from_kinds(G, L, F_gap, args.d, h, parse_kind(args.uplink), parse_kind(args.downlink), args.N)
    rep = constants(inp, args.eps, args.variant)
    print(f"G = {G!r}\nL = {L!r}\nF_gap = {F_gap!r}")
    for line in rep.lines():
        print(line)
    print()
    print("name,value")
    for line in rep.lines():
        name, value = line.split(" = ")
        print(f"{name},{value}")
    return 0


def cmd_cases(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.csv", "w", newline="") as fh:
        fh.write("case_seed,d,noise_variance,file\n")
        for seed in _case_seeds(args):
            path = save_case(make_case(seed, args.d), out / f"case_{seed:03d}.npz")
            fh.write(f"{seed},{args.d},0.1,{path.name}\n")
            print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    from effadam.report import render

    rows = []
    for path in args.csv:
        with open(path, newline="") as fh:
            rows.extend(ex.read_csv(fh))
    for p in render(rows, args.out_dir, stem=args.stem):
        print(f"wrote {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="effadam", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="one config -> metrics CSV")
    _add_config_flags(p)
    p.add_argument("--engine", choices=("lockstep", "reference"), default="lockstep")
    p.add_argument("--out", type=Path, help="CSV path (default stdout)")
    p.add_argument("--trace", type=Path, help="also write a JSON-lines message trace (reference engine)")
    p.add_argument("--plot-dir", type=Path, help="render PNG figures here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="grid-search alpha per algorithm over cases")
    _add_config_flags(p)
    p.add_argument("--algos", default="Ours_full,Ours_com1,Ours_com1_err,Ours_com2,Dadam_terngrad")
    p.add_argument("--alphas", default="full", help="comma list, or 'full' for 1e-5, 2e-5, ..., 100e-5")
    p.add_argument("--cases", type=int, default=DEFAULT_CASES)
    p.add_argument("--case-seeds", help="comma list of case seeds (overrides --cases)")
    p.add_argument("--out-dir", default="sweep_out")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("theory", help="print the convergence constants and bounds")
    p.add_argument("--G", type=float)
    p.add_argument("--L", type=float)
    p.add_argument("--F-gap", dest="F_gap", type=float)
    p.add_argument("--case", type=int, help="measure G, L and F_gap on this toy case")
    p.add_argument("--d", type=int, default=500)
    p.add_argument("--N", type=int, default=10)
    p.add_argument("--alpha", type=float, default=1e-3)
    p.add_argument("--beta", type=float, default=0.9)
    p.add_argument("--theta", type=float, default=0.99)
    p.add_argument("--epsilon", type=float, default=1e-8)
    p.add_argument("--T", type=int, default=5000)
    p.add_argument("--uplink", default="loggrid:-17:-11")
    p.add_argument("--downlink", default="loggrid:-17:-11")
    p.add_argument("--eps", type=float, default=1.0, help="target squared gradient norm")
    p.add_argument("--variant", choices=("general", "half_delta"), default="general")
    p.set_defaults(func=cmd_theory)

    p = sub.add_parser("cases", help="generate and save the toy cases")
    p.add_argument("--cases", type=int, default=DEFAULT_CASES)
    p.add_argument("--case-seeds")
    p.add_argument("--d", type=int, default=500)
    p.add_argument("--out-dir", default="cases")
    p.set_defaults(func=cmd_cases)

    p = sub.add_parser("report", help="render figures from metrics CSVs")
    p.add_argument("csv", nargs="+", type=Path)
    p.add_argument("--out-dir", type=Path, default=Path("figures"))
    p.add_argument("--stem", default="grad_norm")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ex.ConfigError, ValueError) as exc:
        print(f"effadam: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
