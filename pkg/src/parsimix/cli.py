"""Command-line interface: fit, repca, reduce, simulate.

Exit codes: 0 on success (a singular fit is a finding, not a failure),
1 for formula/data/configuration errors, 2 for hard fitting errors (the
JSON report is still written when requested).
"""

from __future__ import annotations

import argparse
import json

import sys
import time

from . import __version__
from .data import DataError, ingest_csv
from .design import ContrastScheme, DesignError, build_model_matrices
from .fitter import FitError, default_budget, optimize
from .formula import FormulaError, parse_formula
from .inference import InferenceError
from .repca import re_pca
from .report import (
    build_report,
    contrasts_dict,
    dataset_info,
    render_fixef,
    render_repca,
    render_sd_cor,
    render_trace,
    trace_payload,
    write_json,
    write_plot_csvs,
)
from .selection import SelectionConfig, run_workflow
from .simulate import (
    SimulationError,
    simulate_lmm,
    truth_spec_from_dict,
    truth_spec_to_dict,
    write_dataset_csv,
)

DEFAULT_SEED = 20150206  # fixed, so published commands reproduce exactly


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", required=True, help="input CSV (header row required)")
    p.add_argument("--formula", required=True, help="model formula, e.g. 'y ~ 1 + a + (1+a|subj)'")
    p.add_argument("--factor", action="append", default=[], metavar="NAME",
                   help="force column NAME to be read as a factor")
    p.add_argument("--numeric", action="append", default=[], metavar="NAME",
                   help="force column NAME to be read as numeric")
    p.add_argument("--contrasts", choices=["sum", "treatment"], default="sum",
                   help="default contrast coding for factors (default: sum)")
    p.add_argument("--contrast-factor", action="append", default=[], metavar="NAME=KIND",
                   help="per-factor contrast override, e.g. 'cond=treatment'")


def _add_fit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--criterion", choices=["ml", "reml"], default="reml")
    p.add_argument("--optimizer", choices=["nelder-mead", "cobyqa"], default="nelder-mead")
    p.add_argument("--budget", type=int, default=None,
                   help="deviance evaluation budget (default: max(10*n_theta^2, 2000))")


def _add_output_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--json", metavar="PATH", help="write the JSON report here")
    p.add_argument("--plot-csv", metavar="PREFIX", help="write tidy plot CSVs with this prefix")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED,
                   help="seed recorded in the report (and used by simulate)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="parsimix",
        description="Linear mixed models for crossed random effects, with "
        "overparameterization diagnostics and automated model reduction.",
    )
    parser.add_argument("--version", action="version", version=f"parsimix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit one model and summarize it")
    _add_data_args(p_fit)
    _add_fit_args(p_fit)
    _add_output_args(p_fit)

    p_repca = sub.add_parser("repca", help="fit a model and report its random-effects PCA")
    _add_data_args(p_repca)
    _add_fit_args(p_repca)
    p_repca.add_argument("--dim-tol", type=float, default=1e-4,
                         help="tolerance on 'all of the variance' (default 1e-4)")
    _add_output_args(p_repca)

    p_reduce = sub.add_parser("reduce", help="run the full reduction workflow")
    _add_data_args(p_reduce)
    p_reduce.add_argument("--criterion", choices=["ml", "reml"], default="reml")
    p_reduce.add_argument("--optimizer", choices=["nelder-mead", "cobyqa"], default="cobyqa")
    p_reduce.add_argument("--budget", type=int, default=None)
    p_reduce.add_argument("--alpha", type=float, default=0.05)
    p_reduce.add_argument("--dim-tol", type=float, default=1e-4)
    p_reduce.add_argument("--corr-prune-threshold", type=float, default=0.15)
    p_reduce.add_argument("--max-steps", type=int, default=40)
    p_reduce.add_argument("--maximal-budget", type=int, default=300,
                          help="evaluation budget for the maximal-model probe")
    _add_output_args(p_reduce)

    p_sim = sub.add_parser("simulate", help="generate a CSV dataset from a truth spec")
    p_sim.add_argument("--spec", required=True, metavar="JSON",
                       help="truth specification file")
    p_sim.add_argument("--out", required=True, metavar="CSV", help="output dataset path")
    p_sim.add_argument("--json", metavar="PATH", help="write the JSON report here")
    p_sim.add_argument("--seed", type=int, default=None,
                       help="override the seed in the spec file")
    return parser


def _contrasts_from_args(args) -> ContrastScheme:
    per_factor = {}
    for item in args.contrast_factor:
        if "=" not in item:
            raise DesignError(f"bad --contrast-factor {item!r}; expected NAME=KIND")
        name, kind = item.split("=", 1)
        per_factor[name.strip()] = kind.strip()
    return ContrastScheme(default=args.contrasts, per_factor=per_factor)


def _load(args) -> tuple:
    dataset = ingest_csv(args.data, factors=tuple(args.factor), numerics=tuple(args.numeric))
    formula = parse_formula(args.formula)
    contrasts = _contrasts_from_args(args)
    return dataset, formula, contrasts


def _finish(args, report: dict, text: str, exit_code: int = 0) -> int:
    print(text)
    if getattr(args, "json", None):
        write_json(report, args.json)
        print(f"report written to {args.json}")
    if getattr(args, "plot_csv", None):
        for path in write_plot_csvs(report, args.plot_csv):
            print(f"plot data written to {path}")
    return exit_code


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    dataset, formula, contrasts = _load(args)
    config = {
        "criterion": args.criterion,
        "contrasts": contrasts_dict(contrasts),
        "optimizer": args.optimizer,
        "budget": args.budget,
        "seed": args.seed,
    }
    mm = build_model_matrices(formula, dataset, contrasts)
    try:
        fit = optimize(mm, criterion=args.criterion, budget=args.budget,
                       method=args.optimizer)
    except FitError as exc:
        report = build_report("fit", config, dataset_info(dataset, args.data),
                              timing_seconds=time.perf_counter() - t0)
        print(f"error: {exc}", file=sys.stderr)
        if args.json:
            write_json(report, args.json)
        return 2
    repca_pair = (re_pca(fit), 1e-4) if mm.blocks else None
    report = build_report(
        "fit", config, dataset_info(dataset, args.data), fit=fit, repca=repca_pair,
        timing_seconds=time.perf_counter() - t0,
    )
    lines = [render_fixef(report["fit"]), "", render_sd_cor(report["fit"])]
    state = []
    if not fit.converged:
        state.append("fit did NOT converge within its budget")
    if fit.singular:
        state.append(
            "fit is singular: one or more random-effect directions carry no "
            "variance (see the repca table for dimensionality)"
        )
    if state:
        lines.append("")
        lines.extend(f"warning: {s}" for s in state)
    if repca_pair is not None and fit.singular:
        lines.append("")
        lines.append(render_repca(report["repca"]))
    return _finish(args, report, "\n".join(lines))


def cmd_repca(args) -> int:
    t0 = time.perf_counter()
    dataset, formula, contrasts = _load(args)
    config = {
        "criterion": args.criterion,
        "contrasts": contrasts_dict(contrasts),
        "optimizer": args.optimizer,
        "budget": args.budget,
        "dim_tol": args.dim_tol,
        "seed": args.seed,
    }
    mm = build_model_matrices(formula, dataset, contrasts)
    if not mm.blocks:
        print("error: the model has no random effects to decompose", file=sys.stderr)
        return 1
    try:
        fit = optimize(mm, criterion=args.criterion, budget=args.budget,
                       method=args.optimizer)
    except FitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    result = re_pca(fit, tol=args.dim_tol)
    report = build_report(
        "repca", config, dataset_info(dataset, args.data), fit=fit,
        repca=(result, args.dim_tol), timing_seconds=time.perf_counter() - t0,
    )
    return _finish(args, report, render_repca(report["repca"]))


def cmd_reduce(args) -> int:
    t0 = time.perf_counter()
    dataset, formula, contrasts = _load(args)
    sel_config = SelectionConfig(
        alpha=args.alpha,
        dim_tol=args.dim_tol,
        criterion=args.criterion,
        corr_prune_threshold=args.corr_prune_threshold,
        max_steps=args.max_steps,
        method=args.optimizer,
        maximal_budget=args.maximal_budget,
        budget=args.budget,
    )
    config = {
        "contrasts": contrasts_dict(contrasts),
        "seed": args.seed,
        **sel_config.to_dict(),
    }
    try:
        trace = run_workflow(formula, dataset, sel_config, contrasts)
    except FitError as exc:
        report = build_report("reduce", config, dataset_info(dataset, args.data),
                              timing_seconds=time.perf_counter() - t0)
        print(f"error: {exc}", file=sys.stderr)
        if args.json:
            write_json(report, args.json)
        return 2
    report = build_report(
        "reduce", config, dataset_info(dataset, args.data), fit=trace.final_fit,
        trace=trace, timing_seconds=time.perf_counter() - t0,
    )
    text = "\n\n".join(
        [render_trace(trace_payload(trace)), render_fixef(report["fit"]),
         render_sd_cor(report["fit"])]
    )
    return _finish(args, report, text)


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    with open(args.spec, encoding="utf-8") as fh:
        payload = json.load(fh)
    if args.seed is not None:
        payload["seed"] = args.seed
    spec = truth_spec_from_dict(payload)
    dataset = simulate_lmm(spec)
    write_dataset_csv(dataset, args.out)
    config = {"seed": spec.seed, "spec_path": args.spec}
    report = build_report(
        "simulate", config, dataset_info(dataset, args.out),
        simulate={"truth": truth_spec_to_dict(spec), "out": args.out},
        timing_seconds=time.perf_counter() - t0,
    )
    text = f"wrote {dataset.n_rows} rows to {args.out}"
    if args.json:
        write_json(report, args.json)
        text += f"\nreport written to {args.json}"
    print(text)
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "fit": cmd_fit,
        "repca": cmd_repca,
        "reduce": cmd_reduce,
        "simulate": cmd_simulate,
    }
    try:
        return handlers[args.command](args)
    except FormulaError as exc:
        print(f"error: {exc.pointer()}", file=sys.stderr)
        return 1
    except (DataError, DesignError, SimulationError, InferenceError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
