"""Report assembly: one JSON-serializable structure backs all output.

Text tables and plot-ready CSVs are rendered from the same report value
the JSON serializer sees, so the formats cannot drift apart.  Every
tolerance and policy that shaped a result is echoed into the report.
"""

from __future__ import annotations

import json
from dataclasses import asdict
from importlib import resources

import numpy as np

from . import __version__
from .design import ContrastScheme
from .fitter import BOUNDARY_TOL, SINGULAR_TOL, FitResult
from .inference import LRTResult, fixed_effects_table, information_criteria
from .repca import RePCAResult
from .selection import SelectionTrace

SCHEMA_VERSION = 1
SCHEMA_RESOURCE = "report-v1.json"


def _round_trip(value):
    """Make numpy values JSON-friendly."""
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return [_round_trip(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {k: _round_trip(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_round_trip(v) for v in value]
    if isinstance(value, float) and (value != value):  # NaN
        return None
    return value


def fit_payload(fit: FitResult) -> dict:
    aic, bic = information_criteria(fit)
    sd_cor = {}
    for group, summary in fit.covariance_summaries().items():
        sd_cor[group] = {
            "columns": fit.factor_labels(group),
            "sd": list(summary.sd),
            "corr": summary.corr_json(),
            "singular": summary.singular,
        }
    return _round_trip(
        {
            "formula": str(fit.formula),
            "criterion": fit.criterion,
            "deviance": fit.deviance,
            "loglik": fit.loglik,
            "aic": aic,
            "bic": bic,
            "converged": fit.converged,
            "singular": fit.singular,
            "n_evals": fit.n_evals,
            "budget": fit.budget,
            "optimizer": fit.method,
            "n": fit.n,
            "p": fit.p,
            "sigma": fit.sigma,
            "theta": list(fit.theta),
            "boundary_flags": [bool(b) for b in fit.boundary_flags],
            "fixef": [asdict(row) for row in fixed_effects_table(fit)],
            "sd_cor": sd_cor,
        }
    )


def repca_payload(result: RePCAResult, tol: float) -> dict:
    groups = {}
    for name, pca in result.by_group.items():
        groups[name] = {
            "columns": list(pca.labels),
            "singular_values": list(pca.singular_values),
            "proportions": list(pca.proportions),
            "cumulative": list(pca.cumulative),
            "dim": pca.dim,
        }
    return _round_trip({"tol": tol, "groups": groups})


def lrt_payload(lrt: LRTResult) -> dict:
    return _round_trip(
        {
            "chisq": lrt.chisq,
            "df": lrt.df,
            "p_value": lrt.p_value,
            "criterion": lrt.criterion,
            "refit_ml": lrt.refit_ml,
        }
    )


def trace_payload(trace: SelectionTrace) -> dict:
    steps = []
    for step in trace.steps:
        steps.append(
            {
                "index": step.index,
                "action": step.action,
                "formula": step.formula,
                "fit": _round_trip(step.fit_summary),
                "repca_dims": _round_trip(step.repca_dims),
                "lrt": lrt_payload(step.lrt) if step.lrt is not None else None,
                "note": step.note,
            }
        )
    return {
        "config": _round_trip(trace.config.to_dict()),
        "column_mapping": dict(trace.column_mapping),
        "steps": steps,
        "final_formula": str(trace.final_formula),
    }


def build_report(
    command: str,
    config: dict,
    data_info: dict | None = None,
    fit: FitResult | None = None,
    repca: tuple[RePCAResult, float] | None = None,
    lrt: list[LRTResult] | None = None,
    trace: SelectionTrace | None = None,
    simulate: dict | None = None,
    timing_seconds: float | None = None,
) -> dict:
    config = dict(config)
    config.setdefault("singular_tol", SINGULAR_TOL)
    config.setdefault("boundary_tol", BOUNDARY_TOL)
    report = {
        "schema_version": SCHEMA_VERSION,
        "tool": {"name": "parsimix", "version": __version__},
        "command": command,
        "config": _round_trip(config),
        "data": _round_trip(data_info),
        "fit": fit_payload(fit) if fit is not None else None,
        "repca": repca_payload(*repca) if repca is not None else None,
        "lrt": [lrt_payload(t) for t in lrt] if lrt is not None else None,
        "trace": trace_payload(trace) if trace is not None else None,
        "simulate": _round_trip(simulate),
        "timing": {"seconds": timing_seconds} if timing_seconds is not None else None,
    }
    return report


def dataset_info(dataset, path: str | None = None) -> dict:
    info = {
        "n_rows": dataset.n_rows,
        "n_dropped": dataset.n_dropped,
        "schema": dataset.schema(),
        "fingerprint": dataset.fingerprint(),
    }
    if path is not None:
        info["path"] = str(path)
    return info


def contrasts_dict(contrasts: ContrastScheme) -> dict:
    return {"default": contrasts.default, "per_factor": dict(contrasts.per_factor)}


def write_json(report: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_schema() -> dict:
    text = resources.files("parsimix.schemas").joinpath(SCHEMA_RESOURCE).read_text()
    return json.loads(text)


# ---------------------------------------------------------------------------
# Text rendering
# ---------------------------------------------------------------------------


def render_fixef(payload: dict) -> str:
    rows = payload["fixef"]
    width = max(len(r["label"]) for r in rows)
    lines = ["Fixed effects:"]
    lines.append(
        f"  {'term':<{width}}  {'estimate':>12} {'SE':>12} {'t':>8}  {'95% CI':>25}"
    )
    for r in rows:
        ci = f"[{r['ci_lower']:>10.4f}, {r['ci_upper']:>10.4f}]"
        lines.append(
            f"  {r['label']:<{width}}  {r['estimate']:>12.4f} {r['se']:>12.4f} "
            f"{r['t_value']:>8.2f}  {ci:>25}"
        )
    return "\n".join(lines)


def render_sd_cor(payload: dict) -> str:
    lines = ["Random effects:"]
    for group, info in payload["sd_cor"].items():
        flag = "  [singular]" if info["singular"] else ""
        lines.append(f"  {group}:{flag}")
        width = max(len(c) for c in info["columns"])
        for i, (col, sd) in enumerate(zip(info["columns"], info["sd"])):
            corr_part = ""
            if i > 0:
                rs = []
                for j in range(i):
                    r = info["corr"][i][j]
                    rs.append("   n/d" if r is None else f"{r:>6.2f}")
                corr_part = "  " + " ".join(rs)
            lines.append(f"    {col:<{width}}  sd = {sd:>10.4f}{corr_part}")
    lines.append(f"  residual sd = {payload['sigma']:.4f}")
    return "\n".join(lines)


def render_repca(payload: dict) -> str:
    groups = payload["groups"]
    n_comp = max(len(g["cumulative"]) for g in groups.values())
    name_w = max(len(name) for name in groups)
    header = f"  {'':<{name_w}} {'':<10}" + "".join(
        f"{i + 1:>7}" for i in range(n_comp)
    )
    lines = ["Cumulative proportion of variance (per grouping factor):", header]
    for name, info in groups.items():
        cum = "".join(f"{v:>7.2f}" for v in info["cumulative"])
        pad = "       " * (n_comp - len(info["cumulative"]))
        lines.append(f"  {name:<{name_w}} {'cum.prop.':<10}{cum}{pad}  dim={info['dim']}")
    return "\n".join(lines)


def render_trace(payload: dict) -> str:
    lines = ["Reduction trace:"]
    for step in payload["steps"]:
        head = f"  [{step['index']}] {step['action']}: {step['formula']}"
        lines.append(head)
        details = []
        if step["fit"] is not None:
            f = step["fit"]
            state = []
            if not f["converged"]:
                state.append("not converged")
            if f["singular"]:
                state.append("singular")
            state_txt = f" ({', '.join(state)})" if state else ""
            details.append(
                f"deviance={f['deviance']:.3f} evals={f['n_evals']}{state_txt}"
            )
        if step["repca_dims"]:
            dims = ", ".join(f"{g}={d}" for g, d in step["repca_dims"].items())
            details.append(f"dims: {dims}")
        if step["lrt"] is not None:
            t = step["lrt"]
            details.append(
                f"chisq({t['df']}) = {t['chisq']:.2f}, p = {t['p_value']:.3g}"
            )
        if step["note"]:
            details.append(step["note"])
        for d in details:
            lines.append(f"      {d}")
    lines.append(f"  final: {payload['final_formula']}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Plot-ready CSV emission
# ---------------------------------------------------------------------------


def write_plot_csvs(report: dict, prefix: str) -> list[str]:
    """Tidy CSVs for downstream plotting; returns the paths written."""
    import csv

    written = []

    def emit(name: str, header: list[str], rows: list[list]) -> None:
        path = f"{prefix}_{name}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        written.append(path)

    fit = report.get("fit")
    if fit:
        emit(
            "fixef",
            ["term", "estimate", "se", "ci_lower", "ci_upper"],
            [
                [r["label"], r["estimate"], r["se"], r["ci_lower"], r["ci_upper"]]
                for r in fit["fixef"]
            ],
        )
        sd_rows, cor_rows = [], []
        for group, info in fit["sd_cor"].items():
            for col, sd in zip(info["columns"], info["sd"]):
                sd_rows.append([group, col, sd])
            cols = info["columns"]
            for i in range(len(cols)):
                for j in range(i + 1, len(cols)):
                    cor_rows.append([group, cols[i], cols[j], info["corr"][i][j]])
        emit("sd", ["group", "term", "sd"], sd_rows)
        if cor_rows:
            emit("cor", ["group", "term1", "term2", "r"], cor_rows)
    repca = report.get("repca")
    if repca:
        rows = []
        for group, info in repca["groups"].items():
            for i, (prop, cum) in enumerate(
                zip(info["proportions"], info["cumulative"]), start=1
            ):
                rows.append([group, i, prop, cum])
        emit("scree", ["group", "component", "proportion", "cumulative"], rows)
    return written
