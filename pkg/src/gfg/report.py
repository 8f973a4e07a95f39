"""Structured reports of inference runs, as JSON or as plain text."""

from __future__ import annotations

import json
from typing import Mapping

from gfg.oracle import ExactPosterior
from gfg.smp import SmpResult
from gfg.svi import FitResult

TRACE_POINTS = 20


def _thin(trace, points: int = TRACE_POINTS) -> list:
    if len(trace) <= points:
        return [[i + 1, v] for i, v in enumerate(trace)]
    stride = len(trace) / points
    idx = sorted({int(round((k + 1) * stride)) - 1 for k in range(points)})
    return [[i + 1, trace[i]] for i in idx]


def to_dict(result, seed=None, warnings_: list | None = None) -> dict:
    """Machine-readable report of a fit, a message-passing run or an exact posterior."""
    if isinstance(result, FitResult):
        out = {
            "engine": "svi",
            "status": "completed",
            "steps": len(result.elbo),
            "posterior": result.posterior(),
            "phi": result.phi,
            "theta": result.theta,
            "elbo": {
                "final": result.elbo[-1] if result.elbo else None,
                "final_smoothed": result.elbo_smoothed[-1] if result.elbo_smoothed else None,
                "trace": _thin(result.elbo),
                "trace_smoothed": _thin(result.elbo_smoothed),
            },
        }
    elif isinstance(result, SmpResult):
        out = {
            "engine": "smp",
            "status": result.status,
            "sweeps": result.sweeps,
            "posterior": result.posterior(),
            "phi": result.phi,
            "theta": result.theta,
            "objectives": result.objectives,
            "communication": {
                "messages": len(result.messages),
                "bytes": sum(m.nbytes for m in result.messages),
                "sweep_log": [
                    {"sweep": r.sweep, "solved": r.solved, "max_change": r.max_change, "messages": r.messages, "bytes": r.nbytes}
                    for r in result.log
                ],
            },
        }
    elif isinstance(result, ExactPosterior):
        out = {"engine": "oracle", "kind": result.kind, "status": "exact", "log_evidence": result.log_evidence,
               "posterior": result.summary()}
    else:
        raise TypeError(f"cannot report on {type(result).__name__}")
    if seed is not None:
        out["seed"] = seed
    if warnings_:
        out["warnings"] = list(warnings_)
    return out


def to_json(report: Mapping) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, list):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def to_text(report: Mapping) -> str:
    """Human-readable rendering of :func:`to_dict` output."""
    lines = [f"engine: {report['engine']}", f"status: {report['status']}"]
    if "seed" in report:
        lines.append(f"seed: {report['seed']}")
    for w in report.get("warnings", []):
        lines.append(f"warning: {w}")
    if "steps" in report:
        lines.append(f"steps: {report['steps']}")
    if "sweeps" in report:
        lines.append(f"sweeps: {report['sweeps']}")
    if "log_evidence" in report:
        lines.append(f"log evidence: {_fmt(report['log_evidence'])}")
    lines.append("posterior:")
    for z in sorted(report["posterior"]):
        params = report["posterior"][z]
        lines.append(f"  {z}: " + ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(params.items())))
    if report.get("theta"):
        lines.append("parameters:")
        theta = report["theta"]
        flat = {}
        for k, v in theta.items():
            if isinstance(v, Mapping):
                flat.update(v)
            else:
                flat[k] = v
        for k in sorted(flat):
            lines.append(f"  {k} = {_fmt(flat[k])}")
    if "elbo" in report:
        e = report["elbo"]
        lines.append(f"elbo: final {_fmt(e['final'])}, smoothed {_fmt(e['final_smoothed'])}")
        lines.append("elbo trace (step, smoothed):")
        lines.extend(f"  {i} {_fmt(v)}" for i, v in e["trace_smoothed"])
    if "communication" in report:
        c = report["communication"]
        lines.append(f"messages: {c['messages']} ({c['bytes']} bytes)")
        lines.append("sweep log:")
        for r in c["sweep_log"]:
            lines.append(
                f"  sweep {r['sweep']}: solved {','.join(r['solved']) or '-'}; "
                f"max change {_fmt(r['max_change'])}; {r['messages']} messages, {r['bytes']} bytes"
            )
        if report.get("phi"):
            lines.append("variational parameters:")
            for c_name in sorted(report["phi"]):
                phi = report["phi"][c_name]
                lines.append(f"  {c_name}: " + ", ".join(f"{k}={_fmt(v)}" for k, v in sorted(phi.items())))
    return "\n".join(lines) + "\n"


def report(result, fmt: str = "text", seed=None, warnings_: list | None = None) -> str:
    d = to_dict(result, seed, warnings_)
    return to_json(d) if fmt == "json" else to_text(d)


__all__ = ["to_dict", "to_json", "to_text", "report"]
