"""``gfg`` command line.

Exit codes: 0 on success, 1 when a model fails validation (schema or graph
errors), 2 on any other error.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from pathlib import Path

from gfg import dot, factorize, modelfile, oracle, report, smp, svi
from gfg.errors import GfgError, GraphError, NonConvergenceWarning, SchemaError
from gfg.graph import validate


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _schedule(args):
    if args.schedule == "robbins-monro":
        return svi.RobbinsMonro(args.lr, args.kappa)
    return svi.Constant(args.lr)


def _svi_config(args, steps_default: int) -> svi.SviConfig:
    return svi.SviConfig(
        steps=args.steps if args.steps is not None else steps_default,
        mc_samples=args.mc_samples,
        lr_schedule=_schedule(args),
        seed=args.seed,
        optimizer=args.optimizer,
        estimator=args.estimator,
    )


def cmd_validate(args) -> int:
    g = modelfile.graph_from_spec(modelfile.model_text(args.model))
    rep = validate(g)
    if rep.ok:
        print(f"ok: {len(g.nodes)} nodes, {len(g.links)} links, {len(g.collections)} collections")
        return 0
    for e in rep:
        print(e)
    return 1


def cmd_factorize(args) -> int:
    g = modelfile.load(args.model)
    if args.posterior:
        text = factorize.factorize_posterior(g).render()
    elif args.partition:
        p = factorize.partition_for_smp(g)
        rows = [f"global observed: {', '.join(p.global_observed) or '-'}"]
        for c in p.collections:
            parents = ", ".join(f"{o}{' (detached)' if d else ''}" for o, d in sorted(p.parent_map[c])) or "-"
            rows.append(
                f"{c}: latents {', '.join(p.latents[c]) or '-'}; observed {', '.join(p.observed[c]) or '-'}; "
                f"params {', '.join(p.params[c]) or '-'}; parents {parents}"
            )
        text = "\n".join(rows)
    else:
        text = factorize.factorize_joint(g, args.view or None).render()
    print(text)
    return 0


def cmd_render(args) -> int:
    _write(dot.render_dot(modelfile.load(args.model)), args.out)
    return 0


def _run(fn):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", NonConvergenceWarning)
        result = fn()
    notes = [f"{w.category.__name__}: {w.message}" for w in caught if issubclass(w.category, NonConvergenceWarning)]
    for n in notes:
        print(f"warning: {n}", file=sys.stderr)
    return result, notes


def cmd_infer_svi(args) -> int:
    g = modelfile.load(args.model)
    cfg = _svi_config(args, 2000)
    result, notes = _run(lambda: svi.fit(g, cfg=cfg))
    _write(report.report(result, args.format, seed=args.seed, warnings_=notes), args.out)
    return 0


def cmd_infer_smp(args) -> int:
    g = modelfile.load(args.model)
    cfg = smp.SchedulerConfig(
        mode=args.mode,
        sweeps_max=args.sweeps,
        convergence_eps=args.eps,
        svi=_svi_config(args, 1000),
        bounded=not args.unbounded,
    )
    result, notes = _run(lambda: smp.run(g, cfg))
    _write(report.report(result, args.format, seed=args.seed, warnings_=notes), args.out)
    return 0


def cmd_oracle(args) -> int:
    g = modelfile.load(args.model)
    result = oracle.exact_posterior(g, max_states=args.max_states)
    _write(report.report(result, args.format), args.out)
    return 0


def cmd_report(args) -> int:
    data = json.loads(Path(args.result).read_text())
    text = report.to_json(data) if args.format == "json" else report.to_text(data)
    _write(text, args.out)
    return 0


def _add_svi_flags(p, lr: float, schedule: str, kappa: float, mc: int):
    p.add_argument("--steps", type=int, default=None, help="ascent steps (per sub-problem solve for infer-smp)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=lr, help="constant rate, or the scale a of a * step^-kappa")
    p.add_argument("--schedule", choices=("constant", "robbins-monro"), default=schedule)
    p.add_argument("--kappa", type=float, default=kappa)
    p.add_argument("--mc-samples", type=int, default=mc)
    p.add_argument("--optimizer", choices=svi.OPTIMIZERS, default="adam")
    p.add_argument("--estimator", choices=svi.ESTIMATORS, default="auto")


def _add_output(p, formats=True):
    if formats:
        p.add_argument("--format", choices=("text", "json"), default="text")
    p.add_argument("--out", default=None, help="write to this file instead of stdout")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gfg", description="Generative flow graph models and inference.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a model file")
    p.add_argument("model", help="bundled model name or path to a model file")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("factorize", help="print the symbolic factorization")
    p.add_argument("model")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--posterior", action="store_true", help="posterior factorization over detached blocks")
    mode.add_argument("--partition", action="store_true", help="message-passing partition")
    mode.add_argument("--view", nargs="+", metavar="COLLECTION", help="collections shown as single factors")
    p.set_defaults(fn=cmd_factorize)

    p = sub.add_parser("render", help="write Graphviz DOT")
    p.add_argument("model")
    _add_output(p, formats=False)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("infer-svi", help="fit a mean-field posterior by SVI")
    p.add_argument("model")
    _add_svi_flags(p, 1e-2, "constant", 0.6, 8)
    _add_output(p)
    p.set_defaults(fn=cmd_infer_svi)

    p = sub.add_parser("infer-smp", help="stochastic message passing over the node collections")
    p.add_argument("model")
    p.add_argument("--mode", choices=smp.MODES, default="serial")
    p.add_argument("--sweeps", type=int, default=10)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--unbounded", action="store_true", help="parallel workers use whatever messages have arrived")
    _add_svi_flags(p, 0.05, "robbins-monro", 0.6, 16)
    _add_output(p)
    p.set_defaults(fn=cmd_infer_smp)

    p = sub.add_parser("oracle", help="exact posterior (enumeration or linear-Gaussian)")
    p.add_argument("model")
    p.add_argument("--max-states", type=int, default=6)
    _add_output(p)
    p.set_defaults(fn=cmd_oracle)

    p = sub.add_parser("report", help="render a saved JSON report")
    p.add_argument("result", help="JSON report written by infer-svi, infer-smp or oracle")
    _add_output(p)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (SchemaError, GraphError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (GfgError, ValueError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
