"""Stochastic message passing over a partitioned posterior.

Each node collection gets its own sub-problem: a local SVI objective over the
collection's latents Z^a and parameters Θ^a in which every latent owned by
another collection is drawn from that collection's last broadcast variational
factor, with no gradient. A solved sub-problem broadcasts its parameters as a
:class:`Message`.

Scheduling semantics (shared by both modes, so they agree bit for bit):

* sweeps visit collections in declaration order;
* in sweep ``s`` a collection reads the sweep-``s`` message of dependencies
  ordered before it and the sweep-``s - 1`` message of those after it;
* a collection is re-solved only when its inputs changed since its last solve;
* a sub-problem with no dependencies is seeded with the run seed itself,
  others with ``(seed, crc32(name), sweep)``.

The run stops when no pending input change remains, when the largest
parameter change of a sweep drops below ``convergence_eps``, or after
``sweeps_max`` sweeps (with :class:`~gfg.errors.NonConvergenceWarning`).
"""

from __future__ import annotations

import json
import queue
import threading
import warnings
import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from gfg import autodiff as ad
from gfg.engine import Program
from gfg.errors import MissingMessageError, NonConvergenceWarning
from gfg.factorize import PosteriorPartition, name_key, partition_for_smp, resolved_parents
from gfg.graph import LATENT, OBSERVED, GenerativeFlowGraph
from gfg.svi import MonteCarloObjective, RobbinsMonro, SviConfig, VariationalFactor, mean_field, optimize

MODES = ("serial", "parallel")


@dataclass(frozen=True)
class Message:
    sender: str
    iteration: int
    payload: str

    @classmethod
    def pack(cls, sender: str, iteration: int, phi: Mapping, theta: Mapping) -> "Message":
        body = json.dumps({"phi": dict(phi), "theta": dict(theta)}, sort_keys=True)
        return cls(sender, iteration, body)

    @property
    def nbytes(self) -> int:
        return len(self.payload.encode())

    def unpack(self) -> tuple[dict, dict]:
        body = json.loads(self.payload)
        return body["phi"], body["theta"]


@dataclass
class SubProblem:
    """Local problem of one collection, with everything needed to solve it."""

    collection: str
    latents: tuple[str, ...]
    params: tuple[str, ...]
    observed: tuple[str, ...]
    parents: tuple[tuple[str, bool], ...]
    global_children: tuple[str, ...]
    factor: VariationalFactor
    scored: tuple[str, ...]
    needs: tuple[str, ...] = ()
    objective: MonteCarloObjective | None = field(default=None, repr=False)

    @property
    def is_root(self) -> bool:
        return not self.needs

    def initial(self, g: GenerativeFlowGraph) -> tuple[dict, dict]:
        return self.factor.init_params(), {t: g.node(t).init for t in self.params}


def _generative_children(g: GenerativeFlowGraph, sources: set[str]) -> set[str]:
    out = set()
    for n in g.names(LATENT, OBSERVED):
        if any(s in sources and not det for s, det in resolved_parents(g, n)):
            out.add(n)
    return out


def build_subproblems(partition: PosteriorPartition, g: GenerativeFlowGraph) -> list[SubProblem]:
    """One sub-problem per collection of ``partition``.

    The local objective scores the collection's own latents and local
    observations, its global observed children, and any node of another
    collection reached by a non-detached link from Z^a or Θ^a.
    """
    program = Program(g)
    owner = partition.owner
    factors = {c: mean_field(g, partition.latents[c], owner=c) for c in partition.collections}
    gset = set(partition.global_observed)
    out = []
    for c in partition.collections:
        own = set(partition.latents[c]) | set(partition.params[c])
        children = _generative_children(g, own)
        scored = set(partition.latents[c]) | set(partition.observed[c]) | children
        global_children = tuple(sorted((x for x in children if x in gset), key=name_key))
        others = [factors[b] for b in partition.collections if b != c]
        objective = MonteCarloObjective(
            g, [factors[c]], scored=scored, frozen=others, trainable=partition.params[c], program=program
        )
        needs = set()
        for n in objective.nodes:
            o = owner.get(n)
            if o is not None and o != c and (n in objective.draw or n in g.variable_params):
                needs.add(o)
        out.append(
            SubProblem(
                collection=c,
                latents=partition.latents[c],
                params=partition.params[c],
                observed=partition.observed[c],
                parents=tuple(sorted(partition.parent_map[c])),
                global_children=global_children,
                factor=factors[c],
                scored=tuple(objective.scored),
                needs=tuple(b for b in partition.collections if b in needs),
                objective=objective,
            )
        )
    return out


def _frozen_inputs(sp: SubProblem, frozen: Mapping) -> tuple[dict, dict]:
    phi: dict = {}
    theta: dict = {}
    missing = [b for b in sp.needs if b not in frozen]
    if missing:
        raise MissingMessageError(f"sub-problem {sp.collection!r} has no message from {missing}")
    for b in sp.needs:
        m = frozen[b]
        if isinstance(m, Message):
            p, t = m.unpack()
        else:
            p, t = m, {}
        phi.update(p)
        theta.update(t)
    return phi, theta


def local_objective(
    sp: SubProblem,
    frozen: Mapping,
    cfg: SviConfig | None = None,
    phi: Mapping | None = None,
    theta: Mapping | None = None,
    rng: np.random.Generator | None = None,
    track_frozen: bool = False,
):
    """Monte-Carlo estimate of the local objective of ``sp``.

    ``frozen`` maps collections to a :class:`Message` or a bare Φ dict. The
    result is taped in Φ^a and Θ^a; with ``track_frozen`` the frozen inputs are
    taped too (as leaves named ``frozen:<name>``) so their zero gradient can be
    checked.
    """
    cfg = cfg or SviConfig()
    fphi, ftheta = _frozen_inputs(sp, frozen)
    g = sp.objective.g
    p0, t0 = sp.initial(g)
    phi = dict(phi) if phi is not None else p0
    th = {**ftheta, **(dict(theta) if theta is not None else t0)}
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    out = sp.objective.evaluate(phi, th, rng, cfg.mc_samples, frozen_phi=fphi, track_frozen=track_frozen)
    return out.estimate


@dataclass
class Solution:
    phi: dict
    theta: dict
    trace: list

    @property
    def objective(self) -> float:
        return self.trace[-1] if self.trace else float("nan")


def solve_subproblem(
    sp: SubProblem,
    frozen: Mapping,
    cfg: SviConfig | None = None,
    phi: Mapping | None = None,
    theta: Mapping | None = None,
    seed=None,
) -> Solution:
    """Run SVI on the local objective, warm-started from ``phi``/``theta``."""
    cfg = cfg or SviConfig()
    fphi, ftheta = _frozen_inputs(sp, frozen)
    g = sp.objective.g
    p0, t0 = sp.initial(g)
    phi = dict(phi) if phi is not None else p0
    own_theta = dict(theta) if theta is not None else t0
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    phi, th, trace = optimize(sp.objective, phi, {**ftheta, **own_theta}, cfg, rng, frozen_phi=fphi)
    return Solution(phi, {t: th[t] for t in sp.params}, trace)


def solve_seed(sp: SubProblem, seed, sweep: int):
    if sp.is_root:
        return seed
    base = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    return base + [zlib.crc32(sp.collection.encode()), sweep]


@dataclass(frozen=True)
class SchedulerConfig:
    mode: str = "serial"
    sweeps_max: int = 10
    convergence_eps: float = 0.1
    svi: SviConfig = SviConfig(steps=1000, mc_samples=16, lr_schedule=RobbinsMonro(0.05, 0.6))
    bounded: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.convergence_eps > 0:
            raise ValueError("convergence_eps must be positive")
        if self.sweeps_max < 1:
            raise ValueError("sweeps_max must be at least 1")


@dataclass
class SweepRecord:
    sweep: int
    solved: list
    max_change: float
    messages: int
    nbytes: int


@dataclass
class SmpResult:
    phi: dict
    theta: dict
    status: str
    sweeps: int
    log: list
    messages: list
    objectives: dict
    factors: dict

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    def posterior(self) -> dict:
        out = {}
        for c, f in self.factors.items():
            out.update(f.summary(self.phi[c]))
        return out

    def summary(self) -> dict:
        return {
            "status": self.status,
            "sweeps": self.sweeps,
            "messages": len(self.messages),
            "bytes": sum(m.nbytes for m in self.messages),
            "sweep_log": [r.__dict__ for r in self.log],
        }


def _max_change(old: Mapping, new: Mapping) -> float:
    return max((abs(new[k] - old[k]) for k in new), default=0.0)


def _inputs_for(sp: SubProblem, position: dict, latest: Mapping, sweep: int) -> dict:
    """Messages ``sp`` reads in ``sweep``: current sweep from earlier senders, previous from later ones."""
    out = {}
    for b in sp.needs:
        limit = sweep if position[b] < position[sp.collection] else sweep - 1
        out[b] = latest(b, limit)
    return out


def _stop(subproblems, position, changes: dict, eps: float) -> bool:
    changed = {c for c, d in changes.items() if d > 0}
    pending = any(b in changed and position[b] > position[sp.collection] for sp in subproblems for b in sp.needs)
    if not pending:
        return True
    return max(changes.values(), default=0.0) < eps


class _Book:
    """Message history per sender, with initial parameters at iteration 0."""

    def __init__(self, subproblems, g):
        self.hist = {sp.collection: [Message.pack(sp.collection, 0, *sp.initial(g))] for sp in subproblems}

    def add(self, m: Message):
        self.hist[m.sender].append(m)

    def latest(self, sender: str, limit: int) -> Message:
        best = None
        for m in self.hist[sender]:
            if m.iteration <= limit:
                best = m
        return best


def run_message_passing(
    subproblems: Sequence[SubProblem], cfg: SchedulerConfig | None = None, g: GenerativeFlowGraph | None = None
) -> SmpResult:
    """Solve every sub-problem until the parameters settle."""
    cfg = cfg or SchedulerConfig()
    if not subproblems:
        raise ValueError("need at least one sub-problem")
    g = g or subproblems[0].objective.g
    if cfg.mode == "parallel":
        return _run_parallel(list(subproblems), cfg, g)
    return _run_serial(list(subproblems), cfg, g)


def _solve_step(sp, inputs, state, cfg, sweep):
    phi, theta = state
    sol = solve_subproblem(sp, inputs, cfg.svi, phi, theta, seed=solve_seed(sp, cfg.svi.seed, sweep))
    msg = Message.pack(sp.collection, sweep, sol.phi, sol.theta)
    new_phi, new_theta = msg.unpack()
    change = max(_max_change(phi, new_phi), _max_change(theta, new_theta))
    return msg, (new_phi, new_theta), change, sol.objective


def _result(subproblems, state, status, sweeps, log, messages, objectives):
    return SmpResult(
        phi={c: s[0] for c, s in state.items()},
        theta={c: s[1] for c, s in state.items()},
        status=status,
        sweeps=sweeps,
        log=log,
        messages=messages,
        objectives=objectives,
        factors={sp.collection: sp.factor for sp in subproblems},
    )


def _run_serial(subproblems, cfg, g):
    position = {sp.collection: i for i, sp in enumerate(subproblems)}
    book = _Book(subproblems, g)
    state = {sp.collection: book.hist[sp.collection][0].unpack() for sp in subproblems}
    used: dict = {}
    log, messages, objectives = [], [], {}
    status = "max-sweeps"
    sweep = 0
    for sweep in range(1, cfg.sweeps_max + 1):
        changes, solved = {}, []
        for sp in subproblems:
            c = sp.collection
            inputs = _inputs_for(sp, position, book.latest, sweep)
            key = tuple((b, m.payload) for b, m in inputs.items())
            if used.get(c) == key:
                continue
            used[c] = key
            msg, state[c], changes[c], objectives[c] = _solve_step(sp, inputs, state[c], cfg, sweep)
            book.add(msg)
            messages.append(msg)
            solved.append(c)
        sent = [m for m in messages if m.iteration == sweep]
        log.append(SweepRecord(sweep, solved, max(changes.values(), default=0.0), len(sent), sum(m.nbytes for m in sent)))
        if _stop(subproblems, position, changes, cfg.convergence_eps):
            status = "converged"
            break
    if status != "converged":
        warnings.warn(f"message passing stopped after {sweep} sweeps without settling", NonConvergenceWarning)
    return _result(subproblems, state, status, sweep, log, messages, objectives)


def _run_parallel(subproblems, cfg, g):
    """One thread per sub-problem; messages travel over queues, a coordinator decides when to stop."""
    position = {sp.collection: i for i, sp in enumerate(subproblems)}
    dependents = {sp.collection: [d.collection for d in subproblems if sp.collection in d.needs] for sp in subproblems}
    inbox = {sp.collection: queue.Queue() for sp in subproblems}
    control = {sp.collection: queue.Queue() for sp in subproblems}
    reports: queue.Queue = queue.Queue()
    errors: list = []

    def worker(sp: SubProblem):
        c = sp.collection
        try:
            book = _Book([s for s in subproblems if s.collection in sp.needs or s is sp], g)
            state = book.hist[c][0].unpack()
            used = None
            sweep = 1
            while True:
                if cfg.bounded:
                    for b in sp.needs:
                        limit = sweep if position[b] < position[c] else sweep - 1
                        while book.hist[b][-1].iteration < limit:
                            book.add(inbox[c].get())
                else:
                    while not inbox[c].empty():
                        book.add(inbox[c].get_nowait())
                inputs = {b: book.hist[b][-1] for b in sp.needs}
                if cfg.bounded:
                    inputs = _inputs_for(sp, position, book.latest, sweep)
                key = tuple((b, m.payload) for b, m in inputs.items())
                change, objective, msg = 0.0, None, None
                if key != used:
                    used = key
                    msg, state, change, objective = _solve_step(sp, inputs, state, cfg, sweep)
                    solved = True
                else:
                    msg = Message.pack(c, sweep, *state)
                    solved = False
                for d in dependents[c]:
                    inbox[d].put(msg)
                reports.put((c, sweep, solved, change, objective, msg))
                if control[c].get() == "stop":
                    return
                sweep += 1
        except BaseException as exc:  # surfaced by the coordinator
            errors.append(exc)
            reports.put((c, None, False, 0.0, None, None))

    threads = [threading.Thread(target=worker, args=(sp,), daemon=True) for sp in subproblems]
    for t in threads:
        t.start()
    state = {sp.collection: Message.pack(sp.collection, 0, *sp.initial(g)).unpack() for sp in subproblems}
    log, messages, objectives = [], [], {}
    status = "max-sweeps"
    sweep = 0
    for sweep in range(1, cfg.sweeps_max + 1):
        batch = [reports.get() for _ in subproblems]
        if errors:
            for c in control:
                control[c].put("stop")
            raise errors[0]
        batch.sort(key=lambda r: position[r[0]])
        changes, solved, sent = {}, [], []
        for c, _, did, change, objective, msg in batch:
            if did:
                changes[c] = change
                solved.append(c)
                objectives[c] = objective
                state[c] = msg.unpack()
                messages.append(msg)
                sent.append(msg)
        log.append(SweepRecord(sweep, solved, max(changes.values(), default=0.0), len(sent), sum(m.nbytes for m in sent)))
        done = _stop(subproblems, position, changes, cfg.convergence_eps)
        if done:
            status = "converged"
        last = done or sweep == cfg.sweeps_max
        for c in control:
            control[c].put("stop" if last else "go")
        if last:
            break
    for t in threads:
        t.join()
    if status != "converged":
        warnings.warn(f"message passing stopped after {sweep} sweeps without settling", NonConvergenceWarning)
    return _result(subproblems, state, status, sweep, log, messages, objectives)


def replay(subproblems: Sequence[SubProblem], messages: Sequence[Message], cfg: SchedulerConfig, g=None) -> dict:
    """Re-execute every logged solve serially from the logged inputs.

    Returns the recomputed final ``(phi, theta)`` per collection; with pure
    solves these equal the logged final payloads bit for bit.
    """
    g = g or subproblems[0].objective.g
    position = {sp.collection: i for i, sp in enumerate(subproblems)}
    by_name = {sp.collection: sp for sp in subproblems}
    book = _Book(subproblems, g)
    for m in messages:
        book.add(m)
    out = {}
    for m in sorted(messages, key=lambda m: (m.iteration, position[m.sender])):
        sp = by_name[m.sender]
        prev = book.latest(m.sender, m.iteration - 1).unpack()
        inputs = _inputs_for(sp, position, book.latest, m.iteration)
        msg, state, _, _ = _solve_step(sp, inputs, prev, cfg, m.iteration)
        out[m.sender] = state
    return out


def approx_marginal_likelihood(
    sp: SubProblem, frozen: Mapping, n: int = 1000, rng: np.random.Generator | int | None = 0
) -> float:
    """Estimate of ``p(X_G children | local observations)`` under frozen parents and the local prior.

    Other collections' latents come from their frozen factors and the local
    latents from their prior; the estimate averages the likelihood of the
    global observed children. Without such children it is exactly 1.
    """
    if not sp.global_children:
        return 1.0
    fphi, ftheta = _frozen_inputs(sp, frozen)
    obj = sp.objective
    program: Program = obj.program
    g = obj.g
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    nodes = program.closure(set(sp.global_children) | set(sp.latents))
    assign = {}
    for z in sorted((m for m in nodes if g.node(m).kind == LATENT and m not in sp.latents), key=name_key):
        f = obj.frozen[z]
        assign[z] = f.distribution(z, fphi).sample(rng, (n,))
    theta = {**ftheta, **{t: g.node(t).init for t in sp.params}}
    ev = program.run(assign, theta, scored=sp.global_children, nodes=nodes, rng=rng, shape=(n,))
    logw = np.broadcast_to(np.asarray(ad.value_of(ev.total()), dtype=float), (n,))
    return float(np.mean(np.exp(logw)))


def run(g: GenerativeFlowGraph, cfg: SchedulerConfig | None = None, collections=None) -> SmpResult:
    """Partition ``g``, build its sub-problems and run message passing."""
    subproblems = build_subproblems(partition_for_smp(g, collections), g)
    return run_message_passing(subproblems, cfg, g)


__all__ = [
    "Message",
    "SubProblem",
    "build_subproblems",
    "local_objective",
    "Solution",
    "solve_subproblem",
    "solve_seed",
    "SchedulerConfig",
    "SweepRecord",
    "SmpResult",
    "run_message_passing",
    "replay",
    "approx_marginal_likelihood",
    "run",
]
