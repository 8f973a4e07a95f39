"""Symbolic joint/posterior factorizations, the message-passing partition and log joints.

Factorizations render to canonical strings: names are sorted by base name and
numeric index, and runs of consecutive instances are compressed, so
``z_m[1], z_m[2], z_m[3]`` renders as ``z_m[1;3]``. A frozen quantity (one
reached through a detached link) is marked with a leading ``~``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from gfg import autodiff as ad
from gfg.engine import Program
from gfg.errors import CollectionOverlapError, UncoveredNodeError, UnknownNameError
from gfg.graph import (
    CONDITION_KINDS,
    DETACHED,
    FIXED_PARAM,
    INFLUENCE,
    LATENT,
    OBSERVED,
    PARAM_KINDS,
    VARIABLE_PARAM,
    GenerativeFlowGraph,
    Trace,
)

_INDEXED = re.compile(r"^(.*)\[(-?\d+)\]$")


def name_key(name: str):
    """Sort key ordering names by base and then numeric index; a ``~`` mark is ignored."""
    bare = name.lstrip("~")
    m = _INDEXED.match(bare)
    if m:
        return (m.group(1), 1, int(m.group(2)), name)
    return (bare, 0, 0, name)


def render_names(names: Iterable[str]) -> str:
    """Comma-separated canonical rendering with consecutive-index compression."""
    ordered = sorted(set(names), key=name_key)
    out: list[str] = []
    i = 0
    while i < len(ordered):
        m = _INDEXED.match(ordered[i])
        if not m:
            out.append(ordered[i])
            i += 1
            continue
        base, lo = m.group(1), int(m.group(2))
        hi = lo
        j = i + 1
        while j < len(ordered):
            mj = _INDEXED.match(ordered[j])
            if not mj or mj.group(1) != base or int(mj.group(2)) != hi + 1:
                break
            hi += 1
            j += 1
        out.append(f"{base}[{lo}]" if hi == lo else f"{base}[{lo};{hi}]")
        i = j
    return ", ".join(out)


def _render(targets, conditions, params) -> str:
    sub = f"_{{{render_names(params).replace(' ', '')}}}" if params else ""
    cond = f" | {render_names(conditions)}" if conditions else ""
    return f"p{sub}({render_names(targets)}{cond})"


def resolved_parents(g: GenerativeFlowGraph, name: str) -> list[tuple[str, bool]]:
    """Variable and parameter parents of ``name`` with a detached flag.

    Branch and selection nodes are looked through: their generative inputs
    count as parents, and a path is detached if any link on it is detached.
    """
    out: dict[str, bool] = {}
    stack = [(p.source, p.detached) for p in g.parents(name)]
    seen = set()
    while stack:
        s, det = stack.pop()
        if (s, det) in seen:
            continue
        seen.add((s, det))
        node = g.node(s)
        if node.kind in CONDITION_KINDS:
            stack.extend((p.source, det or p.detached) for p in g.parents(s))
            continue
        out[s] = out.get(s, True) and det
    return sorted(out.items(), key=lambda kv: name_key(kv[0]))


@dataclass(frozen=True)
class Factor:
    """``p_{parent_params}(target | parent_latents)`` for one latent or observed node."""

    target: str
    parent_latents: tuple[str, ...]
    parent_params: tuple[str, ...]
    via_detached: tuple[str, ...] = ()

    def render(self) -> str:
        return _render([self.target], self.parent_latents, self.parent_params)

    @property
    def atom(self):
        return (self.target, frozenset(self.parent_latents), frozenset(self.parent_params))


@dataclass(frozen=True)
class BlockFactor:
    """``p_{params}(Z, X | PaZ(C))`` for a node collection shown as one factor."""

    collection: str
    targets: tuple[str, ...]
    parent_latents: tuple[str, ...]
    parent_params: tuple[str, ...]
    atoms: tuple[Factor, ...]

    def render(self) -> str:
        return _render(self.targets, self.parent_latents, self.parent_params)


@dataclass
class JointFactorization:
    factors: list

    def render(self) -> str:
        return " * ".join(f.render() for f in self.factors)

    def atoms(self) -> list[Factor]:
        out = []
        for f in self.factors:
            out.extend(f.atoms if isinstance(f, BlockFactor) else [f])
        return out

    def atom_set(self) -> set:
        return {f.atom for f in self.atoms()}

    def __str__(self):
        return self.render()


def node_factor(g: GenerativeFlowGraph, name: str) -> Factor:
    parents = resolved_parents(g, name)
    latents = tuple(s for s, _ in parents if g.node(s).kind in (LATENT, OBSERVED))
    params = tuple(s for s, _ in parents if g.node(s).kind in PARAM_KINDS)
    detached = tuple(s for s, d in parents if d)
    return Factor(name, latents, params, detached)


def factorize_joint(
    g: GenerativeFlowGraph, view: Iterable[str] | None = None, trace: Trace | None = None
) -> JointFactorization:
    """One factor per latent/observed node, in evaluation order.

    ``view`` names collections to show as single block factors; their members'
    factors are grouped and the block conditions on the latents and parameters
    entering it from outside. With ``trace`` only nodes on its path are kept.
    """
    order = g.topological_order()
    on_path = set(trace.path) if trace is not None else None
    variables = [n for n in order if g.node(n).kind in (LATENT, OBSERVED) and (on_path is None or n in on_path)]
    atoms = {n: node_factor(g, n) for n in variables}
    owner: dict[str, str] = {}
    for c in view or ():
        for n in g.collection_nodes(c):
            if n in owner:
                raise CollectionOverlapError(f"view collections {owner[n]!r} and {c!r} overlap")
            owner[n] = c
    factors = []
    emitted = set()
    for n in variables:
        c = owner.get(n)
        if c is None:
            factors.append(atoms[n])
            continue
        if c in emitted:
            continue
        emitted.add(c)
        members = [m for m in variables if owner.get(m) == c]
        inside = set(g.collection_nodes(c))
        conds = {p for m in members for p in atoms[m].parent_latents if p not in inside}
        params = {p for m in members for p in atoms[m].parent_params}
        params.update(m for m in inside if g.node(m).kind in PARAM_KINDS)
        factors.append(BlockFactor(c, tuple(members), tuple(sorted(conds, key=name_key)),
                                   tuple(sorted(params, key=name_key)), tuple(atoms[m] for m in members)))
    return JointFactorization(factors)


@dataclass(frozen=True)
class PosteriorBlock:
    latents: tuple[str, ...]
    observed: tuple[str, ...]
    params: tuple[str, ...]
    frozen_latents: tuple[str, ...] = ()
    frozen_params: tuple[str, ...] = ()
    prior_factors: tuple[Factor, ...] = ()

    def render(self) -> str:
        if not self.observed:
            frozen = set(self.frozen_latents) | set(self.frozen_params)
            return " * ".join(_render_frozen(f, frozen) for f in self.prior_factors)
        conds = [f"~{n}" for n in self.frozen_latents] + list(self.observed)
        return _render(self.latents, conds, list(self.params) + [f"~{n}" for n in self.frozen_params])


def _render_frozen(f: Factor, frozen: set) -> str:
    lat = [f"~{p}" if p in frozen and p in f.via_detached else p for p in f.parent_latents]
    par = [f"~{p}" if p in frozen and p in f.via_detached else p for p in f.parent_params]
    return _render([f.target], lat, par)


@dataclass
class PosteriorFactorization:
    blocks: list[PosteriorBlock]

    def render(self) -> str:
        return " * ".join(b.render() for b in self.blocks)

    def __len__(self):
        return len(self.blocks)

    def __str__(self):
        return self.render()


def detached_blocks(g: GenerativeFlowGraph) -> list[list[str]]:
    """Groups of nodes joined by non-detached links, in evaluation order.

    Fixed parameters are constants and do not join blocks.
    """
    order = g.topological_order()
    parent = {n: n for n in order}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for link in g.links:
        if link.kind == DETACHED or not g.has_node(link.target):
            continue
        for s in g.expand_source(link):
            if g.node(s).kind == FIXED_PARAM:
                continue
            a, b = find(s), find(link.target)
            if a != b:
                parent[b] = a
    groups: dict[str, list[str]] = {}
    for n in order:
        groups.setdefault(find(n), []).append(n)
    return sorted(groups.values(), key=lambda grp: order.index(grp[0]))


def factorize_posterior(g: GenerativeFlowGraph) -> PosteriorFactorization:
    """Posterior factors, one per detached-separated block.

    Each block's factor conditions on its own observed nodes and on the frozen
    (``~``) latents and parameters reaching it through detached links. A block
    without observed nodes keeps its prior factorization.
    """
    blocks = []
    for group in detached_blocks(g):
        members = set(group)
        latents = [n for n in group if g.node(n).kind == LATENT]
        if not latents:
            continue
        observed = [n for n in group if g.node(n).kind == OBSERVED]
        params = set(n for n in group if g.node(n).kind == VARIABLE_PARAM)
        frozen = set()
        for n in group:
            if g.node(n).kind not in (LATENT, OBSERVED):
                continue
            for s, det in resolved_parents(g, n):
                kind = g.node(s).kind
                if det and s not in members:
                    frozen.add(s)
                elif kind in PARAM_KINDS:
                    params.add(s)
        prior = tuple(node_factor(g, n) for n in group if g.node(n).kind == LATENT)
        frozen_params = [n for n in frozen if g.node(n).kind in PARAM_KINDS]
        blocks.append(
            PosteriorBlock(
                latents=tuple(sorted(latents, key=name_key)),
                observed=tuple(sorted(observed, key=name_key)),
                params=tuple(sorted(params, key=name_key)),
                frozen_latents=tuple(sorted(frozen - set(frozen_params), key=name_key)),
                frozen_params=tuple(sorted(frozen_params, key=name_key)),
                prior_factors=prior,
            )
        )
    return PosteriorFactorization(blocks)


@dataclass
class PosteriorPartition:
    """Split of a graph into node collections and global observed nodes.

    ``latents``/``observed``/``params`` map each collection to its own latents
    Z, local observed nodes X and trainable parameters Θ. ``parent_map`` maps a
    collection to ``(other collection, detached)`` pairs it depends on, where
    ``detached`` is true when every link from the other collection is detached.
    """

    collections: list[str]
    latents: dict[str, tuple[str, ...]]
    observed: dict[str, tuple[str, ...]]
    params: dict[str, tuple[str, ...]]
    global_observed: tuple[str, ...]
    parent_map: dict[str, set]
    fixed_params: tuple[str, ...] = ()
    owner: dict[str, str] = field(default_factory=dict)


def partition_for_smp(g: GenerativeFlowGraph, collections: Iterable[str] | None = None) -> PosteriorPartition:
    """Partition ``g`` into the given (default: maximal) collections and X_G."""
    chosen = list(collections) if collections is not None else g.maximal_collections()
    for c in chosen:
        if not g.has_collection(c):
            raise UnknownNameError(f"no collection named {c!r}")
    owner: dict[str, str] = {}
    for c in chosen:
        for n in g.collection_nodes(c):
            if n in owner:
                raise CollectionOverlapError(f"node {n!r} lies in both {owner[n]!r} and {c!r}")
            owner[n] = c
    for z in g.latents:
        if z not in owner:
            raise UncoveredNodeError(f"latent {z!r} lies outside every node collection")

    def latent_owners(n):
        return {owner[s] for s, det in resolved_parents(g, n) if not det and g.node(s).kind == LATENT}

    global_obs = sorted((x for x in g.observed if len(latent_owners(x)) >= 2), key=name_key)
    gset = set(global_obs)
    local_obs: dict[str, list[str]] = {c: [] for c in chosen}
    for x in g.observed:
        if x in gset:
            continue
        c = owner.get(x)
        if c is None:
            owners = latent_owners(x)
            c = next(iter(owners)) if owners else None
        if c is not None:
            local_obs[c].append(x)
            owner[x] = c

    params: dict[str, list[str]] = {c: [] for c in chosen}
    fixed = []
    for t in g.variable_params:
        c = owner.get(t)
        if c is None:
            targets = set()
            for child in g.children(t):
                if not child.detached:
                    for n in _through_conditions(g, child.source):
                        if n in owner:
                            targets.add(owner[n])
            c = next(iter(targets)) if len(targets) == 1 else None
        if c is None:
            fixed.append(t)
        else:
            params[c].append(t)
            owner[t] = c

    parent_map: dict[str, set] = {c: set() for c in chosen}
    for c in chosen:
        flags: dict[str, bool] = {}
        for n in g.latents + g.observed:
            if owner.get(n) != c or n in gset:
                continue
            for s, det in resolved_parents(g, n):
                o = owner.get(s)
                if o is not None and o != c and g.node(s).kind in (LATENT, VARIABLE_PARAM):
                    flags[o] = flags.get(o, True) and det
        for x in global_obs:
            srcs = {owner[s] for s, det in resolved_parents(g, x) if not det and g.node(s).kind == LATENT}
            if c in srcs:
                for o in srcs - {c}:
                    flags[o] = False
        parent_map[c] = {(o, d) for o, d in flags.items()}

    return PosteriorPartition(
        collections=chosen,
        latents={c: tuple(sorted((n for n in g.latents if owner.get(n) == c), key=name_key)) for c in chosen},
        observed={c: tuple(sorted(local_obs[c], key=name_key)) for c in chosen},
        params={c: tuple(sorted(params[c], key=name_key)) for c in chosen},
        global_observed=tuple(global_obs),
        parent_map=parent_map,
        fixed_params=tuple(sorted(fixed, key=name_key)),
        owner=owner,
    )


def _through_conditions(g, name):
    node = g.node(name)
    if node.kind not in CONDITION_KINDS:
        return [name]
    out = []
    for link in g.links:
        if link.source == name and link.kind != INFLUENCE and g.has_node(link.target):
            out.extend(_through_conditions(g, link.target))
    return out


def log_joint(
    g: GenerativeFlowGraph,
    t: Trace,
    differentiable: bool = False,
    theta: Mapping | None = None,
):
    """Sum of log factors over the nodes executed in trace ``t``.

    With ``differentiable`` the result is a taped :class:`~gfg.autodiff.Scalar`
    whose tape has a leaf per latent value and per variable parameter,
    registered under the node name in ``result.tape.leaves``.
    """
    theta = dict(theta or {})
    prog = Program(g)
    assign = {n: v for n, v in t.values.items() if g.node(n).kind == LATENT}
    if differentiable:
        tape = ad.Tape()
        for n in g.variable_params:
            theta[n] = tape.variable(theta.get(n, g.node(n).init), name=n)
        assign = {n: tape.variable(v, name=n) for n, v in assign.items()}
    ev = prog.run(assign, theta, skip_inactive=True)
    total = ev.total()
    if differentiable and not isinstance(total, ad.Scalar):
        total = ad.add(tape.variable(0.0), total)
    return total


def log_joint_batch(g: GenerativeFlowGraph, assign: Mapping, theta: Mapping | None = None, program: Program | None = None):
    """Log joint of many latent assignments at once (arrays in ``assign``), without a tape.

    A latent off the executed path contributes no factor; see
    :mod:`gfg.engine`.
    """
    prog = program or Program(g)
    ev = prog.run(assign, theta or {})
    total = ev.total()
    return total, ev


__all__ = [
    "Factor",
    "BlockFactor",
    "JointFactorization",
    "PosteriorBlock",
    "PosteriorFactorization",
    "PosteriorPartition",
    "factorize_joint",
    "factorize_posterior",
    "partition_for_smp",
    "log_joint",
    "log_joint_batch",
    "render_names",
    "resolved_parents",
    "detached_blocks",
]
