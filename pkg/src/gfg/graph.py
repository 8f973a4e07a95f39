"""Graph IR: nodes, links and node collections, plus structural validation.

Graphs are built from a model description (see :mod:`gfg.modelfile`) and are
immutable afterwards. Plates are unrolled at build time, so every node in a
graph is concrete; instance names carry an index suffix such as ``z_m[2]``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from gfg import expressions
from gfg.errors import (
    ArityError,
    CollectionOverlapError,
    ControlFlowError,
    CycleError,
    LinkTargetError,
    SchemaError,
    SubsetAnnotationError,
    UnknownNameError,
)
from gfg.registry import DEFAULT_REGISTRY, Registry

LATENT = "latent"
OBSERVED = "observed"
VARIABLE_PARAM = "variable_param"
FIXED_PARAM = "fixed_param"
BRANCH = "branch"
SELECTION = "selection"
NODE_KINDS = (LATENT, OBSERVED, VARIABLE_PARAM, FIXED_PARAM, BRANCH, SELECTION)
VARIABLE_KINDS = (LATENT, OBSERVED)
PARAM_KINDS = (VARIABLE_PARAM, FIXED_PARAM)
CONDITION_KINDS = (BRANCH, SELECTION)

GENERATIVE = "generative"
DETACHED = "detached"
INFLUENCE = "influence"
LINK_KINDS = (GENERATIVE, DETACHED, INFLUENCE)


@dataclass(frozen=True)
class Node:
    """One node. ``params`` holds parameter expressions and is treated as read-only."""

    name: str
    kind: str
    distribution: str | None = None
    params: dict | None = None
    value: float | None = None
    init: float | None = None
    predicate: str | None = None

    @property
    def is_param(self) -> bool:
        return self.kind in PARAM_KINDS

    @property
    def is_variable(self) -> bool:
        return self.kind in VARIABLE_KINDS


@dataclass(frozen=True)
class Link:
    source: str
    target: str
    kind: str = GENERATIVE
    subset: tuple[str, ...] | None = None
    when: int | None = None


@dataclass(frozen=True)
class Collection:
    """A node collection; ``members`` are node or nested collection names.

    ``index`` is ``(index name, first, last)`` for an indexed (plate)
    collection whose members are its per-instance collections.
    """

    name: str
    members: tuple[str, ...]
    index: tuple[str, int, int] | None = None
    replicate: int | None = None


@dataclass(frozen=True)
class ParentRef:
    """A resolved parent of a node: one concrete source node and the link it came through."""

    source: str
    link: Link

    @property
    def detached(self) -> bool:
        return self.link.kind == DETACHED


class GenerativeFlowGraph:
    """Immutable container of nodes, links and collections."""

    def __init__(
        self,
        nodes: Iterable[Node],
        links: Iterable[Link],
        collections: Iterable[Collection] = (),
        predicates: Iterable[str] = (),
        registry: Registry | None = None,
    ):
        self.nodes: tuple[Node, ...] = tuple(nodes)
        self.links: tuple[Link, ...] = tuple(links)
        self.collections: tuple[Collection, ...] = tuple(collections)
        self.predicates: tuple[str, ...] = tuple(predicates)
        self.registry = registry if registry is not None else DEFAULT_REGISTRY
        self._ids = {}
        for i, n in enumerate(self.nodes):
            self._ids.setdefault(n.name, i)
        self._cids = {}
        for i, c in enumerate(self.collections):
            self._cids.setdefault(c.name, i)
        self._cache: dict = {}

    def __eq__(self, other):
        if not isinstance(other, GenerativeFlowGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.links == other.links
            and self.collections == other.collections
            and self.predicates == other.predicates
        )

    def __hash__(self):
        return id(self)

    def __repr__(self):
        return (
            f"GenerativeFlowGraph({len(self.nodes)} nodes, {len(self.links)} links, "
            f"{len(self.collections)} collections)"
        )

    # lookups

    def node(self, name: str) -> Node:
        try:
            return self.nodes[self._ids[name]]
        except KeyError:
            raise UnknownNameError(f"no node named {name!r}") from None

    def node_id(self, name: str) -> int:
        try:
            return self._ids[name]
        except KeyError:
            raise UnknownNameError(f"no node named {name!r}") from None

    def has_node(self, name: str) -> bool:
        return name in self._ids

    def collection(self, name: str) -> Collection:
        try:
            return self.collections[self._cids[name]]
        except KeyError:
            raise UnknownNameError(f"no collection named {name!r}") from None

    def collection_id(self, name: str) -> int:
        return self._cids[name]

    def has_collection(self, name: str) -> bool:
        return name in self._cids

    def names(self, *kinds: str) -> list[str]:
        """Node names of the given kinds, in declaration order."""
        return [n.name for n in self.nodes if n.kind in kinds]

    @property
    def latents(self) -> list[str]:
        return self.names(LATENT)

    @property
    def observed(self) -> list[str]:
        return self.names(OBSERVED)

    @property
    def variable_params(self) -> list[str]:
        return self.names(VARIABLE_PARAM)

    # collections

    def collection_nodes(self, name: str) -> list[str]:
        """All nodes inside collection ``name``, including nested members, in declaration order."""
        key = ("cnodes", name)
        if key not in self._cache:
            found: set[str] = set()
            seen: set[str] = set()
            stack = [name]
            while stack:
                c = stack.pop()
                if c in seen:
                    continue
                seen.add(c)
                for m in self.collection(c).members:
                    if self.has_node(m):
                        found.add(m)
                    elif self.has_collection(m):
                        stack.append(m)
            self._cache[key] = [n.name for n in self.nodes if n.name in found]
        return list(self._cache[key])

    def nested_collections(self, name: str) -> list[str]:
        """Collections nested (transitively) inside ``name``."""
        out: list[str] = []
        stack = [m for m in self.collection(name).members if self.has_collection(m)]
        while stack:
            c = stack.pop(0)
            if c in out or c == name:
                continue
            out.append(c)
            stack.extend(m for m in self.collection(c).members if self.has_collection(m))
        return out

    def maximal_collections(self) -> list[str]:
        """Collections not nested inside any other collection, in declaration order."""
        nested = {m for c in self.collections for m in c.members if self.has_collection(m)}
        return [c.name for c in self.collections if c.name not in nested]

    def collections_of(self, node: str) -> list[str]:
        """Collections containing ``node`` directly or through nesting."""
        return [c.name for c in self.collections if node in self.collection_nodes(c.name)]

    # links

    def expand_source(self, link: Link) -> list[str]:
        """Concrete parent nodes contributed by ``link``.

        A collection source contributes its latents and parameters, or the
        members named in the link's subset annotation.
        """
        if self.has_node(link.source):
            return [link.source]
        members = self.collection_nodes(link.source)
        if link.subset is not None:
            return [m for m in members if m in link.subset]
        return [m for m in members if self.node(m).kind in (LATENT, VARIABLE_PARAM, FIXED_PARAM)]

    def parents(self, name: str) -> list[ParentRef]:
        """Resolved generative and detached parents of node ``name``, in link order."""
        key = ("parents", name)
        if key not in self._cache:
            out = []
            for link in self.links:
                if link.target == name and link.kind in (GENERATIVE, DETACHED):
                    out.extend(ParentRef(s, link) for s in self.expand_source(link))
            self._cache[key] = out
        return list(self._cache[key])

    def influences(self, name: str) -> list[str]:
        """Sources of influence links into ``name``, in link order."""
        out = []
        for link in self.links:
            if link.target == name and link.kind == INFLUENCE:
                out.extend(self.expand_source(link))
        return out

    def children(self, name: str) -> list[ParentRef]:
        """Resolved generative and detached links out of node ``name`` (``source`` is the child)."""
        key = ("children", name)
        if key not in self._cache:
            out = []
            for link in self.links:
                if link.kind in (GENERATIVE, DETACHED) and self.has_node(link.target):
                    if name in self.expand_source(link):
                        out.append(ParentRef(link.target, link))
            self._cache[key] = out
        return list(self._cache[key])

    def topological_order(self) -> list[str]:
        """Node names ordered so every link points forward; ties follow declaration order."""
        if "topo" not in self._cache:
            order, cyclic = _toposort(self)
            if cyclic:
                raise CycleError(f"cycle through nodes {sorted(cyclic)}")
            self._cache["topo"] = order
        return list(self._cache["topo"])

    def category_count(self, name: str) -> int | None:
        """Support size of a discrete latent or observed node; ``None`` for continuous ones."""
        node = self.node(name)
        if node.distribution == "bernoulli":
            return 2
        if node.distribution == "categorical":
            params = node.params or {}
            expr = params.get("probs", params.get("logits"))
            return expressions.category_count(expr)
        return None


def _node_edges(g: GenerativeFlowGraph) -> dict[str, set[str]]:
    succ: dict[str, set[str]] = {n.name: set() for n in g.nodes}
    for link in g.links:
        if not g.has_node(link.target):
            continue
        try:
            sources = g.expand_source(link)
        except UnknownNameError:
            continue
        for s in sources:
            if s in succ:
                succ[s].add(link.target)
    return succ


def _toposort(g: GenerativeFlowGraph) -> tuple[list[str], set[str]]:
    succ = _node_edges(g)
    indeg = {n: 0 for n in succ}
    for s, ts in succ.items():
        for t in ts:
            indeg[t] += 1
    pos = {n.name: i for i, n in enumerate(g.nodes)}
    heap = [(pos[n], n) for n, d in indeg.items() if d == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        _, n = heapq.heappop(heap)
        order.append(n)
        for t in succ[n]:
            indeg[t] -= 1
            if indeg[t] == 0:
                heapq.heappush(heap, (pos[t], t))
    cyclic = {n for n, d in indeg.items() if d > 0}
    return order, cyclic


@dataclass(frozen=True)
class ValidationEntry:
    error: type
    message: str
    ids: tuple[str, ...] = ()

    def __str__(self):
        return f"{self.error.__name__}: {self.message}"


@dataclass
class ValidationReport:
    """Every invariant violation found in a graph; empty iff the graph is valid."""

    entries: list[ValidationEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __bool__(self):
        return bool(self.entries)

    @property
    def ok(self) -> bool:
        return not self.entries

    def add(self, error: type, message: str, *ids: str) -> None:
        self.entries.append(ValidationEntry(error, message, tuple(ids)))

    def errors_of(self, error: type) -> list[ValidationEntry]:
        return [e for e in self.entries if issubclass(e.error, error)]

    def raise_first(self) -> None:
        if self.entries:
            first = self.entries[0]
            detail = "; ".join(str(e) for e in self.entries)
            raise first.error(detail)


def validate(g: GenerativeFlowGraph) -> ValidationReport:
    """Check every structural invariant of ``g`` and report all violations."""
    report = ValidationReport()
    _check_names(g, report)
    _check_links(g, report)
    _check_collections(g, report)
    _, cyclic = _toposort(g)
    if cyclic:
        report.add(CycleError, f"links form a cycle through {sorted(cyclic)}", *sorted(cyclic))
    _check_nodes(g, report)
    _check_control_flow(g, report)
    _check_registry(g, report)
    return report


def _check_names(g, report):
    seen: set[str] = set()
    for n in g.nodes:
        if n.name in seen:
            report.add(UnknownNameError, f"duplicate node name {n.name!r}", n.name)
        seen.add(n.name)
        if n.kind not in NODE_KINDS:
            report.add(SchemaError, f"node {n.name!r} has unknown kind {n.kind!r}", n.name)
    for c in g.collections:
        if c.name in seen:
            report.add(UnknownNameError, f"duplicate name {c.name!r}", c.name)
        seen.add(c.name)


def _check_links(g, report):
    for link in g.links:
        ident = f"{link.source}->{link.target}"
        if link.kind not in LINK_KINDS:
            report.add(SchemaError, f"link {ident} has unknown kind {link.kind!r}", ident)
            continue
        if not (g.has_node(link.source) or g.has_collection(link.source)):
            report.add(UnknownNameError, f"link {ident} starts at unknown name {link.source!r}", ident)
            continue
        if g.has_collection(link.target):
            report.add(LinkTargetError, f"link {ident} ends at a collection; links must end at nodes", ident)
            continue
        if not g.has_node(link.target):
            report.add(UnknownNameError, f"link {ident} ends at unknown name {link.target!r}", ident)
            continue
        target = g.node(link.target)
        if link.kind == INFLUENCE:
            if target.kind not in CONDITION_KINDS:
                report.add(
                    LinkTargetError,
                    f"influence link {ident} must end at a branch or selection node, not a {target.kind} node",
                    ident,
                )
        elif target.kind in PARAM_KINDS:
            report.add(LinkTargetError, f"{link.kind} link {ident} ends at parameter node {link.target!r}", ident)
        if link.subset is not None:
            if not g.has_collection(link.source):
                report.add(SubsetAnnotationError, f"link {ident} has a subset but its source is not a collection", ident)
            else:
                members = set(g.collection_nodes(link.source))
                bad = [m for m in link.subset if m not in members]
                if bad:
                    report.add(
                        SubsetAnnotationError,
                        f"subset of link {ident} names non-members {bad} of collection {link.source!r}",
                        ident,
                    )


def _check_collections(g, report):
    for c in g.collections:
        for m in c.members:
            if not (g.has_node(m) or g.has_collection(m)):
                report.add(UnknownNameError, f"collection {c.name!r} has unknown member {m!r}", c.name)
            if m == c.name:
                report.add(CollectionOverlapError, f"collection {c.name!r} contains itself", c.name)
        if c.replicate is not None and c.replicate <= 0:
            report.add(SchemaError, f"collection {c.name!r} has non-positive replication", c.name)
    parents: dict[str, list[str]] = {}
    for c in g.collections:
        for m in c.members:
            parents.setdefault(m, []).append(c.name)
    for member, owners in parents.items():
        if g.has_collection(member) and len(owners) > 1:
            report.add(
                CollectionOverlapError, f"collection {member!r} is nested in several collections {owners}", member
            )
    nested = {c.name: set(g.nested_collections(c.name)) for c in g.collections}
    for c in g.collections:
        if c.name in nested[c.name]:
            report.add(CollectionOverlapError, f"collection {c.name!r} is nested in itself", c.name)
    names = [c.name for c in g.collections]
    contents = {c: set(g.collection_nodes(c)) for c in names}
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            shared = contents[a] & contents[b]
            if shared and a not in nested[b] and b not in nested[a]:
                report.add(
                    CollectionOverlapError,
                    f"collections {a!r} and {b!r} share {sorted(shared)} without nesting",
                    a,
                    b,
                )


def _check_nodes(g, report):
    for n in g.nodes:
        if n.kind in VARIABLE_KINDS:
            if not n.distribution:
                report.add(ArityError, f"node {n.name!r} has no distribution", n.name)
                continue
            try:
                refs = set()
                for expr in (n.params or {}).values():
                    refs.update(expressions.names(expr))
                parents = {p.source for p in g.parents(n.name)}
            except UnknownNameError:
                continue
            if refs != parents:
                missing = sorted(parents - refs)
                extra = sorted(refs - parents)
                report.add(
                    ArityError,
                    f"node {n.name!r}: distribution uses {sorted(refs)} but incoming links provide "
                    f"{sorted(parents)} (unlinked {extra}, unused {missing})",
                    n.name,
                )
            if n.kind == LATENT and n.distribution == "categorical" and g.category_count(n.name) is None:
                report.add(SchemaError, f"categorical latent {n.name!r} has no static category count", n.name)
        elif n.kind in CONDITION_KINDS or n.kind in PARAM_KINDS:
            if n.distribution or n.params:
                report.add(ArityError, f"{n.kind} node {n.name!r} cannot carry a distribution", n.name)
        if n.kind in (OBSERVED, FIXED_PARAM) and n.value is None:
            report.add(SchemaError, f"{n.kind} node {n.name!r} needs a value", n.name)
        if n.kind == VARIABLE_PARAM and n.init is None:
            report.add(SchemaError, f"variable parameter {n.name!r} needs an init value", n.name)


def _check_control_flow(g, report):
    for link in g.links:
        if link.when is None or not g.has_node(link.target):
            continue
        from_branch = g.has_node(link.source) and g.node(link.source).kind == BRANCH
        into_selection = g.node(link.target).kind == SELECTION
        if link.kind == INFLUENCE or not (from_branch or into_selection):
            report.add(
                ControlFlowError,
                f"link {link.source}->{link.target} has a 'when' label but is not a branch output or selection input",
                f"{link.source}->{link.target}",
            )
    for n in g.nodes:
        if n.kind not in CONDITION_KINDS:
            continue
        if not n.predicate:
            report.add(ControlFlowError, f"{n.kind} node {n.name!r} has no predicate", n.name)
        try:
            inputs = g.parents(n.name)
            influences = g.influences(n.name)
        except UnknownNameError:
            continue
        if not influences:
            report.add(ControlFlowError, f"{n.kind} node {n.name!r} has no influence link", n.name)
        if n.kind == BRANCH:
            if len(inputs) != 1:
                report.add(ControlFlowError, f"branch {n.name!r} needs exactly one generative input", n.name)
            outs = [lk for lk in g.links if lk.source == n.name and lk.kind in (GENERATIVE, DETACHED)]
            if not outs:
                report.add(ControlFlowError, f"branch {n.name!r} has no outgoing generative link", n.name)
            for lk in outs:
                if lk.when is None:
                    report.add(ControlFlowError, f"branch output {n.name}->{lk.target} needs a 'when' label", n.name)
        else:
            if not inputs:
                report.add(ControlFlowError, f"selection {n.name!r} has no generative input", n.name)
            for p in inputs:
                if p.link.when is None:
                    report.add(ControlFlowError, f"selection input {p.source}->{n.name} needs a 'when' label", n.name)


def _check_registry(g, report):
    reg = g.registry
    for name in g.predicates:
        if name not in reg.predicates:
            report.add(UnknownNameError, f"predicate {name!r} is not registered", name)
    for n in g.nodes:
        if n.predicate and n.predicate not in reg.predicates:
            report.add(UnknownNameError, f"node {n.name!r} uses unregistered predicate {n.predicate!r}", n.name)
        if n.predicate and g.predicates and n.predicate not in g.predicates:
            report.add(UnknownNameError, f"node {n.name!r} uses undeclared predicate {n.predicate!r}", n.name)
        for expr in (n.params or {}).values():
            for fn in expressions.functions(expr):
                if fn not in reg.functions:
                    report.add(UnknownNameError, f"node {n.name!r} uses unregistered function {fn!r}", n.name)


def build_graph(spec, strict: bool = True, registry: Registry | None = None) -> GenerativeFlowGraph:
    """Build a graph from a parsed model description (a dict) or model file text.

    With ``strict`` the graph is validated and the first violation is raised
    as its typed error; otherwise the graph is returned as is.
    """
    from gfg.modelfile import graph_from_spec

    g = graph_from_spec(spec, registry=registry)
    if strict:
        validate(g).raise_first()
    return g


@dataclass
class Trace:
    """One forward execution: realized values, execution path and routing choices."""

    values: dict[str, float]
    path: list[str]
    branch_choices: dict[str, str]

    def __eq__(self, other):
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.path == other.path
            and self.branch_choices == other.branch_choices
            and self.values.keys() == other.values.keys()
            and all(np.array_equal(self.values[k], other.values[k]) for k in self.values)
        )


def sample_trace(g: GenerativeFlowGraph, rng_seed) -> Trace:
    """Forward-simulate ``g`` once: latents from their distributions, observed nodes pinned."""
    from gfg.engine import Program

    rng = np.random.default_rng(rng_seed)
    ev = Program(g).simulate(rng)
    values = {k: float(v) for k, v in ev.values.items()}
    return Trace(values=values, path=list(ev.path), branch_choices=dict(ev.choices))


__all__ = [
    "Node",
    "Link",
    "Collection",
    "ParentRef",
    "GenerativeFlowGraph",
    "ValidationEntry",
    "ValidationReport",
    "Trace",
    "build_graph",
    "validate",
    "sample_trace",
]
