"""Graphviz DOT rendering of a graph, plus a small DOT syntax checker.

Style mapping::

    latent            circle
    observed          filled circle
    variable param    square
    fixed param       filled square
    branch            diamond
    selection         hexagon
    generative link   solid edge
    detached link     solid edge, label "detached", arrowhead "curve"
    influence link    dashed edge
    collection        cluster labelled with its name
    plate             cluster labelled "name: i = lo..hi", double border

Graphviz has no half-circle arrow marker, so a detached link is marked by its
label and the ``curve`` arrowhead instead.
"""

from __future__ import annotations

import re

from gfg.graph import (
    BRANCH,
    DETACHED,
    FIXED_PARAM,
    INFLUENCE,
    LATENT,
    OBSERVED,
    SELECTION,
    VARIABLE_PARAM,
    GenerativeFlowGraph,
)

NODE_STYLE = {
    LATENT: 'shape=circle',
    OBSERVED: 'shape=circle, style=filled, fillcolor="gray80"',
    VARIABLE_PARAM: 'shape=square',
    FIXED_PARAM: 'shape=square, style=filled, fillcolor="gray80"',
    BRANCH: 'shape=diamond',
    SELECTION: 'shape=hexagon',
}


def quote(s: str) -> str:
    return '"' + str(s).replace("\\", "\\\\").replace('"', '\\"') + '"'


def _cluster_label(c) -> str:
    if c.index is not None:
        name, lo, hi = c.index
        return f"{c.name}: {name} = {lo}..{hi}"
    if c.replicate is not None:
        return f"{c.name} x{c.replicate}"
    return c.name


def render_dot(g: GenerativeFlowGraph, name: str = "gfg") -> str:
    """Deterministic DOT text for ``g``."""
    lines = [f"digraph {quote(name)} {{", "  compound=true;", '  node [fontname="Helvetica"];']
    names = {c.name for c in g.collections}
    nested = {m for c in g.collections for m in c.members if m in names}
    placed: set[str] = set()

    def emit(c, depth):
        pad = "  " * depth
        lines.append(f"{pad}subgraph {quote('cluster_' + c.name)} {{")
        lines.append(f"{pad}  label={quote(_cluster_label(c))};")
        if c.index is not None or c.replicate is not None:
            lines.append(f"{pad}  peripheries=2;")
        for m in c.members:
            if m in names:
                emit(g.collection(m), depth + 1)
            elif g.has_node(m) and m not in placed:
                placed.add(m)
                lines.append(f"{pad}  {quote(m)} [{NODE_STYLE[g.node(m).kind]}];")
        lines.append(f"{pad}}}")

    for c in g.collections:
        if c.name not in nested:
            emit(c, 1)
    for n in g.nodes:
        if n.name not in placed:
            lines.append(f"  {quote(n.name)} [{NODE_STYLE[n.kind]}];")

    for link in g.links:
        attrs = []
        source = link.source
        if source in names:
            members = g.collection_nodes(source)
            attrs.append(f"ltail={quote('cluster_' + source)}")
            source = members[0] if members else source
        if link.kind == DETACHED:
            attrs += ['label="detached"', "arrowhead=curve"]
        elif link.kind == INFLUENCE:
            attrs.append("style=dashed")
        if link.subset is not None:
            attrs.append(f"taillabel={quote('{' + ','.join(link.subset) + '}')}")
        if link.when is not None:
            attrs.append(f"headlabel={quote(str(link.when))}")
        suffix = f" [{', '.join(attrs)}]" if attrs else ""
        lines.append(f"  {quote(source)} -> {quote(link.target)}{suffix};")
    lines.append("}")
    return "\n".join(lines) + "\n"


# syntax check

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+|//[^\n]*|/\*.*?\*/|\#[^\n]*)
  | (?P<str>"(?:[^"\\]|\\.)*")
  | (?P<html><[^<>]*>)
  | (?P<edge>->|--)
  | (?P<num>-?(?:\.\d+|\d+(?:\.\d*)?))
  | (?P<id>[A-Za-z_\x80-\uffff][A-Za-z_0-9\x80-\uffff]*)
  | (?P<punct>[{}\[\];,=:])
    """,
    re.VERBOSE | re.DOTALL,
)
KEYWORDS = {"strict", "graph", "digraph", "node", "edge", "subgraph"}


class DotSyntaxError(ValueError):
    pass


def _tokens(text: str):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m:
            raise DotSyntaxError(f"unexpected character {text[pos]!r} at offset {pos}")
        pos = m.end()
        kind = m.lastgroup
        if kind == "ws":
            continue
        value = m.group()
        if kind == "id" and value.lower() in KEYWORDS:
            kind = value.lower()
        elif kind in ("str", "html", "num"):
            kind = "id"
        elif kind == "punct":
            kind = value
        out.append((kind, value))
    return out


class _Parser:
    def __init__(self, tokens):
        self.t = tokens
        self.i = 0
        self.edgeop = "->"

    def peek(self, k=0):
        return self.t[self.i + k][0] if self.i + k < len(self.t) else None

    def take(self, kind):
        if self.peek() != kind:
            got = self.t[self.i][1] if self.i < len(self.t) else "end of input"
            raise DotSyntaxError(f"expected {kind!r}, got {got!r}")
        self.i += 1
        return self.t[self.i - 1][1]

    def graph(self):
        if self.peek() == "strict":
            self.take("strict")
        if self.peek() == "digraph":
            self.take("digraph")
        else:
            self.take("graph")
            self.edgeop = "--"
        if self.peek() == "id":
            self.take("id")
        self.block()
        if self.peek() is not None:
            raise DotSyntaxError("trailing input after the graph")

    def block(self):
        self.take("{")
        while self.peek() not in ("}", None):
            self.stmt()
            if self.peek() == ";":
                self.take(";")
        self.take("}")

    def stmt(self):
        k = self.peek()
        if k in ("graph", "node", "edge"):
            self.i += 1
            self.attr_list()
            return
        if k == "id" and self.peek(1) == "=":
            self.take("id")
            self.take("=")
            self.take("id")
            return
        self.operand()
        if self.peek() == "edge":
            while self.peek() == "edge":
                if self.take("edge") != self.edgeop:
                    raise DotSyntaxError(f"edge operator must be {self.edgeop!r} in this graph")
                self.operand()
        if self.peek() == "[":
            self.attr_list()

    def operand(self):
        if self.peek() in ("subgraph", "{"):
            if self.peek() == "subgraph":
                self.take("subgraph")
                if self.peek() == "id":
                    self.take("id")
            self.block()
            return
        self.take("id")
        if self.peek() == ":":
            self.take(":")
            self.take("id")
            if self.peek() == ":":
                self.take(":")
                self.take("id")

    def attr_list(self):
        self.take("[")
        while self.peek() == "id":
            self.take("id")
            self.take("=")
            self.take("id")
            if self.peek() in (",", ";"):
                self.i += 1
        self.take("]")
        if self.peek() == "[":
            self.attr_list()


def check_dot(text: str) -> None:
    """Raise :class:`DotSyntaxError` unless ``text`` is a syntactically valid DOT graph."""
    _Parser(_tokens(text)).graph()


def is_valid_dot(text: str) -> bool:
    try:
        check_dot(text)
    except DotSyntaxError:
        return False
    return True


__all__ = ["render_dot", "check_dot", "is_valid_dot", "DotSyntaxError", "NODE_STYLE"]
