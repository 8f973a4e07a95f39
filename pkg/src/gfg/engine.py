"""Forward evaluation of a graph: values, path masks and per-node log terms.

One :class:`Program` serves every consumer. Trace simulation runs on scalars
and skips nodes that a branch or selection routes around. Objectives and
enumeration run on batches (arrays with one entry per Monte-Carlo sample or
per assignment); there a node off the executed path keeps a placeholder value
and its log term is multiplied by a zero mask, so it contributes no factor.

Values crossing a detached link pass through :func:`gfg.autodiff.stop_gradient`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from gfg import autodiff as ad
from gfg import distributions, expressions
from gfg.errors import GfgError, PredicateError
from gfg.graph import (
    BRANCH,
    FIXED_PARAM,
    LATENT,
    OBSERVED,
    SELECTION,
    VARIABLE_PARAM,
    GenerativeFlowGraph,
)


def _and(a, b):
    if a is True:
        return b
    if b is True:
        return a
    out = np.logical_and(a, b)
    return bool(out) if np.ndim(out) == 0 else out


def _or(a, b):
    if a is True or b is True:
        return True
    out = np.logical_or(a, b)
    return bool(out) if np.ndim(out) == 0 else out


def _is_on(mask) -> bool:
    return mask is True or bool(np.all(mask))


def _is_off(mask) -> bool:
    return mask is False or not bool(np.any(mask))


@dataclass
class Evaluation:
    values: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)
    choices: dict = field(default_factory=dict)
    path: list = field(default_factory=list)

    def total(self):
        """Sum of the log terms (taped when any term is)."""
        return ad.add_n(list(self.terms.values()))


class Program:
    """Precompiled evaluation order and parent lists of a graph."""

    def __init__(self, g: GenerativeFlowGraph):
        self.g = g
        self.order = g.topological_order()
        self.position = {n: i for i, n in enumerate(self.order)}
        self.nodes = {n.name: n for n in g.nodes}
        self.parents = {n: g.parents(n) for n in self.order}
        self.influences = {n: g.influences(n) for n in self.order}
        self.registry = g.registry

    def sort(self, names: Iterable[str]) -> list[str]:
        return sorted(set(names), key=self.position.__getitem__)

    def closure(self, scored: Iterable[str]) -> list[str]:
        """Nodes needed to score ``scored``, in evaluation order.

        The walk goes upstream through parameters and branch/selection nodes
        and stops at latent and observed nodes that are not scored themselves:
        those enter as given values.
        """
        scored = set(scored)
        need: set[str] = set()
        stack = list(scored)
        while stack:
            n = stack.pop()
            if n in need:
                continue
            need.add(n)
            if self.nodes[n].kind in (LATENT, OBSERVED) and n not in scored:
                continue
            stack.extend(p.source for p in self.parents[n])
            stack.extend(self.influences[n])
        return self.sort(need)

    def distribution(self, name: str, env: Mapping):
        node = self.nodes[name]
        params = {k: expressions.evaluate(e, env, self.registry.functions) for k, e in node.params.items()}
        return distributions.make(node.distribution, params)

    def _predicate(self, name: str, values: dict):
        node = self.nodes[name]
        args = []
        for s in self.influences[name]:
            if s not in values:
                raise PredicateError(f"predicate of {name!r} needs the value of {s!r}")
            args.append(ad.value_of(values[s]))
        try:
            out = np.rint(np.asarray(self.registry.predicates[node.predicate](*args))).astype(int)
        except Exception as exc:
            raise PredicateError(f"predicate {node.predicate!r} of {name!r} failed: {exc}") from exc
        return int(out) if out.ndim == 0 else out

    def run(
        self,
        assign: Mapping,
        theta: Mapping | None = None,
        scored: Iterable[str] | None = None,
        nodes: Iterable[str] | None = None,
        rng: np.random.Generator | None = None,
        shape=(),
        skip_inactive: bool = False,
    ) -> Evaluation:
        """Evaluate ``nodes`` (default: all) in order.

        Latents take their value from ``assign``; a latent missing there is
        sampled from its distribution with ``rng``. Variable parameters take
        their value from ``theta`` and fall back to their initial value.
        Scored latent/observed nodes get a log term in ``Evaluation.terms``.
        With ``skip_inactive`` nodes off the executed path are not evaluated.
        """
        theta = theta or {}
        order = self.order if nodes is None else list(nodes)
        scored = set(self.g.names(LATENT, OBSERVED)) if scored is None else set(scored)
        ev = Evaluation()
        values, masks = ev.values, ev.masks
        for n in order:
            node = self.nodes[n]
            kind = node.kind
            mask = True
            env = {}
            sel_inputs = []
            for p in self.parents[n]:
                s = p.source
                if s not in values:
                    if s in masks:  # skipped upstream
                        mask = False
                    continue
                link_on = masks[s]
                if self.nodes[s].kind == BRANCH:
                    link_on = _and(link_on, _eq(ev.choices[s], p.link.when))
                v = values[s]
                env[s] = ad.stop_gradient(v) if p.detached else v
                if kind == SELECTION:
                    sel_inputs.append((p, link_on))
                else:
                    mask = _and(mask, link_on)
            if kind in (BRANCH, SELECTION) and not (skip_inactive and _is_off(mask)):
                choice = self._predicate(n, values)
                ev.choices[n] = choice
                if kind == SELECTION:
                    mask = False
                    picks = []
                    for p, link_on in sel_inputs:
                        hit = _and(link_on, _eq(choice, p.link.when))
                        mask = _or(mask, hit)
                        if not _is_off(hit):
                            picks.append((hit, env[p.source]))
                    values_sel = _select(picks)
            masks[n] = mask
            if skip_inactive and _is_off(mask):
                continue
            if kind == FIXED_PARAM:
                value = node.value
            elif kind == VARIABLE_PARAM:
                value = theta.get(n, node.init)
            elif kind == BRANCH:
                (value,) = env.values() if env else (0.0,)
            elif kind == SELECTION:
                value = values_sel
            else:
                dist = None
                if kind == OBSERVED:
                    value = node.value
                elif n in assign:
                    value = assign[n]
                elif rng is not None:
                    dist = self.distribution(n, env)
                    value = dist.sample(rng, shape)
                else:
                    raise GfgError(f"no value for latent {n!r}")
                if n in scored:
                    if dist is None:
                        dist = self.distribution(n, env)
                    term = dist.log_prob(value)
                    if not _is_on(mask):
                        term = ad.mul(np.asarray(mask, dtype=float), term)
                    ev.terms[n] = term
            values[n] = value
            if skip_inactive:
                ev.path.append(n)
        return ev

    def simulate(self, rng: np.random.Generator) -> Evaluation:
        """One forward trace: latents sampled, nodes off the path skipped."""
        ev = self.run({}, rng=rng, scored=(), skip_inactive=True)
        routes = {}
        for b, choice in ev.choices.items():
            if self.nodes[b].kind == BRANCH:
                for link in self.g.links:
                    if link.source == b and link.when == choice:
                        routes[b] = link.target
                        break
            else:
                for p in self.parents[b]:
                    if p.link.when == choice:
                        routes[b] = p.source
                        break
        ev.choices = routes
        return ev


def _eq(choice, when):
    out = np.asarray(choice) == when
    return bool(out) if out.ndim == 0 else out


def _select(picks):
    if not picks:
        return 0.0
    if len(picks) == 1 and _is_on(picks[0][0]):
        return picks[0][1]
    return ad.add_n([ad.mul(np.asarray(hit, dtype=float), v) for hit, v in picks])
