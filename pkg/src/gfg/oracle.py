"""Exact posteriors for small models, used to check the approximate engines.

Nothing here goes through :mod:`gfg.engine`: enumeration walks each
assignment with its own scalar evaluator, and the linear-Gaussian oracle
builds the joint covariance directly. Only the graph, expression evaluation
and untaped ``log_prob`` are shared with inference.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from gfg import distributions, expressions
from gfg.errors import SupportMismatchError, TooLargeError, UnsupportedError
from gfg.factorize import name_key
from gfg.graph import BRANCH, FIXED_PARAM, LATENT, OBSERVED, SELECTION, VARIABLE_PARAM, GenerativeFlowGraph

MAX_ASSIGNMENTS = 10**6


@dataclass
class ExactPosterior:
    """``kind`` is ``"table"`` (discrete enumeration) or ``"gaussian"``."""

    kind: str
    latents: tuple[str, ...]
    log_evidence: float
    table: dict = field(default_factory=dict)
    marginals: dict = field(default_factory=dict)
    means: dict = field(default_factory=dict)
    stds: dict = field(default_factory=dict)
    covariance: np.ndarray | None = None

    def summary(self) -> dict:
        if self.kind == "gaussian":
            return {z: {"mean": self.means[z], "std": self.stds[z]} for z in self.latents}
        return {z: {"probs": [float(p) for p in self.marginals[z]]} for z in self.latents}


# enumeration


def _param_value(g, n, theta):
    node = g.node(n)
    if node.kind == FIXED_PARAM:
        return node.value
    return theta.get(n, node.init)


def _key(v):
    return float(v) if np.ndim(v) == 0 else None


def _walk(g: GenerativeFlowGraph, order, parents, influences, assign: Mapping, theta: Mapping, cache=None) -> float:
    """Log joint of one full latent assignment, or ``-inf`` if it is inconsistent.

    A latent that the assignment's control flow never reaches must sit at 0;
    every other value of it is given zero mass so each trace is counted once.
    ``cache`` memoizes factors by the scalar values of their inputs.
    """
    values: dict = {}
    active: dict = {}
    choice: dict = {}
    total = 0.0
    funcs = g.registry.functions
    for n in order:
        node = g.node(n)
        kind = node.kind
        on = True
        env = {}
        hits = []
        for p in parents[n]:
            s = p.source
            link_on = active[s] and (g.node(s).kind != BRANCH or choice.get(s) == p.link.when)
            if active[s]:
                env[s] = values[s]
            if kind == SELECTION:
                hits.append((p, link_on))
            else:
                on = on and link_on
        if kind in (BRANCH, SELECTION) and on:
            args = [values[s] for s in influences[n]]
            choice[n] = int(np.rint(g.registry.predicates[node.predicate](*args)))
        if kind == SELECTION:
            picked = [p.source for p, link_on in hits if link_on and p.link.when == choice.get(n)]
            on = bool(picked)
        active[n] = on
        if not on:
            if kind == LATENT and assign[n] != 0:
                return -math.inf
            continue
        if kind in (FIXED_PARAM, VARIABLE_PARAM):
            values[n] = _param_value(g, n, theta)
        elif kind == BRANCH:
            values[n] = next(iter(env.values()), 0.0)
        elif kind == SELECTION:
            values[n] = env[picked[0]]
        else:
            v = assign[n] if kind == LATENT else node.value
            key = (n, _key(v), *((s, _key(x)) for s, x in sorted(env.items())))
            if cache is not None and None not in key and key in cache:
                lp = cache[key]
            else:
                params = {k: expressions.evaluate(e, env, funcs) for k, e in node.params.items()}
                lp = float(distributions.make(node.distribution, params).log_prob(v))
                if cache is not None and None not in key:
                    cache[key] = lp
            total += lp
            values[n] = v
    return total


def _logsumexp(xs: np.ndarray) -> float:
    m = np.max(xs)
    if not np.isfinite(m):
        return -math.inf
    return float(m + np.log(np.sum(np.exp(xs - m))))


def enumerate_posterior(g: GenerativeFlowGraph, max_states: int = 6, theta: Mapping | None = None) -> ExactPosterior:
    """Exact ``p(Z | X)`` by summing the joint over every latent assignment."""
    theta = theta or {}
    latents = tuple(sorted(g.latents, key=name_key))
    sizes = []
    for z in latents:
        k = g.category_count(z)
        if k is None:
            raise UnsupportedError(f"latent {z!r} is continuous; enumeration needs discrete latents")
        if k > max_states:
            raise TooLargeError(f"latent {z!r} has {k} states, more than {max_states}")
        sizes.append(k)
    if math.prod(sizes) > MAX_ASSIGNMENTS:
        raise TooLargeError(f"{math.prod(sizes)} joint assignments exceed {MAX_ASSIGNMENTS}")
    order = g.topological_order()
    parents = {n: g.parents(n) for n in order}
    influences = {n: g.influences(n) for n in order}
    states = list(itertools.product(*(range(k) for k in sizes)))
    cache: dict = {}
    logw = np.array([_walk(g, order, parents, influences, dict(zip(latents, s)), theta, cache) for s in states])
    log_z = _logsumexp(logw)
    if not math.isfinite(log_z):
        raise UnsupportedError("every assignment has zero probability under the observations")
    probs = np.exp(logw - log_z)
    probs /= probs.sum()
    table = {s: float(p) for s, p in zip(states, probs)}
    marginals = {}
    for i, z in enumerate(latents):
        m = np.zeros(sizes[i])
        for s, p in zip(states, probs):
            m[s[i]] += p
        marginals[z] = m
    return ExactPosterior("table", latents, log_z, table=table, marginals=marginals)


# Gaussian oracles


def conjugate_gaussian_posterior(prior: distributions.Normal, likelihood_noise: float, observations: Sequence[float]):
    """Posterior of ``z ~ prior`` after observing ``x_i ~ N(z, likelihood_noise)``."""
    if likelihood_noise <= 0:
        raise ValueError("likelihood noise must be positive")
    mu0, s0 = float(prior.loc), float(prior.scale)
    precision = 1.0 / s0**2 + len(observations) / likelihood_noise**2
    mean = (mu0 / s0**2 + sum(observations) / likelihood_noise**2) / precision
    return distributions.Normal(mean, 1.0 / math.sqrt(precision))


def conjugate_log_evidence(prior: distributions.Normal, likelihood_noise: float, observations: Sequence[float]) -> float:
    """``log p(x_1..x_n)`` with ``z`` integrated out (a multivariate normal density)."""
    x = np.asarray(observations, dtype=float)
    n = len(x)
    if n == 0:
        return 0.0
    mu0, s0 = float(prior.loc), float(prior.scale)
    cov = np.full((n, n), s0**2) + np.eye(n) * likelihood_noise**2
    return _mvn_logpdf(x, np.full(n, mu0), cov)


def _mvn_logpdf(x, mean, cov) -> float:
    d = x - mean
    sign, logdet = np.linalg.slogdet(cov)
    return float(-0.5 * (len(x) * math.log(2 * math.pi) + logdet + d @ np.linalg.solve(cov, d)))


def _affine(fn, names: list[str], where: str):
    """Coefficients ``(c, a)`` with ``fn(v) = c + a . v``; checked at a random point."""
    zero = {n: 0.0 for n in names}
    c = fn(zero)
    a = np.array([fn({**zero, n: 1.0}) - c for n in names])
    probe = np.random.default_rng(12345).normal(size=len(names)) * 1.7
    if abs(fn(dict(zip(names, probe))) - (c + a @ probe)) > 1e-9 * (1 + abs(c) + np.abs(a).sum()):
        raise UnsupportedError(f"{where} is not affine in its parents")
    return c, a


def linear_gaussian_posterior(g: GenerativeFlowGraph, theta: Mapping | None = None) -> ExactPosterior:
    """Exact posterior of a model whose nodes are normal with affine means and constant scales."""
    theta = theta or {}
    order = [n for n in g.topological_order() if g.node(n).kind in (LATENT, OBSERVED)]
    for n in g.topological_order():
        if g.node(n).kind in (BRANCH, SELECTION):
            raise UnsupportedError("control flow makes the model non-Gaussian")
    idx = {n: i for i, n in enumerate(order)}
    k = len(order)
    A = np.zeros((k, k))
    c = np.zeros(k)
    s = np.zeros(k)
    funcs = g.registry.functions
    for n in order:
        node = g.node(n)
        if node.distribution != "normal":
            raise UnsupportedError(f"node {n!r} is not normal")
        srcs = [p.source for p in g.parents(n)]
        rv = [m for m in srcs if m in idx]
        fixed = {m: _param_value(g, m, theta) for m in srcs if m not in idx}

        def ev(key, vals, node=node, fixed=fixed):
            return float(expressions.evaluate(node.params[key], {**fixed, **vals}, funcs))

        c[idx[n]], coeffs = _affine(lambda v: ev("loc", v), rv, f"mean of {n!r}")
        for m, a in zip(rv, coeffs):
            A[idx[n], idx[m]] = a
        scale0, scale_coeffs = _affine(lambda v: ev("scale", v), rv, f"scale of {n!r}")
        if np.any(scale_coeffs != 0) or scale0 <= 0:
            raise UnsupportedError(f"scale of {n!r} must be a positive constant")
        s[idx[n]] = scale0
    L = np.linalg.inv(np.eye(k) - A)
    mean = L @ c
    cov = L @ np.diag(s**2) @ L.T
    zi = [idx[z] for z in order if g.node(z).kind == LATENT]
    xi = [idx[x] for x in order if g.node(x).kind == OBSERVED]
    xbar = np.array([float(g.node(order[i]).value) for i in xi])
    if xi:
        Sxx = cov[np.ix_(xi, xi)]
        Szx = cov[np.ix_(zi, xi)]
        gain = np.linalg.solve(Sxx, Szx.T).T
        post_mean = mean[zi] + gain @ (xbar - mean[xi])
        post_cov = cov[np.ix_(zi, zi)] - gain @ Szx.T
        log_ev = _mvn_logpdf(xbar, mean[xi], Sxx)
    else:
        post_mean, post_cov, log_ev = mean[zi], cov[np.ix_(zi, zi)], 0.0
    latents = tuple(order[i] for i in zi)
    return ExactPosterior(
        "gaussian",
        latents,
        log_ev,
        means={z: float(m) for z, m in zip(latents, post_mean)},
        stds={z: float(math.sqrt(post_cov[j, j])) for j, z in enumerate(latents)},
        covariance=post_cov,
    )


def exact_posterior(g: GenerativeFlowGraph, theta: Mapping | None = None, max_states: int = 6) -> ExactPosterior:
    """Enumeration for discrete models, the linear-Gaussian oracle for normal ones."""
    if all(g.category_count(z) is not None for z in g.latents):
        return enumerate_posterior(g, max_states, theta)
    return linear_gaussian_posterior(g, theta)


def total_variation(p, q) -> float:
    """Half the L1 distance between two distributions over the same support."""
    if isinstance(p, Mapping) or isinstance(q, Mapping):
        if not (isinstance(p, Mapping) and isinstance(q, Mapping)) or set(p) != set(q):
            raise SupportMismatchError("tables have different supports")
        keys = list(p)
        a = np.array([p[k] for k in keys], dtype=float)
        b = np.array([q[k] for k in keys], dtype=float)
    else:
        a, b = np.asarray(p, dtype=float), np.asarray(q, dtype=float)
        if a.shape != b.shape:
            raise SupportMismatchError(f"supports of size {a.shape} and {b.shape} differ")
    return float(0.5 * np.abs(a - b).sum())


__all__ = [
    "ExactPosterior",
    "enumerate_posterior",
    "conjugate_gaussian_posterior",
    "conjugate_log_evidence",
    "linear_gaussian_posterior",
    "exact_posterior",
    "total_variation",
]
