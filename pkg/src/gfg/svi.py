"""Stochastic variational inference.

The objective is the Monte-Carlo dual ``E_q[log p(Z, X) - log q(Z)]``. Its
gradient combines the pathwise (reparameterized) estimator for normal latents
and the score-function (REINFORCE) estimator, with a moving-average baseline,
for discrete ones. :class:`MonteCarloObjective` is shared with
:mod:`gfg.smp`, so a message-passing run over a single collection performs the
same floating-point operations as :func:`fit`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from gfg import autodiff as ad
from gfg import distributions as dist
from gfg.engine import Program
from gfg.errors import DivergenceError, MissingMessageError, OwnershipError, UnsupportedError
from gfg.factorize import name_key
from gfg.graph import LATENT, OBSERVED, GenerativeFlowGraph

ESTIMATORS = ("auto", "reparam", "reinforce")
OPTIMIZERS = ("adam", "sga")


# variational families


@dataclass(frozen=True)
class VariationalFactor:
    """Mean-field factor over ``latents``; normal or categorical per latent.

    Parameters are named ``<latent>.loc`` and ``<latent>.log_scale`` for a
    normal latent and ``<latent>.logits.<k>`` for a discrete one.
    """

    owner: str
    latents: tuple[str, ...]
    sizes: tuple[int | None, ...]

    def size(self, latent: str) -> int | None:
        return self.sizes[self.latents.index(latent)]

    def is_discrete(self, latent: str) -> bool:
        return self.size(latent) is not None

    def param_names(self, latent: str | None = None) -> list[str]:
        out = []
        for z, k in zip(self.latents, self.sizes):
            if latent is not None and z != latent:
                continue
            if k is None:
                out += [f"{z}.loc", f"{z}.log_scale"]
            else:
                out += [f"{z}.logits.{j}" for j in range(k)]
        return out

    def init_params(self) -> dict[str, float]:
        return {name: 0.0 for name in self.param_names()}

    def distribution(self, latent: str, phi: Mapping):
        k = self.size(latent)
        if k is None:
            return dist.Normal(phi[f"{latent}.loc"], ad.exp(phi[f"{latent}.log_scale"]))
        return dist.Categorical(logits=[phi[f"{latent}.logits.{j}"] for j in range(k)])

    def summary(self, phi: Mapping) -> dict:
        out = {}
        for z, k in zip(self.latents, self.sizes):
            if k is None:
                out[z] = {"mean": float(phi[f"{z}.loc"]), "std": float(math.exp(phi[f"{z}.log_scale"]))}
            else:
                out[z] = {"probs": [float(p) for p in self.distribution(z, phi).probs]}
        return out


def mean_field(g: GenerativeFlowGraph, latents: Iterable[str] | None = None, owner: str = "q") -> VariationalFactor:
    """Mean-field factor over ``latents`` (default: every latent of ``g``)."""
    names = sorted(g.latents if latents is None else latents, key=name_key)
    sizes = []
    for z in names:
        k = g.category_count(z)
        if g.node(z).distribution != "normal" and k is None:
            raise UnsupportedError(f"cannot size the variational factor of {z!r}")
        sizes.append(k)
    return VariationalFactor(owner, tuple(names), tuple(sizes))


def merge_phi(factors: Sequence[VariationalFactor]) -> dict[str, float]:
    out: dict[str, float] = {}
    for f in factors:
        out.update(f.init_params())
    return out


# schedules and optimizers


@dataclass(frozen=True)
class Constant:
    rho: float

    def rate(self, step: int) -> float:
        return self.rho


@dataclass(frozen=True)
class RobbinsMonro:
    """Step sizes ``a * step ** -kappa``."""

    a: float = 1.0
    kappa: float = 1.0

    def rate(self, step: int) -> float:
        return self.a * step ** (-self.kappa)


def validate_robbins_monro(schedule) -> bool:
    """True iff the step sizes sum to infinity while their squares sum to a finite value."""
    if isinstance(schedule, RobbinsMonro):
        return schedule.a > 0 and 0.5 < schedule.kappa <= 1.0
    return False


def sga_step(W, grad, rho):
    """Plain stochastic gradient ascent ``W + rho * grad`` on arrays, floats or dicts."""
    if isinstance(W, Mapping):
        return {k: W[k] + rho * grad.get(k, 0.0) for k in W}
    return W + rho * grad


class SGA:
    def __init__(self, schedule):
        self.schedule = schedule
        self.t = 0

    def step(self, W: dict, grad: dict) -> dict:
        self.t += 1
        return sga_step(W, grad, self.schedule.rate(self.t))


class Adam:
    """Adaptive-moment ascent with bias-corrected first and second moments."""

    def __init__(self, schedule, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.schedule = schedule
        self.b1, self.b2, self.eps = b1, b2, eps
        self.m: dict = {}
        self.v: dict = {}
        self.t = 0

    def step(self, W: dict, grad: dict) -> dict:
        self.t += 1
        rho = self.schedule.rate(self.t)
        out = {}
        for k, w in W.items():
            g = grad.get(k, 0.0)
            m = self.b1 * self.m.get(k, 0.0) + (1 - self.b1) * g
            v = self.b2 * self.v.get(k, 0.0) + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.b1**self.t)
            v_hat = v / (1 - self.b2**self.t)
            out[k] = w + rho * m_hat / (math.sqrt(v_hat) + self.eps)
        return out


@dataclass(frozen=True)
class SviConfig:
    steps: int = 2000
    mc_samples: int = 8
    lr_schedule: Constant | RobbinsMonro = Constant(1e-2)
    seed: int | Sequence[int] = 0
    optimizer: str = "adam"
    estimator: str = "auto"
    baseline_decay: float = 0.9

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if isinstance(self.lr_schedule, RobbinsMonro) and not validate_robbins_monro(self.lr_schedule):
            raise ValueError(f"schedule {self.lr_schedule} violates the Robbins-Monro conditions")
        if not isinstance(self.lr_schedule, (Constant, RobbinsMonro)):
            raise ValueError("lr_schedule must be Constant or RobbinsMonro")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")

    def make_optimizer(self):
        return Adam(self.lr_schedule) if self.optimizer == "adam" else SGA(self.lr_schedule)


class MovingAverageBaseline:
    """Exponential moving average of past objective values, used as REINFORCE control variate."""

    def __init__(self, decay: float = 0.9, value: float = 0.0):
        self.decay = decay
        self.value = value
        self.count = 0

    def update(self, x: float) -> None:
        self.value = x if self.count == 0 else self.decay * self.value + (1 - self.decay) * x
        self.count += 1


# the Monte-Carlo objective


class ParamGradient(NamedTuple):
    phi: dict
    theta: dict


@dataclass
class ObjectiveSample:
    """One Monte-Carlo evaluation.

    ``estimate`` is the taped sample mean of the objective; ``surrogate`` adds
    the score-function term, so its gradient (not its value) is the estimator.
    """

    estimate: ad.Scalar | float
    surrogate: ad.Scalar | float
    samples: np.ndarray
    phi_leaves: dict = field(default_factory=dict)
    theta_leaves: dict = field(default_factory=dict)
    frozen_leaves: dict = field(default_factory=dict)

    def gradient(self, per_sample: bool = False) -> ParamGradient:
        if not isinstance(self.surrogate, ad.Scalar):
            zero = {k: 0.0 for k in self.phi_leaves}
            return ParamGradient(zero, {k: 0.0 for k in self.theta_leaves})
        grads = ad.backward(self.surrogate)
        scale = len(self.samples) if per_sample else 1

        def pick(leaf):
            g = grads[leaf]
            return g * scale if per_sample else float(g)

        return ParamGradient(
            {k: pick(v) for k, v in self.phi_leaves.items()},
            {k: pick(v) for k, v in self.theta_leaves.items()},
        )

    def frozen_gradient(self) -> dict:
        if not isinstance(self.surrogate, ad.Scalar):
            return {k: 0.0 for k in self.frozen_leaves}
        grads = ad.backward(self.surrogate)
        return {k: grads[v] for k, v in self.frozen_leaves.items()}


class MonteCarloObjective:
    """``E[sum of scored log factors - log q]`` for the latents owned by ``factors``.

    Latents needed by the scored factors but owned elsewhere are drawn from
    ``frozen`` factors without gradient. Draws happen in name order; a normal
    draw takes ``standard_normal(S)`` and a discrete one ``random(S)``.
    """

    def __init__(
        self,
        g: GenerativeFlowGraph,
        factors: Sequence[VariationalFactor],
        scored: Iterable[str] | None = None,
        frozen: Sequence[VariationalFactor] = (),
        trainable: Iterable[str] | None = None,
        program: Program | None = None,
    ):
        self.g = g
        self.program = program or Program(g)
        self.factors = list(factors)
        self.own: dict[str, VariationalFactor] = {}
        for f in self.factors:
            for z in f.latents:
                if z in self.own:
                    raise OwnershipError(f"latent {z!r} is owned by two variational factors")
                self.own[z] = f
        self.frozen: dict[str, VariationalFactor] = {}
        for f in frozen:
            for z in f.latents:
                if z not in self.own:
                    self.frozen[z] = f
        if scored is None:
            scored = g.names(LATENT, OBSERVED)
        self.scored = self.program.sort(scored)
        self.nodes = self.program.closure(self.scored)
        needed = {n for n in self.nodes if g.node(n).kind == LATENT}
        self.draw = sorted(needed | set(self.own), key=name_key)
        self.missing = [z for z in self.draw if z not in self.own and z not in self.frozen]
        self.trainable = list(g.variable_params if trainable is None else trainable)

    def evaluate(
        self,
        phi: Mapping,
        theta: Mapping,
        rng: np.random.Generator,
        samples: int,
        estimator: str = "auto",
        baseline: float = 0.0,
        frozen_phi: Mapping | None = None,
        per_sample: bool = False,
        track_frozen: bool = False,
    ) -> ObjectiveSample:
        if self.missing:
            raise MissingMessageError(f"no variational parameters for latents {self.missing}")
        frozen_phi = frozen_phi or {}
        S = samples
        tape = ad.Tape()

        def leaf(name, v):
            return tape.variable(np.full(S, float(v)) if per_sample else float(v), name)

        out = ObjectiveSample(0.0, 0.0, np.zeros(S))
        phi_t = {}
        for f in self.factors:
            for k in f.param_names():
                phi_t[k] = out.phi_leaves[k] = leaf("phi:" + k, phi[k])
        theta_all = {n: theta.get(n, self.g.node(n).init) for n in self.g.variable_params}
        for n in self.trainable:
            theta_all[n] = out.theta_leaves[n] = leaf("theta:" + n, theta_all[n])
        fphi = dict(frozen_phi)
        if track_frozen:
            for z in self.draw:
                if z in self.frozen:
                    for k in self.frozen[z].param_names(z):
                        fphi[k] = out.frozen_leaves[k] = tape.variable(float(frozen_phi[k]), "frozen:" + k)
            for n in self.g.variable_params:
                if n not in out.theta_leaves:
                    theta_all[n] = out.frozen_leaves[n] = tape.variable(float(theta_all[n]), "frozen:" + n)

        assign = {}
        logq = {}
        scored_by_score = []
        for z in self.draw:
            own = z in self.own
            f = self.own[z] if own else self.frozen[z]
            d = f.distribution(z, phi_t if own else fphi)
            if not f.is_discrete(z):
                eps = rng.standard_normal(S)
                pathwise = (own and estimator != "reinforce") or (not own and track_frozen)
                if pathwise:
                    v = d.rsample(eps=eps)
                else:
                    v = ad.value_of(d.loc) + ad.value_of(d.scale) * eps
                    if own:
                        scored_by_score.append(z)
            else:
                u = rng.random(S)
                cdf = np.cumsum(d.probs, axis=-1)
                v = np.sum(u[:, None] > cdf[..., :-1], axis=-1).astype(float)
                if own:
                    scored_by_score.append(z)
            assign[z] = v
            if own:
                logq[z] = d.log_prob(v)

        ev = self.program.run(assign, theta_all, scored=self.scored, nodes=self.nodes)
        for z, term in logq.items():
            mask = ev.masks.get(z, True)
            if mask is not True and not np.all(mask):
                logq[z] = ad.mul(np.asarray(mask, dtype=float), term)
        l = ad.sub(ev.total(), ad.add_n(list(logq.values()))) if logq else ev.total()
        values = np.broadcast_to(np.asarray(ad.value_of(l), dtype=float), (S,)).copy()
        out.samples = values
        if isinstance(l, ad.Scalar) and l.shape == ():
            l = ad.mul(np.ones(S), l)
        surrogate = ad.mul(1.0 / S, ad.sum(l)) if isinstance(l, ad.Scalar) else float(np.mean(values))
        out.estimate = surrogate
        if scored_by_score:
            score = ad.add_n([logq[z] for z in scored_by_score])
            centred = values - baseline
            surrogate = ad.add(surrogate, ad.mul(1.0 / S, ad.sum(ad.mul(centred, score))))
        out.surrogate = surrogate
        return out


def _ownership(g: GenerativeFlowGraph, q: Sequence[VariationalFactor]) -> list[VariationalFactor]:
    q = list(q) if not isinstance(q, VariationalFactor) else [q]
    counts: dict[str, int] = {}
    for f in q:
        for z in f.latents:
            counts[z] = counts.get(z, 0) + 1
    bad = [z for z in g.latents if counts.get(z, 0) != 1] + [z for z in counts if not g.has_node(z)]
    if bad:
        raise OwnershipError(f"latents {bad} are not owned by exactly one variational factor")
    return q


def _defaults(g, q, cfg, phi, theta, rng):
    q = _ownership(g, q if q is not None else [mean_field(g)])
    cfg = cfg or SviConfig()
    phi = dict(phi) if phi is not None else merge_phi(q)
    theta = dict(theta) if theta is not None else {n: g.node(n).init for n in g.variable_params}
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return q, cfg, phi, theta, rng


def elbo_samples(g, q=None, cfg=None, phi=None, theta=None, rng=None, samples: int | None = None) -> np.ndarray:
    """Per-sample values of ``log p(Z, X) - log q(Z)`` with ``Z ~ q``."""
    q, cfg, phi, theta, rng = _defaults(g, q, cfg, phi, theta, rng)
    obj = MonteCarloObjective(g, q)
    return obj.evaluate(phi, theta, rng, samples or cfg.mc_samples).samples


def elbo_estimate(g, q=None, cfg=None, phi=None, theta=None, rng=None):
    """Monte-Carlo ELBO estimate, taped in the variational and model parameters."""
    q, cfg, phi, theta, rng = _defaults(g, q, cfg, phi, theta, rng)
    obj = MonteCarloObjective(g, q)
    return obj.evaluate(phi, theta, rng, cfg.mc_samples).estimate


def _continuous(q) -> bool:
    return all(not f.is_discrete(z) for f in q for z in f.latents)


def grad_reparam(g, q=None, cfg=None, phi=None, theta=None, rng=None, per_sample: bool = False) -> ParamGradient:
    """Pathwise gradient estimate of the ELBO; every latent must be normal."""
    q, cfg, phi, theta, rng = _defaults(g, q, cfg, phi, theta, rng)
    if not _continuous(q):
        raise UnsupportedError("the reparameterized estimator needs continuous latents only")
    obj = MonteCarloObjective(g, q)
    return obj.evaluate(phi, theta, rng, cfg.mc_samples, estimator="reparam", per_sample=per_sample).gradient(
        per_sample
    )


def grad_reinforce(
    g, q=None, cfg=None, baseline=None, phi=None, theta=None, rng=None, per_sample: bool = False
) -> ParamGradient:
    """Score-function gradient estimate for Φ (pathwise for Θ) with baseline ``baseline``."""
    q, cfg, phi, theta, rng = _defaults(g, q, cfg, phi, theta, rng)
    b = baseline.value if isinstance(baseline, MovingAverageBaseline) else float(baseline or 0.0)
    obj = MonteCarloObjective(g, q)
    out = obj.evaluate(phi, theta, rng, cfg.mc_samples, estimator="reinforce", baseline=b, per_sample=per_sample)
    return out.gradient(per_sample)


# optimization


def optimize(
    objective: MonteCarloObjective,
    phi: dict,
    theta: dict,
    cfg: SviConfig,
    rng: np.random.Generator,
    frozen_phi: Mapping | None = None,
    callback: Callable[[int, dict], None] | None = None,
):
    """Run ``cfg.steps`` ascent steps on ``objective``; returns ``(phi, theta, trace)``.

    ``callback(step, W)`` sees the flat parameter dict after every update,
    keys prefixed ``phi:`` or ``theta:``.
    """
    opt = cfg.make_optimizer()
    baseline = MovingAverageBaseline(cfg.baseline_decay)
    trainable = objective.trainable
    W = {"phi:" + k: v for k, v in phi.items()}
    W.update({"theta:" + k: theta[k] for k in trainable})
    trace = []
    for step in range(1, cfg.steps + 1):
        cur_phi = {k[4:]: v for k, v in W.items() if k.startswith("phi:")}
        cur_theta = dict(theta)
        cur_theta.update({k[6:]: v for k, v in W.items() if k.startswith("theta:")})
        out = objective.evaluate(
            cur_phi, cur_theta, rng, cfg.mc_samples, cfg.estimator, baseline.value, frozen_phi=frozen_phi
        )
        value = float(np.mean(out.samples))
        if not math.isfinite(value):
            raise DivergenceError(
                f"non-finite objective at step {step}; phi={cur_phi}, theta={ {k: cur_theta[k] for k in trainable} }"
            )
        grad = out.gradient()
        G = {"phi:" + k: v for k, v in grad.phi.items()}
        G.update({"theta:" + k: v for k, v in grad.theta.items()})
        if not all(math.isfinite(v) for v in G.values()):
            raise DivergenceError(f"non-finite gradient at step {step}")
        baseline.update(value)
        W = opt.step(W, G)
        trace.append(value)
        if callback is not None:
            callback(step, W)
    phi = {k[4:]: v for k, v in W.items() if k.startswith("phi:")}
    theta = dict(theta)
    theta.update({k[6:]: v for k, v in W.items() if k.startswith("theta:")})
    return phi, theta, trace


def monotone_smooth(trace: Sequence[float]) -> list[float]:
    """Least-squares non-decreasing fit of ``trace`` (pool-adjacent-violators)."""
    blocks: list[list[float]] = []  # [mean, weight]
    for x in trace:
        blocks.append([float(x), 1.0])
        while len(blocks) > 1 and blocks[-2][0] > blocks[-1][0]:
            m2, w2 = blocks.pop()
            m1, w1 = blocks.pop()
            blocks.append([(m1 * w1 + m2 * w2) / (w1 + w2), w1 + w2])
    out: list[float] = []
    for m, w in blocks:
        out.extend([m] * int(w))
    return out


@dataclass
class FitResult:
    phi: dict
    theta: dict
    elbo: list
    elbo_smoothed: list
    q: list
    config: SviConfig

    def posterior(self) -> dict:
        out = {}
        for f in self.q:
            out.update(f.summary(self.phi))
        return out


def fit(g: GenerativeFlowGraph, q=None, cfg: SviConfig | None = None, phi=None, theta=None, callback=None) -> FitResult:
    """Fit the variational factors ``q`` (default: mean-field over every latent) and Θ jointly."""
    q, cfg, phi, theta, rng = _defaults(g, q, cfg, phi, theta, None)
    objective = MonteCarloObjective(g, q)
    phi, theta, trace = optimize(objective, phi, theta, cfg, rng, callback=callback)
    return FitResult(phi, theta, trace, monotone_smooth(trace), q, cfg)


__all__ = [
    "VariationalFactor",
    "mean_field",
    "Constant",
    "RobbinsMonro",
    "validate_robbins_monro",
    "sga_step",
    "SGA",
    "Adam",
    "SviConfig",
    "MovingAverageBaseline",
    "MonteCarloObjective",
    "ParamGradient",
    "elbo_samples",
    "elbo_estimate",
    "grad_reparam",
    "grad_reinforce",
    "optimize",
    "monotone_smooth",
    "FitResult",
    "fit",
]
