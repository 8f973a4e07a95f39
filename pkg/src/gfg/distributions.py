"""Probability functions: log-density/mass, sampling and closed-form divergences.

Parameters may be floats, numpy arrays (a Monte-Carlo batch) or taped
:class:`~gfg.autodiff.Scalar` values; log probabilities are differentiable in
whichever parameters are taped. Discrete values are carried as integer-valued
floats.
"""

from __future__ import annotations

import math

import numpy as np

from gfg import autodiff as ad
from gfg.autodiff import value_of
from gfg.errors import DomainError, UnsupportedError

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

FAMILIES = ("normal", "bernoulli", "categorical")


def _const_log(p):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0):
        raise DomainError("negative probability")
    with np.errstate(divide="ignore"):
        out = np.log(p)
    return float(out) if out.ndim == 0 else out


def _log(p):
    # taped probabilities must be strictly positive; constants may be zero
    return ad.log(p) if isinstance(p, ad.Scalar) else _const_log(p)


def _as_index(v, size: int):
    arr = np.asarray(value_of(v), dtype=float)
    idx = np.rint(arr)
    if np.any(np.abs(arr - idx) > 1e-9) or np.any(idx < 0) or np.any(idx >= size):
        raise DomainError(f"value {v!r} outside support {{0..{size - 1}}}")
    return idx.astype(int)


class Normal:
    family = "normal"
    discrete = False

    def __init__(self, loc, scale):
        if np.any(np.asarray(value_of(scale)) <= 0):
            raise DomainError(f"Normal scale must be positive, got {value_of(scale)!r}")
        self.loc = loc
        self.scale = scale
        self.last_eps = None

    def __repr__(self):
        return f"Normal({value_of(self.loc)!r}, {value_of(self.scale)!r})"

    @property
    def mean(self):
        return value_of(self.loc)

    @property
    def stddev(self):
        return value_of(self.scale)

    def log_prob(self, v):
        if not np.all(np.isfinite(value_of(v))):
            raise DomainError(f"non-finite value {value_of(v)!r} for Normal")
        z = (v - self.loc) / self.scale
        return -0.5 * (z * z) - _log(self.scale) - HALF_LOG_2PI

    def sample(self, rng: np.random.Generator, shape=None):
        shape = np.broadcast_shapes(np.shape(self.mean), np.shape(self.stddev)) if shape is None else shape
        eps = rng.standard_normal(shape)
        return self.mean + self.stddev * eps

    def rsample(self, rng: np.random.Generator | None = None, shape=None, eps=None):
        """Location-scale sample ``loc + scale * eps``, differentiable in loc and scale.

        The standard-normal noise is drawn from ``rng`` unless ``eps`` is given;
        either way it is kept on ``last_eps``.
        """
        if eps is None:
            if shape is None:
                shape = np.broadcast_shapes(np.shape(self.mean), np.shape(self.stddev))
            eps = rng.standard_normal(shape)
            if eps.ndim == 0:
                eps = float(eps)
        self.last_eps = eps
        return self.loc + self.scale * eps


class Bernoulli:
    family = "bernoulli"
    discrete = True
    support_size = 2

    def __init__(self, logit=None, probs=None):
        if (logit is None) == (probs is None):
            raise ValueError("give exactly one of logit or probs")
        if probs is not None:
            pv = np.asarray(value_of(probs))
            if np.any(pv < 0) or np.any(pv > 1):
                raise DomainError(f"Bernoulli probability outside [0, 1]: {pv!r}")
        self.logit = logit
        self.probs_param = probs

    @property
    def probs(self):
        if self.probs_param is not None:
            return value_of(self.probs_param)
        return value_of(ad.sigmoid(value_of(self.logit)))

    def log_prob(self, v):
        onehot = _as_index(v, 2).astype(float)
        if self.logit is not None:
            return onehot * self.logit - ad.softplus(self.logit)
        p = self.probs_param
        log_p = _log(p)
        log_q = _log(1.0 - p)
        if isinstance(p, ad.Scalar):
            return onehot * log_p + (1.0 - onehot) * log_q
        return np.where(onehot > 0, log_p, log_q) if np.ndim(onehot) or np.ndim(log_p) else (
            log_p if onehot else log_q
        )

    def sample(self, rng: np.random.Generator, shape=None):
        p = np.asarray(self.probs)
        shape = p.shape if shape is None else shape
        out = (rng.random(shape) < p).astype(float)
        return float(out) if out.ndim == 0 else out

    def rsample(self, *args, **kwargs):
        raise UnsupportedError("Bernoulli has no reparameterized sampler")


class Categorical:
    """Categorical over ``{0..K-1}`` from ``K`` logits or probabilities.

    ``logits``/``probs`` is a sequence of ``K`` entries (each a float, array or
    Scalar) or an array whose last axis enumerates the categories.
    """

    family = "categorical"
    discrete = True

    def __init__(self, logits=None, probs=None):
        if (logits is None) == (probs is None):
            raise ValueError("give exactly one of logits or probs")
        raw = logits if logits is not None else probs
        if isinstance(raw, np.ndarray):
            entries = [raw[..., k] for k in range(raw.shape[-1])]
        else:
            entries = list(raw)
        if not entries:
            raise DomainError("Categorical needs at least one category")
        self.use_logits = logits is not None
        self.entries = entries
        self.support_size = len(entries)
        self.taped = any(isinstance(e, ad.Scalar) for e in entries)
        if not self.use_logits and np.any(np.stack([np.asarray(value_of(e)) for e in entries]) < 0):
            raise DomainError("negative Categorical probability")

    def _stacked(self):
        arrays = np.broadcast_arrays(*[np.asarray(value_of(e), dtype=float) for e in self.entries])
        return np.stack(arrays, axis=-1)

    @property
    def probs(self) -> np.ndarray:
        """Normalized probabilities with categories on the last axis."""
        vals = self._stacked()
        if self.use_logits:
            vals = np.exp(vals - np.max(vals, axis=-1, keepdims=True))
        return vals / np.sum(vals, axis=-1, keepdims=True)

    def log_prob(self, v):
        idx = _as_index(v, self.support_size)
        if not self.taped:
            vals = self._stacked()
            if self.use_logits:
                top = np.max(vals, axis=-1, keepdims=True)
                norm = np.log(np.sum(np.exp(vals - top), axis=-1)) + top[..., 0]
                logs = vals
            else:
                norm = np.log(np.sum(vals, axis=-1))
                logs = _const_log(vals)
            b_idx = np.broadcast_to(idx, np.broadcast_shapes(idx.shape, vals.shape[:-1]))
            logs = np.broadcast_to(logs, b_idx.shape + (self.support_size,))
            picked = np.take_along_axis(logs, b_idx[..., None], axis=-1)[..., 0]
            out = picked - norm
            return float(out) if np.ndim(out) == 0 else out
        picks = []
        for k, e in enumerate(self.entries):
            hit = (idx == k).astype(float)
            if not np.any(hit):
                continue
            term = e if self.use_logits else _log(e)
            picks.append(hit * term if np.ndim(hit) else term)
        picked = ad.add_n(picks)
        norm = ad.logsumexp(self.entries) if self.use_logits else _log(ad.add_n(self.entries))
        return picked - norm

    def sample(self, rng: np.random.Generator, shape=None):
        p = self.probs
        batch = p.shape[:-1]
        shape = batch if shape is None else tuple(np.atleast_1d(shape)) if shape != () else ()
        u = rng.random(shape)
        cdf = np.cumsum(p, axis=-1)
        out = np.sum(u[..., None] > cdf[..., :-1], axis=-1).astype(float)
        return float(out) if out.ndim == 0 else out

    def rsample(self, *args, **kwargs):
        raise UnsupportedError("Categorical has no reparameterized sampler")


def make(family: str, params: dict):
    """Build a distribution of ``family`` from already evaluated parameters."""
    if family == "normal":
        return Normal(params["loc"], params["scale"])
    if family == "bernoulli":
        return Bernoulli(logit=params.get("logit"), probs=params.get("probs"))
    if family == "categorical":
        return Categorical(logits=params.get("logits"), probs=params.get("probs"))
    raise DomainError(f"unknown distribution family {family!r}")


def kl_normal(q: Normal, p: Normal):
    """Closed-form KL(q || p) between univariate normals."""
    ratio = p.scale / q.scale
    diff = q.loc - p.loc
    return _log(ratio) + (q.scale * q.scale + diff * diff) / (2.0 * (p.scale * p.scale)) - 0.5
