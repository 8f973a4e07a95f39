"""Host-side registry of branch/selection predicates and expression functions.

Predicates receive the realized values of a condition node's influence sources
(floats or Monte-Carlo arrays, in link order) and return the chosen route as an
integer or integer array. Functions receive evaluated arguments, which may be
taped, and return a value.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from gfg import autodiff as ad


def _positive(x):
    return (np.asarray(x) > 0).astype(int)


def _nonzero(x):
    return (np.asarray(x) != 0).astype(int)


def _index(x):
    return np.rint(np.asarray(x)).astype(int)


def _select(i, *xs):
    """``xs[i]`` for an integer-valued (possibly batched) index ``i``."""
    idx = np.rint(np.asarray(ad.value_of(i))).astype(int)
    if np.any(idx < 0) or np.any(idx >= len(xs)):
        raise IndexError(f"select index out of range 0..{len(xs) - 1}")
    if idx.ndim == 0:
        return xs[int(idx)]
    picks = [ad.mul((idx == k).astype(float), x) for k, x in enumerate(xs) if np.any(idx == k)]
    return ad.add_n(picks)


def _clip(x, lo, hi):
    return np.clip(ad.value_of(x), lo, hi)


@dataclass
class Registry:
    predicates: dict[str, Callable] = field(default_factory=dict)
    functions: dict[str, Callable] = field(default_factory=dict)

    def register_predicate(self, name: str, fn: Callable) -> None:
        self.predicates[name] = fn

    def register_function(self, name: str, fn: Callable) -> None:
        self.functions[name] = fn

    def copy(self) -> "Registry":
        return Registry(dict(self.predicates), dict(self.functions))


DEFAULT_REGISTRY = Registry(
    predicates={"positive": _positive, "nonzero": _nonzero, "index": _index},
    functions={"select": _select, "clip": _clip},
)


def register_predicate(name: str, fn: Callable) -> None:
    DEFAULT_REGISTRY.register_predicate(name, fn)


def register_function(name: str, fn: Callable) -> None:
    DEFAULT_REGISTRY.register_function(name, fn)
