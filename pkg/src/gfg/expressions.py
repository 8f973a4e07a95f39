"""Parameter expressions for distributions in a model description.

An expression is one of

* a number (a constant),
* a string naming a parent node,
* a list of expressions (probability or logit vectors),
* ``{"op": <name>, "args": [...]}`` for an arithmetic primitive,
* ``{"table": <nested list>, "index": [...]}`` for a constant lookup indexed
  by integer-valued expressions,
* ``{"fn": <registered name>, "args": [...]}`` for a registered function.

Argument lists of ``sum`` and ``fn`` are variadic.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from gfg import autodiff as ad
from gfg.errors import DomainError, SchemaError, UnknownNameError

UNARY = {
    "neg": ad.neg,
    "exp": ad.exp,
    "log": ad.log,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "softplus": ad.softplus,
}
BINARY = {"add": ad.add, "sub": ad.sub, "mul": ad.mul, "div": ad.div, "pow": ad.pow}
VARIADIC = {"sum"}
OPS = set(UNARY) | set(BINARY) | VARIADIC


def check(expr, where: str = "expression") -> None:
    """Raise :class:`SchemaError` if ``expr`` is not a well-formed expression."""
    if isinstance(expr, bool):
        raise SchemaError(f"{where}: booleans are not expressions")
    if isinstance(expr, (int, float, str)):
        return
    if isinstance(expr, list):
        for e in expr:
            check(e, where)
        return
    if not isinstance(expr, dict):
        raise SchemaError(f"{where}: unsupported expression {expr!r}")
    keys = set(expr)
    if "op" in expr:
        if keys != {"op", "args"}:
            raise SchemaError(f"{where}: op expression needs exactly 'op' and 'args'")
        op, args = expr["op"], expr["args"]
        if op not in OPS:
            raise SchemaError(f"{where}: unknown op {op!r}")
        if not isinstance(args, list):
            raise SchemaError(f"{where}: args must be a list")
        want = 1 if op in UNARY else 2 if op in BINARY else None
        if want is not None and len(args) != want:
            raise SchemaError(f"{where}: op {op!r} takes {want} argument(s), got {len(args)}")
        for a in args:
            check(a, where)
    elif "table" in expr:
        if keys != {"table", "index"}:
            raise SchemaError(f"{where}: table expression needs exactly 'table' and 'index'")
        if not isinstance(expr["index"], list) or not expr["index"]:
            raise SchemaError(f"{where}: table index must be a non-empty list")
        try:
            table = np.asarray(expr["table"], dtype=float)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"{where}: table is not a rectangular numeric array") from exc
        if table.ndim < len(expr["index"]):
            raise SchemaError(f"{where}: table has fewer axes than index entries")
        for a in expr["index"]:
            check(a, where)
    elif "fn" in expr:
        if keys != {"fn", "args"} or not isinstance(expr["args"], list):
            raise SchemaError(f"{where}: fn expression needs 'fn' and a list of 'args'")
        for a in expr["args"]:
            check(a, where)
    else:
        raise SchemaError(f"{where}: unsupported expression keys {sorted(keys)}")


def names(expr) -> list[str]:
    """Node names referenced by ``expr``, in first-occurrence order."""
    out: list[str] = []

    def walk(e):
        if isinstance(e, str):
            if e not in out:
                out.append(e)
        elif isinstance(e, list):
            for x in e:
                walk(x)
        elif isinstance(e, dict):
            for key in ("args", "index"):
                if key in e:
                    walk(e[key])

    walk(expr)
    return out


def functions(expr) -> list[str]:
    """Registered function names used by ``expr``."""
    out: list[str] = []

    def walk(e):
        if isinstance(e, list):
            for x in e:
                walk(x)
        elif isinstance(e, dict):
            if "fn" in e and e["fn"] not in out:
                out.append(e["fn"])
            for key in ("args", "index"):
                if key in e:
                    walk(e[key])

    walk(expr)
    return out


def rewrite(expr, rename: Callable[[str], object], *, variadic_ok: bool = False):
    """Copy of ``expr`` with every name ``n`` replaced by ``rename(n)``.

    ``rename`` may return a list of names, which is spliced into variadic
    argument lists (``sum`` and ``fn``); anywhere else it is an error.
    """
    if isinstance(expr, str):
        out = rename(expr)
        if isinstance(out, list) and not variadic_ok:
            raise SchemaError(f"reference {expr!r} expands to several nodes outside a variadic argument list")
        return out
    if isinstance(expr, list):
        return [rewrite(e, rename) for e in expr]
    if isinstance(expr, dict):
        if "op" in expr:
            variadic = expr["op"] in VARIADIC
            return {"op": expr["op"], "args": _rewrite_args(expr["args"], rename, variadic)}
        if "fn" in expr:
            return {"fn": expr["fn"], "args": _rewrite_args(expr["args"], rename, True)}
        if "table" in expr:
            return {"table": expr["table"], "index": [rewrite(e, rename) for e in expr["index"]]}
    return expr


def _rewrite_args(args, rename, variadic):
    out = []
    for a in args:
        r = rewrite(a, rename, variadic_ok=variadic)
        if isinstance(a, str) and isinstance(r, list):
            out.extend(r)
        else:
            out.append(r)
    return out


def evaluate(expr, env: Mapping, functions_: Mapping[str, Callable]):
    """Evaluate ``expr`` with parent values from ``env``.

    Lists evaluate to Python lists of values (category vectors).
    """
    if isinstance(expr, (int, float)) and not isinstance(expr, bool):
        return float(expr)
    if isinstance(expr, str):
        try:
            return env[expr]
        except KeyError:
            raise UnknownNameError(f"expression references unknown parent {expr!r}") from None
    if isinstance(expr, list):
        return [evaluate(e, env, functions_) for e in expr]
    if "op" in expr:
        op = expr["op"]
        args = [evaluate(a, env, functions_) for a in expr["args"]]
        if op in UNARY:
            return UNARY[op](args[0])
        if op in BINARY:
            return BINARY[op](args[0], args[1])
        return ad.add_n(args)
    if "table" in expr:
        table = np.asarray(expr["table"], dtype=float)
        idx = []
        for e in expr["index"]:
            raw = np.asarray(ad.value_of(evaluate(e, env, functions_)), dtype=float)
            k = np.rint(raw)
            if np.any(np.abs(raw - k) > 1e-9):
                raise DomainError(f"non-integer table index {raw!r}")
            idx.append(k.astype(int))
        try:
            out = table[tuple(idx)]
        except IndexError as exc:
            raise DomainError(f"table index out of range: {exc}") from None
        return float(out) if np.ndim(out) == 0 else out
    fn = expr["fn"]
    if fn not in functions_:
        raise UnknownNameError(f"unregistered function {fn!r}")
    args = [evaluate(a, env, functions_) for a in expr["args"]]
    try:
        return functions_[fn](*args)
    except (IndexError, TypeError, ValueError) as exc:
        raise DomainError(f"function {fn!r} failed: {exc}") from exc


def category_count(expr) -> int | None:
    """Number of categories described by a probs/logits expression, if static."""
    if isinstance(expr, list):
        return len(expr)
    if isinstance(expr, dict) and "table" in expr:
        table = np.asarray(expr["table"], dtype=float)
        if table.ndim == len(expr["index"]) + 1:
            return table.shape[-1]
    return None
