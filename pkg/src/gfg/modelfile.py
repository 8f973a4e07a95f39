"""Model description files: JSON schema, plate unrolling, idiom expansion and serialization.

Top-level keys (all optional except ``nodes``)::

    nodes        list of {name, kind, distribution?, params?, value?, init?, predicate?}
    links        list of {from, to, kind?, subset?, when?}     kind defaults to "generative"
    collections  list of {name, members, index?, replicate?}   index = {name, range: [first, last]}
    predicates   list of registered predicate names used by branch/selection nodes
    idioms       list of {template, prefix?, slots, args?, bindings?}

A collection with ``index`` (or ``replicate``) is a plate: its members are
template nodes that are unrolled into instances ``member[k]``, each instance set
grouped in its own collection ``name[k]``. An observed or fixed template may
give one value per instance as a list. Outside the plate, a reference to a
template name stands for the list of all its instances and may only appear in a
variadic argument list (``sum`` or ``fn``). A plate whose members are already
the instance collections ``name[first]..name[last]`` is taken as unrolled, which
is the form :func:`serialize` writes.

Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import copy
import json
from importlib import resources
from pathlib import Path

from gfg import expressions
from gfg.errors import SchemaError
from gfg.graph import (
    CONDITION_KINDS,
    FIXED_PARAM,
    GENERATIVE,
    LATENT,
    LINK_KINDS,
    NODE_KINDS,
    OBSERVED,
    VARIABLE_PARAM,
    Collection,
    GenerativeFlowGraph,
    Link,
    Node,
)
from gfg.registry import Registry

TOP_KEYS = {"nodes", "links", "collections", "predicates", "idioms"}
NODE_KEYS = {"name", "kind", "distribution", "params", "value", "init", "predicate"}
LINK_KEYS = {"from", "to", "kind", "subset", "when"}
COLLECTION_KEYS = {"name", "members", "index", "replicate"}
INDEX_KEYS = {"name", "range"}
IDIOM_KEYS = {"template", "prefix", "slots", "args", "bindings"}

FAMILY_PARAMS = {
    "normal": ({"loc", "scale"}, None),
    "bernoulli": (set(), ({"probs"}, {"logit"})),
    "categorical": (set(), ({"probs"}, {"logits"})),
}


def parse(text: str) -> dict:
    """Parse model file text into a description dict (schema-checked, not yet built)."""
    try:
        spec = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"model file is not valid JSON: {exc}") from None
    check_schema(spec)
    return spec


def _keys(obj, allowed, where):
    if not isinstance(obj, dict):
        raise SchemaError(f"{where} must be an object")
    unknown = set(obj) - allowed
    if unknown:
        raise SchemaError(f"{where}: unknown keys {sorted(unknown)}")


def _name(obj, where):
    name = obj.get("name")
    if not isinstance(name, str) or not name:
        raise SchemaError(f"{where} needs a non-empty string 'name'")
    return name


def _number(v, where):
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaError(f"{where} must be a number, got {v!r}")
    return float(v)


def check_schema(spec) -> None:
    """Raise :class:`SchemaError` unless ``spec`` follows the model file schema."""
    _keys(spec, TOP_KEYS, "model")
    if "nodes" not in spec or not isinstance(spec["nodes"], list):
        raise SchemaError("model needs a 'nodes' list")
    for key in ("links", "collections", "predicates", "idioms"):
        if key in spec and not isinstance(spec[key], list):
            raise SchemaError(f"'{key}' must be a list")
    for i, n in enumerate(spec["nodes"]):
        _check_node(n, f"nodes[{i}]")
    for i, lk in enumerate(spec.get("links", [])):
        where = f"links[{i}]"
        _keys(lk, LINK_KEYS, where)
        for k in ("from", "to"):
            if not isinstance(lk.get(k), str):
                raise SchemaError(f"{where} needs a string '{k}'")
        if lk.get("kind", GENERATIVE) not in LINK_KINDS:
            raise SchemaError(f"{where}: unknown link kind {lk.get('kind')!r}")
        if "subset" in lk and not (
            isinstance(lk["subset"], list) and all(isinstance(s, str) for s in lk["subset"])
        ):
            raise SchemaError(f"{where}: subset must be a list of names")
        if "when" in lk and (isinstance(lk["when"], bool) or not isinstance(lk["when"], int)):
            raise SchemaError(f"{where}: 'when' must be an integer")
    for i, c in enumerate(spec.get("collections", [])):
        where = f"collections[{i}]"
        _keys(c, COLLECTION_KEYS, where)
        _name(c, where)
        if not isinstance(c.get("members"), list) or not all(isinstance(m, str) for m in c["members"]):
            raise SchemaError(f"{where} needs a list of member names")
        if "index" in c:
            _keys(c["index"], INDEX_KEYS, f"{where}.index")
            rng = c["index"].get("range")
            if not (
                isinstance(rng, list)
                and len(rng) == 2
                and all(isinstance(r, int) and not isinstance(r, bool) for r in rng)
                and rng[0] <= rng[1]
            ):
                raise SchemaError(f"{where}.index.range must be [first, last] integers with first <= last")
            if not isinstance(c["index"].get("name"), str):
                raise SchemaError(f"{where}.index needs a string 'name'")
        if "replicate" in c:
            r = c["replicate"]
            if isinstance(r, bool) or not isinstance(r, int) or r <= 0:
                raise SchemaError(f"{where}.replicate must be a positive integer")
    for p in spec.get("predicates", []):
        if not isinstance(p, str):
            raise SchemaError("predicates must be names")
    for i, st in enumerate(spec.get("idioms", [])):
        where = f"idioms[{i}]"
        _keys(st, IDIOM_KEYS, where)
        if not isinstance(st.get("template"), str):
            raise SchemaError(f"{where} needs a string 'template'")
        if not isinstance(st.get("slots", {}), dict):
            raise SchemaError(f"{where}.slots must be an object")
        for key in ("args", "bindings"):
            if key in st and not isinstance(st[key], dict):
                raise SchemaError(f"{where}.{key} must be an object")


def _check_node(n, where):
    _keys(n, NODE_KEYS, where)
    _name(n, where)
    kind = n.get("kind")
    if kind not in NODE_KINDS:
        raise SchemaError(f"{where}: unknown node kind {kind!r}")
    family = n.get("distribution")
    if kind in (LATENT, OBSERVED):
        if family not in FAMILY_PARAMS:
            raise SchemaError(f"{where}: unknown or missing distribution {family!r}")
        params = n.get("params")
        if not isinstance(params, dict):
            raise SchemaError(f"{where}: distribution needs a 'params' object")
        required, alternatives = FAMILY_PARAMS[family]
        keys = set(params)
        if alternatives is None:
            if keys != required:
                raise SchemaError(f"{where}: {family} takes params {sorted(required)}, got {sorted(keys)}")
        elif keys not in alternatives:
            opts = " or ".join(str(sorted(a)) for a in alternatives)
            raise SchemaError(f"{where}: {family} takes params {opts}, got {sorted(keys)}")
        for k, expr in params.items():
            expressions.check(expr, f"{where}.params.{k}")
    elif family is not None or "params" in n:
        raise SchemaError(f"{where}: a {kind} node cannot carry a distribution")
    if kind in CONDITION_KINDS:
        if not isinstance(n.get("predicate"), str):
            raise SchemaError(f"{where}: {kind} node needs a 'predicate' name")
    elif "predicate" in n:
        raise SchemaError(f"{where}: only branch and selection nodes take a predicate")
    if kind in (OBSERVED, FIXED_PARAM):
        if "value" not in n:
            raise SchemaError(f"{where}: {kind} node needs a 'value'")
        _check_value(n["value"], f"{where}.value")
    elif "value" in n:
        raise SchemaError(f"{where}: only observed and fixed parameter nodes take a 'value'")
    if kind == VARIABLE_PARAM:
        if "init" not in n:
            raise SchemaError(f"{where}: variable parameter needs an 'init' value")
        _check_value(n["init"], f"{where}.init")
    elif "init" in n:
        raise SchemaError(f"{where}: only variable parameters take an 'init' value")


def _check_value(v, where):
    if isinstance(v, list):
        for x in v:
            _number(x, where)
    else:
        _number(v, where)


# plate unrolling


def _instances(c):
    if "index" in c:
        iname = c["index"]["name"]
        lo, hi = c["index"]["range"]
        if "replicate" in c and c["replicate"] != hi - lo + 1:
            raise SchemaError(f"collection {c['name']!r}: replicate does not match its index range")
        return iname, lo, hi
    return "i", 1, c["replicate"]


def unroll_plates(spec: dict) -> dict:
    """Return a copy of ``spec`` with every plate collection unrolled."""
    spec = copy.deepcopy(spec)
    spec.setdefault("links", [])
    spec.setdefault("collections", [])
    declared = {c["name"] for c in spec["collections"]}
    for c in list(spec["collections"]):
        if "index" not in c and "replicate" not in c:
            continue
        iname, lo, hi = _instances(c)
        instance_names = [f"{c['name']}[{k}]" for k in range(lo, hi + 1)]
        c["index"] = {"name": iname, "range": [lo, hi]}
        if c["members"] == instance_names and all(n in declared for n in instance_names):
            continue
        _unroll_one(spec, c, lo, hi, instance_names)
        declared.update(instance_names)
    return spec


def _unroll_one(spec, c, lo, hi, instance_names):
    nodes = {n["name"]: n for n in spec["nodes"]}
    templates = list(c["members"])
    for t in templates:
        if t not in nodes:
            raise SchemaError(f"plate {c['name']!r}: member {t!r} is not a node (nested plates are not supported)")
    tset = set(templates)
    count = hi - lo + 1
    existing = set(nodes) | {x["name"] for x in spec["collections"]}

    def inst(name, k):
        out = f"{name}[{k}]"
        if out in existing:
            raise SchemaError(f"plate instance name {out!r} collides with an existing name")
        return out

    new_nodes = []
    for n in spec["nodes"]:
        if n["name"] not in tset:
            if "params" in n:
                n["params"] = {
                    key: expressions.rewrite(e, lambda r: [f"{r}[{k}]" for k in range(lo, hi + 1)] if r in tset else r)
                    for key, e in n["params"].items()
                }
            new_nodes.append(n)
            continue
        for j, k in enumerate(range(lo, hi + 1)):
            m = copy.deepcopy(n)
            m["name"] = inst(n["name"], k)
            for key in ("value", "init"):
                if isinstance(m.get(key), list):
                    if len(m[key]) != count:
                        raise SchemaError(f"plate {c['name']!r}: {n['name']}.{key} needs {count} entries")
                    m[key] = m[key][j]
            if "params" in m:
                m["params"] = {
                    key: expressions.rewrite(e, lambda r, k=k: f"{r}[{k}]" if r in tset else r)
                    for key, e in m["params"].items()
                }
            new_nodes.append(m)
    spec["nodes"] = new_nodes

    new_links = []
    for lk in spec["links"]:
        s_in, t_in = lk["from"] in tset, lk["to"] in tset
        if not (s_in or t_in):
            new_links.append(lk)
            continue
        for k in range(lo, hi + 1):
            m = dict(lk)
            if s_in:
                m["from"] = f"{lk['from']}[{k}]"
            if t_in:
                m["to"] = f"{lk['to']}[{k}]"
            new_links.append(m)
    spec["links"] = new_links

    new_collections = []
    for other in spec["collections"]:
        if other is c:
            for k, cname in zip(range(lo, hi + 1), instance_names):
                new_collections.append({"name": cname, "members": [f"{t}[{k}]" for t in templates]})
            other["members"] = instance_names
            new_collections.append(other)
        else:
            members = []
            for m in other["members"]:
                members.extend([f"{m}[{k}]" for k in range(lo, hi + 1)] if m in tset else [m])
            other["members"] = members
            new_collections.append(other)
    spec["collections"] = new_collections


# building


def graph_from_spec(spec, registry: Registry | None = None) -> GenerativeFlowGraph:
    """Build an (unvalidated) graph from model file text or a description dict."""
    if isinstance(spec, (str, bytes)):
        spec = parse(spec)
    else:
        check_schema(spec)
    spec = expand_idioms(spec)
    spec = unroll_plates(spec)
    nodes = []
    for n in spec["nodes"]:
        kind = n["kind"]
        value = n.get("value")
        init = n.get("init")
        for key, v in (("value", value), ("init", init)):
            if isinstance(v, list):
                raise SchemaError(f"node {n['name']!r}: a list {key} is only allowed on plate members")
        nodes.append(
            Node(
                name=n["name"],
                kind=kind,
                distribution=n.get("distribution"),
                params=copy.deepcopy(n.get("params")),
                value=None if value is None else float(value),
                init=None if init is None else float(init),
                predicate=n.get("predicate"),
            )
        )
    links = [
        Link(
            source=lk["from"],
            target=lk["to"],
            kind=lk.get("kind", GENERATIVE),
            subset=tuple(lk["subset"]) if "subset" in lk else None,
            when=lk.get("when"),
        )
        for lk in spec.get("links", [])
    ]
    collections = []
    for c in spec.get("collections", []):
        index = None
        if "index" in c:
            index = (c["index"]["name"], c["index"]["range"][0], c["index"]["range"][1])
        collections.append(Collection(c["name"], tuple(c["members"]), index, c.get("replicate")))
    return GenerativeFlowGraph(nodes, links, collections, spec.get("predicates", []), registry)


def expand_idioms(spec: dict) -> dict:
    """Return a copy of ``spec`` with every ``idioms`` stanza instantiated and merged."""
    if not spec.get("idioms"):
        return spec
    from gfg import idioms

    spec = copy.deepcopy(spec)
    stanzas = spec.pop("idioms")
    for st in stanzas:
        template = idioms.from_stanza(st)
        fragment = template.instantiate(st.get("bindings", {}), st.get("prefix", ""))
        idioms.merge_into(spec, fragment)
    return spec


def to_spec(g: GenerativeFlowGraph) -> dict:
    """Description dict of ``g`` in unrolled form."""
    nodes = []
    for n in g.nodes:
        d = {"name": n.name, "kind": n.kind}
        if n.distribution is not None:
            d["distribution"] = n.distribution
        if n.params is not None:
            d["params"] = copy.deepcopy(n.params)
        if n.value is not None:
            d["value"] = n.value
        if n.init is not None:
            d["init"] = n.init
        if n.predicate is not None:
            d["predicate"] = n.predicate
        nodes.append(d)
    links = []
    for lk in g.links:
        d = {"from": lk.source, "to": lk.target, "kind": lk.kind}
        if lk.subset is not None:
            d["subset"] = list(lk.subset)
        if lk.when is not None:
            d["when"] = lk.when
        links.append(d)
    collections = []
    for c in g.collections:
        d = {"name": c.name, "members": list(c.members)}
        if c.index is not None:
            d["index"] = {"name": c.index[0], "range": [c.index[1], c.index[2]]}
        if c.replicate is not None:
            d["replicate"] = c.replicate
        collections.append(d)
    out = {"nodes": nodes, "links": links, "collections": collections}
    if g.predicates:
        out["predicates"] = list(g.predicates)
    return out


def serialize(g: GenerativeFlowGraph) -> str:
    return json.dumps(to_spec(g), indent=2, sort_keys=True) + "\n"


def bundled_models() -> list[str]:
    """Names of the example models shipped with the package."""
    root = resources.files("gfg") / "models"
    return sorted(p.name[: -len(".json")] for p in root.iterdir() if p.name.endswith(".json"))


def model_text(name_or_path: str) -> str:
    """Text of a bundled model (by name) or of a model file (by path)."""
    path = Path(name_or_path)
    if path.is_file():
        return path.read_text(encoding="utf-8")
    res = resources.files("gfg") / "models" / f"{name_or_path}.json"
    if res.is_file():
        return res.read_text(encoding="utf-8")
    raise FileNotFoundError(f"no model file or bundled model named {name_or_path!r}")


def load(name_or_path: str, strict: bool = True, registry: Registry | None = None) -> GenerativeFlowGraph:
    from gfg.graph import build_graph

    return build_graph(parse(model_text(name_or_path)), strict=strict, registry=registry)


__all__ = [
    "parse",
    "check_schema",
    "unroll_plates",
    "graph_from_spec",
    "expand_idioms",
    "to_spec",
    "serialize",
    "bundled_models",
    "model_text",
    "load",
]
