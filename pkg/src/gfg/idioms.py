"""Reusable graph fragments with free distribution slots.

A slot is a node template ``{"distribution": ..., "params": {...}}`` whose
parameter expressions refer to the fragment's inputs through ``$role``
placeholders. Each slot has a fixed role signature and must use exactly those
roles; ``$map`` stands for the list of map cells and is spliced into variadic
argument lists (``sum``, ``fn``).

Templates are builders: :meth:`IdiomTemplate.instantiate` produces a model
description fragment (the dict form of :mod:`gfg.modelfile`) with every
internal name prefixed, and input roles either bound to host nodes or filled
by the template's own stub node.

Grid conventions used by the SLAM fragment: map cells are ``z_m[1]..z_m[I]``,
states index cells ``0..I-1`` and ``select(state, *map)`` reads the cell under
the robot.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Callable, Mapping

from gfg import expressions
from gfg.errors import BindingError, SchemaError, SlotSignatureError
from gfg.graph import LATENT, OBSERVED, GenerativeFlowGraph, build_graph
from gfg.modelfile import FAMILY_PARAMS, check_schema, to_spec

SIGNATURES = {
    "transition": ("prev_state", "action"),
    "policy_prior": (),
    "perception": ("state", "action", "map"),
    "map_prior": (),
    "initial_state": (),
    "optimality": ("state", "action"),
}


# slots


def _placeholders(params: Mapping) -> set[str]:
    out = set()
    for e in params.values():
        out |= {n for n in expressions.names(e)}
    return out


def check_slot(slot_name: str, slot) -> None:
    """Raise :class:`SlotSignatureError` unless ``slot`` fits the signature of ``slot_name``."""
    if slot_name not in SIGNATURES:
        raise SlotSignatureError(f"unknown slot {slot_name!r}")
    if not isinstance(slot, Mapping) or set(slot) - {"distribution", "params"}:
        raise SlotSignatureError(f"slot {slot_name!r} must be {{distribution, params}}")
    family = slot.get("distribution")
    if family not in FAMILY_PARAMS:
        raise SlotSignatureError(f"slot {slot_name!r} has unknown distribution {family!r}")
    params = slot.get("params") or {}
    required, choices = FAMILY_PARAMS[family]
    keys = set(params)
    if not (keys == required or (choices and any(keys == c for c in choices))):
        raise SlotSignatureError(f"slot {slot_name!r}: parameters {sorted(keys)} do not fit {family}")
    for e in params.values():
        try:
            expressions.check(e, f"slot {slot_name!r}")
        except SchemaError as exc:
            raise SlotSignatureError(str(exc)) from exc
    used = _placeholders(params)
    bare = sorted(n for n in used if not n.startswith("$"))
    if bare:
        raise SlotSignatureError(f"slot {slot_name!r} refers to {bare}; use $role placeholders")
    roles = {n[1:] for n in used}
    expected = set(SIGNATURES[slot_name])
    if roles != expected:
        raise SlotSignatureError(
            f"slot {slot_name!r} uses roles {sorted(roles)} but its signature is {sorted(expected)}"
        )


def check_slots(slots: Mapping, required, optional=()) -> None:
    missing = [s for s in required if s not in slots]
    if missing:
        raise SlotSignatureError(f"missing slots {missing}")
    extra = [s for s in slots if s not in required and s not in optional]
    if extra:
        raise SlotSignatureError(f"unexpected slots {extra}")
    for name, slot in slots.items():
        check_slot(name, slot)


def _fill(slot, roles: Mapping):
    def rename(n):
        return roles[n[1:]] if n.startswith("$") else n

    params = {k: expressions.rewrite(e, rename) for k, e in slot["params"].items()}
    parents = []
    for v in roles.values():
        parents.extend(v if isinstance(v, list) else [v])
    return slot["distribution"], params, parents


def slot_states(slot) -> int | None:
    """Number of categories a discrete slot produces, when static."""
    params = slot.get("params") or {}
    if slot.get("distribution") == "bernoulli":
        return 2
    return expressions.category_count(params.get("probs", params.get("logits")))


class _Fragment:
    def __init__(self):
        self.nodes: list[dict] = []
        self.links: list[dict] = []
        self.collections: list[dict] = []

    def node(self, name: str, kind: str, slot, roles: Mapping | None = None, value=None) -> str:
        family, params, parents = _fill(slot, roles or {})
        d = {"name": name, "kind": kind, "distribution": family, "params": params}
        if kind == OBSERVED:
            d["value"] = float(value)
        self.nodes.append(d)
        self.links.extend({"from": p, "to": name} for p in dict.fromkeys(parents))
        return name

    def collection(self, name: str, members, index: tuple[str, int, int] | None = None):
        d = {"name": name, "members": list(members)}
        if index is not None:
            d["index"] = {"name": index[0], "range": [index[1], index[2]]}
        self.collections.append(d)

    def plate(self, name: str, index: str, lo: int, hi: int, groups: Mapping[int, list]):
        for k in range(lo, hi + 1):
            self.collection(f"{name}[{k}]", groups[k])
        self.collection(name, [f"{name}[{k}]" for k in range(lo, hi + 1)], (index, lo, hi))

    def spec(self) -> dict:
        return {"nodes": self.nodes, "links": self.links, "collections": self.collections}


# templates


@dataclass
class IdiomTemplate:
    """A fragment builder with named inputs and outputs.

    ``inputs`` maps each input role to the internal node standing for it;
    roles in ``stubs`` have that node built by the template and may stay
    unbound, the others must be bound on instantiation. ``shapes`` gives the
    number of states an input must have, when known.
    """

    name: str
    inputs: dict
    outputs: dict
    slots: dict
    build: Callable[[], dict] = field(repr=False)
    stubs: frozenset = frozenset()
    shapes: dict = field(default_factory=dict)

    def instantiate(self, bindings: Mapping | None = None, prefix: str = "") -> dict:
        """Fragment with internal names prefixed and bound inputs replaced by host names."""
        bindings = dict(bindings or {})
        unknown = [r for r in bindings if r not in self.inputs]
        if unknown:
            raise BindingError(f"idiom {self.name!r} has no inputs {unknown}")
        unbound = [r for r in self.inputs if r not in bindings and r not in self.stubs]
        if unbound:
            raise BindingError(f"idiom {self.name!r} needs bindings for {unbound}")
        frag = copy.deepcopy(self.build())
        bound = {self.inputs[r]: bindings[r] for r in bindings}

        def rename(n):
            if n in bound:
                return bound[n]
            return prefix + n

        frag["nodes"] = [n for n in frag["nodes"] if n["name"] not in bound]
        for n in frag["nodes"]:
            n["name"] = rename(n["name"])
            if "params" in n:
                n["params"] = {k: expressions.rewrite(e, rename) for k, e in n["params"].items()}
        for lk in frag["links"]:
            lk["from"], lk["to"] = rename(lk["from"]), rename(lk["to"])
        collections = []
        for c in frag["collections"]:
            members = [m for m in c["members"] if m not in bound]
            if not members:
                continue
            c["name"] = prefix + c["name"]
            c["members"] = [rename(m) for m in members]
            collections.append(c)
        frag["collections"] = collections
        return frag

    def output(self, role: str, prefix: str = "") -> str:
        return prefix + self.outputs[role]


def _step(frag: _Fragment, slots, tau: int, prev_state: str) -> tuple[str, str]:
    """Nodes ``z_a[tau-1]`` and ``z_s[tau]`` of one transition; returns their names."""
    action = frag.node(f"z_a[{tau - 1}]", LATENT, slots["policy_prior"])
    state = frag.node(f"z_s[{tau}]", LATENT, slots["transition"], {"prev_state": prev_state, "action": action})
    return action, state


def transition_idiom(slots: Mapping, step: int = 1) -> IdiomTemplate:
    """One transition: ``z_a[step-1] ~ policy_prior`` then ``z_s[step] ~ transition(prev_state, z_a[step-1])``."""
    check_slots(slots, ("transition", "policy_prior"))
    slots = copy.deepcopy(dict(slots))
    prev = f"z_s[{step - 1}]"

    def build():
        frag = _Fragment()
        action, state = _step(frag, slots, step, prev)
        frag.collection(f"trans[{step}]", [state, action])
        return frag.spec()

    return IdiomTemplate(
        "transition",
        inputs={"prev_state": prev},
        outputs={"state": f"z_s[{step}]", "action": f"z_a[{step - 1}]"},
        slots=slots,
        build=build,
        shapes={"prev_state": slot_states(slots["transition"])},
    )


def slam_idiom(slots: Mapping, horizon: int, map_size: int, observations=None) -> IdiomTemplate:
    """Localization and mapping over ``horizon`` steps on a map of ``map_size`` cells.

    ``observations`` (one value per step) turns the perception nodes
    ``z_p[1..T]`` into observed nodes.
    """
    check_slots(slots, ("transition", "policy_prior", "perception", "map_prior", "initial_state"))
    if horizon < 1 or map_size < 1:
        raise ValueError("horizon and map_size must be at least 1")
    if observations is not None and len(observations) != horizon:
        raise ValueError(f"need {horizon} observations, got {len(observations)}")
    slots = copy.deepcopy(dict(slots))
    T, I = horizon, map_size

    def build():
        frag = _Fragment()
        state = frag.node("z_s[0]", LATENT, slots["initial_state"])
        cells = [frag.node(f"z_m[{i}]", LATENT, slots["map_prior"]) for i in range(1, I + 1)]
        trans, percept = {}, {}
        for tau in range(1, T + 1):
            action, state = _step(frag, slots, tau, state)
            kind, value = (LATENT, None) if observations is None else (OBSERVED, observations[tau - 1])
            seen = frag.node(
                f"z_p[{tau}]", kind, slots["perception"], {"state": state, "action": action, "map": cells}, value
            )
            trans[tau] = [state, action]
            percept[tau] = [seen]
        frag.collection("initial", ["z_s[0]"])
        frag.plate("map", "i", 1, I, {i: [f"z_m[{i}]"] for i in range(1, I + 1)})
        frag.plate("trans", "tau", 1, T, trans)
        frag.plate("percept", "tau", 1, T, percept)
        return frag.spec()

    return IdiomTemplate(
        "slam",
        inputs={},
        outputs={"final_state": f"z_s[{T}]", "initial_state": "z_s[0]"},
        slots=slots,
        build=build,
    )


SLAM_VIEWS = {
    "atomic": lambda T: [],
    "steps": lambda T: [f"trans[{t}]" for t in range(1, T + 1)],
    "blocks": lambda T: ["trans", "percept"],
}


def mdp_idiom(slots: Mapping, horizon: int, initial_state: float | None = None) -> IdiomTemplate:
    """Control as inference: per step an action, an observed optimality flag and the next state.

    The initial state ``z_s[0]`` is the input ``initial_state``. Without the
    ``initial_state`` slot it must be bound; with it, an unbound initial state
    is built from the slot and observed at ``initial_state`` when a value is
    given. Optimality nodes ``x_O[tau]`` are observed at 1.
    """
    check_slots(slots, ("transition", "policy_prior", "optimality"), ("initial_state",))
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    slots = copy.deepcopy(dict(slots))
    T = horizon

    stub = "initial_state" in slots

    def build():
        frag = _Fragment()
        state = "z_s[0]"
        if stub:
            kind = LATENT if initial_state is None else OBSERVED
            frag.node(state, kind, slots["initial_state"], value=initial_state)
        else:  # always replaced by the binding
            frag.nodes.append({"name": state, "kind": LATENT})
        groups = {}
        for tau in range(T):
            action = frag.node(f"z_a[{tau}]", LATENT, slots["policy_prior"])
            flag = frag.node(f"x_O[{tau}]", OBSERVED, slots["optimality"], {"state": state, "action": action}, 1.0)
            groups[tau] = [state, action, flag]
            if tau < T - 1:
                state = frag.node(
                    f"z_s[{tau + 1}]", LATENT, slots["transition"], {"prev_state": state, "action": action}
                )
        frag.plate("step", "tau", 0, T - 1, groups)
        return frag.spec()

    return IdiomTemplate(
        "mdp",
        inputs={"initial_state": "z_s[0]"},
        outputs={"final_state": f"z_s[{T - 1}]"},
        slots=slots,
        build=build,
        stubs=frozenset({"initial_state"} if stub else ()),
        shapes={"initial_state": slot_states(slots["transition"])},
    )


TEMPLATES = {
    "transition": lambda slots, args: transition_idiom(slots, **args),
    "slam": lambda slots, args: slam_idiom(slots, **args),
    "mdp": lambda slots, args: mdp_idiom(slots, **args),
}


def from_stanza(stanza: Mapping) -> IdiomTemplate:
    """Template named by a model file ``idioms`` entry."""
    name = stanza.get("template")
    if name not in TEMPLATES:
        raise SchemaError(f"unknown idiom template {name!r}; known: {sorted(TEMPLATES)}")
    try:
        return TEMPLATES[name](stanza.get("slots", {}), dict(stanza.get("args", {})))
    except TypeError as exc:
        raise SchemaError(f"idiom {name!r}: {exc}") from exc


def merge_into(spec: dict, fragment: Mapping) -> None:
    """Append ``fragment``'s nodes, links and collections to ``spec`` in place."""
    taken = {n["name"] for n in spec.get("nodes", [])} | {c["name"] for c in spec.get("collections", [])}
    for n in fragment.get("nodes", []):
        if n["name"] in taken:
            raise BindingError(f"name {n['name']!r} already exists in the host")
    spec.setdefault("nodes", []).extend(fragment.get("nodes", []))
    spec.setdefault("links", []).extend(fragment.get("links", []))
    spec.setdefault("collections", []).extend(fragment.get("collections", []))
    preds = list(spec.get("predicates", []))
    preds += [p for p in fragment.get("predicates", []) if p not in preds]
    if preds:
        spec["predicates"] = preds


def compose(host, guest: IdiomTemplate, bindings: Mapping, prefix: str = "mdp/") -> GenerativeFlowGraph:
    """Merge ``guest`` into ``host`` with guest inputs bound to host nodes.

    ``host`` is a graph, a template (instantiated without prefix) or a model
    description dict. Binding values name host nodes or host template outputs.
    """
    outputs = {}
    if isinstance(host, IdiomTemplate):
        outputs = host.outputs
        spec = host.instantiate({}, "")
    elif isinstance(host, GenerativeFlowGraph):
        spec = to_spec(host)
    else:
        check_schema(host)
        spec = copy.deepcopy(dict(host))
    host_graph = build_graph(spec)
    resolved = {}
    for role, target in bindings.items():
        target = outputs.get(target, target)
        if not host_graph.has_node(target):
            raise BindingError(f"binding {role!r} -> {target!r}: no such host node")
        if host_graph.node(target).kind not in (LATENT, OBSERVED):
            raise BindingError(f"binding {role!r} -> {target!r}: only variables can be bound")
        want = guest.shapes.get(role)
        have = host_graph.category_count(target)
        if want is not None and have != want:
            raise BindingError(f"binding {role!r} -> {target!r}: {have} states where {want} are expected")
        resolved[role] = target
    merge_into(spec, guest.instantiate(resolved, prefix))
    return build_graph(spec)


__all__ = [
    "SIGNATURES",
    "check_slot",
    "check_slots",
    "IdiomTemplate",
    "transition_idiom",
    "slam_idiom",
    "SLAM_VIEWS",
    "mdp_idiom",
    "from_stanza",
    "merge_into",
    "compose",
    "TEMPLATES",
]
