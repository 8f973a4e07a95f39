import copy
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gfg import modelfile
from gfg.errors import (
    ArityError,
    CollectionOverlapError,
    ControlFlowError,
    CycleError,
    LinkTargetError,
    PredicateError,
    SubsetAnnotationError,
    UnknownNameError,
)
from gfg.graph import DETACHED, GENERATIVE, build_graph, sample_trace, validate
from gfg.registry import Registry

TWO_NODE = {
    "nodes": [
        {"name": "theta_mu", "kind": "variable_param", "init": 0.0},
        {"name": "theta_sigma", "kind": "variable_param", "init": 1.0},
        {"name": "z", "kind": "latent", "distribution": "normal", "params": {"loc": "theta_mu", "scale": "theta_sigma"}},
        {"name": "x", "kind": "observed", "distribution": "normal", "params": {"loc": "z", "scale": 1.0}, "value": 2.0},
    ],
    "links": [
        {"from": "theta_mu", "to": "z"},
        {"from": "theta_sigma", "to": "z"},
        {"from": "z", "to": "x"},
    ],
}

BRANCHING = {
    "nodes": [
        {"name": "z", "kind": "latent", "distribution": "normal", "params": {"loc": 0.0, "scale": 1.0}},
        {"name": "c", "kind": "fixed_param", "value": 0.0},
        {"name": "b", "kind": "branch", "predicate": "positive"},
        {"name": "z_pos", "kind": "latent", "distribution": "normal", "params": {"loc": "b", "scale": 1.0}},
        {"name": "z_neg", "kind": "latent", "distribution": "normal", "params": {"loc": "b", "scale": 2.0}},
    ],
    "links": [
        {"from": "c", "to": "b"},
        {"from": "z", "to": "b", "kind": "influence"},
        {"from": "b", "to": "z_pos", "when": 1},
        {"from": "b", "to": "z_neg", "when": 0},
    ],
    "predicates": ["positive"],
}


def spec(base, **changes):
    out = copy.deepcopy(base)
    out.update(copy.deepcopy(changes))
    return out


def test_minimal_graph():
    g = build_graph(TWO_NODE)
    assert len(g.latents) + len(g.observed) == 2
    assert len([n for n in g.nodes if n.is_param]) == 2


def test_link_into_parameter_rejected():
    with pytest.raises(LinkTargetError):
        build_graph(spec(TWO_NODE, links=TWO_NODE["links"] + [{"from": "z", "to": "theta_mu"}]))


def test_generative_cycle_rejected():
    s = {
        "nodes": [
            {"name": "z1", "kind": "latent", "distribution": "normal", "params": {"loc": "z2", "scale": 1.0}},
            {"name": "z2", "kind": "latent", "distribution": "normal", "params": {"loc": "z1", "scale": 1.0}},
        ],
        "links": [{"from": "z1", "to": "z2"}, {"from": "z2", "to": "z1"}],
    }
    with pytest.raises(CycleError):
        build_graph(s)


def test_detached_links_also_count_for_cycles():
    s = {
        "nodes": [
            {"name": "z1", "kind": "latent", "distribution": "normal", "params": {"loc": "z2", "scale": 1.0}},
            {"name": "z2", "kind": "latent", "distribution": "normal", "params": {"loc": "z1", "scale": 1.0}},
        ],
        "links": [{"from": "z1", "to": "z2", "kind": "detached"}, {"from": "z2", "to": "z1"}],
    }
    assert validate(build_graph(s, strict=False)).errors_of(CycleError)


def test_arity_mismatch_rejected():
    with pytest.raises(ArityError):
        build_graph(spec(TWO_NODE, links=TWO_NODE["links"][:2]))


def test_sample_trace_pins_observed_values():
    g = modelfile.load("conjugate")
    t = sample_trace(g, 7)
    assert t.values["x"] == 2.0
    assert math.isfinite(t.values["z"])


def test_branch_takes_exactly_one_route():
    g = build_graph(BRANCHING)
    seen = set()
    for seed in range(40):
        t = sample_trace(g, seed)
        taken = {"z_pos", "z_neg"} & set(t.path)
        assert len(taken) == 1
        (route,) = taken
        assert (t.values["z"] > 0) == (route == "z_pos")
        assert route not in ({"z_pos", "z_neg"} - taken)
        assert t.branch_choices["b"] == route
        assert ({"z_pos", "z_neg"} - taken).isdisjoint(t.values)
        seen.add(route)
    assert seen == {"z_pos", "z_neg"}


def test_sample_trace_is_deterministic():
    for name in ("conjugate", "switch", "slam", "mdp"):
        g = modelfile.load(name)
        assert sample_trace(g, 3) == sample_trace(g, 3)


def test_predicate_failure_is_reported():
    reg = Registry()
    reg.register_predicate("positive", lambda x: 1 / 0)
    g = build_graph(BRANCHING, registry=reg)
    with pytest.raises(PredicateError):
        sample_trace(g, 0)


def test_valid_slam_graph_has_empty_report():
    rep = validate(modelfile.load("slam"))
    assert rep.ok and len(rep) == 0


def test_sibling_overlap_is_one_entry():
    s = spec(TWO_NODE, collections=[{"name": "A", "members": ["z", "x"]}, {"name": "B", "members": ["z"]}])
    rep = validate(build_graph(s, strict=False))
    assert [e.error for e in rep] == [CollectionOverlapError]


def test_nested_collections_may_share_members():
    s = spec(TWO_NODE, collections=[{"name": "inner", "members": ["z"]}, {"name": "outer", "members": ["inner", "x"]}])
    assert validate(build_graph(s, strict=False)).ok


def test_influence_into_latent_is_one_entry():
    s = copy.deepcopy(BRANCHING)
    s["links"].append({"from": "c", "to": "z_pos", "kind": "influence"})
    rep = validate(build_graph(s, strict=False))
    assert [e.error for e in rep] == [LinkTargetError]
    assert "c->z_pos" in rep.entries[0].ids


def test_subset_annotation_must_name_members():
    s = spec(
        TWO_NODE,
        collections=[{"name": "P", "members": ["theta_mu", "theta_sigma"]}],
        links=[{"from": "P", "to": "z", "subset": ["theta_mu", "x"]}, {"from": "z", "to": "x"}],
    )
    rep = validate(build_graph(s, strict=False))
    assert rep.errors_of(SubsetAnnotationError)


def test_collection_source_expands_to_members():
    s = spec(
        TWO_NODE,
        collections=[{"name": "P", "members": ["theta_mu", "theta_sigma"]}],
        links=[{"from": "P", "to": "z"}, {"from": "z", "to": "x"}],
    )
    g = build_graph(s)
    assert sorted(p.source for p in g.parents("z")) == ["theta_mu", "theta_sigma"]


def test_branch_needs_influence_and_labels():
    s = copy.deepcopy(BRANCHING)
    s["links"] = [lk for lk in s["links"] if lk.get("kind") != "influence"]
    s["links"][-1].pop("when")
    rep = validate(build_graph(s, strict=False))
    assert len(rep.errors_of(ControlFlowError)) == 2


def test_unregistered_predicate():
    s = copy.deepcopy(BRANCHING)
    s["nodes"][2]["predicate"] = "mystery"
    s["predicates"] = ["mystery"]
    with pytest.raises(UnknownNameError):
        build_graph(s)


def test_report_lists_every_violation():
    s = spec(TWO_NODE, links=TWO_NODE["links"] + [{"from": "z", "to": "theta_mu"}, {"from": "x", "to": "theta_sigma"}])
    rep = validate(build_graph(s, strict=False))
    assert len(rep.errors_of(LinkTargetError)) == 2
    with pytest.raises(LinkTargetError):
        rep.raise_first()


def test_detached_links_do_not_change_sampling():
    g = modelfile.load("detached_pair")
    s = modelfile.to_spec(g)
    for lk in s["links"]:
        if lk.get("kind") == DETACHED:
            lk["kind"] = GENERATIVE
    plain = build_graph(s)
    assert any(lk.kind == DETACHED for lk in g.links)
    assert not any(lk.kind == DETACHED for lk in plain.links)
    for seed in range(10):
        assert sample_trace(g, seed) == sample_trace(plain, seed)


# random DAG models


@st.composite
def dag_specs(draw):
    n = draw(st.integers(1, 7))
    names = [f"v{i}" for i in range(n)]
    nodes, links = [], []
    for i, name in enumerate(names):
        parents = sorted(draw(st.sets(st.sampled_from(names[:i]), max_size=3))) if i else []
        loc = {"op": "sum", "args": parents} if parents else 0.0
        node = {"name": name, "kind": "latent", "distribution": "normal", "params": {"loc": loc, "scale": 1.0}}
        if draw(st.booleans()):
            node["kind"] = "observed"
            node["value"] = draw(st.floats(-3, 3))
        nodes.append(node)
        for p in parents:
            kind = draw(st.sampled_from(["generative", "detached"]))
            links.append({"from": p, "to": name, "kind": kind})
    order = draw(st.permutations(range(n)))
    return {"nodes": [nodes[i] for i in order], "links": links}


@settings(max_examples=60, deadline=None)
@given(dag_specs())
def test_valid_graphs_have_a_topological_order(s):
    g = build_graph(s)
    order = g.topological_order()
    pos = {n: i for i, n in enumerate(order)}
    for lk in g.links:
        assert pos[lk.source] < pos[lk.target]


@settings(max_examples=60, deadline=None)
@given(dag_specs())
def test_round_trip_is_identity(s):
    g = build_graph(s)
    text = modelfile.serialize(g)
    assert build_graph(text) == g
    assert modelfile.serialize(build_graph(text)) == text


@settings(max_examples=30, deadline=None)
@given(dag_specs(), st.integers(0, 2**16))
def test_sampling_visits_each_node_once(s, seed):
    g = build_graph(s)
    t = sample_trace(g, seed)
    assert len(t.path) == len(set(t.path)) <= len(g.nodes)
    for n in g.latents + g.observed:
        assert n in t.values
    assert all(np.isfinite(v) for v in t.values.values())
