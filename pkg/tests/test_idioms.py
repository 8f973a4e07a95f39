import numpy as np
import pytest

from gfg import factorize, idioms, modelfile, oracle
from gfg.errors import BindingError, SchemaError, SlotSignatureError
from gfg.graph import DETACHED, LATENT, build_graph, validate


def normal(loc, scale=1.0):
    return {"distribution": "normal", "params": {"loc": loc, "scale": scale}}


WALK = {
    "transition": normal({"op": "add", "args": ["$prev_state", "$action"]}),
    "policy_prior": normal(0.0, 0.5),
}
GAUSS_SLAM = {
    **WALK,
    "perception": normal({"op": "sum", "args": ["$state", "$action", "$map"]}),
    "map_prior": normal(0.0),
    "initial_state": normal(0.0),
}


def tabular_mdp(table):
    return {
        "transition": {"distribution": "categorical",
                       "params": {"probs": {"table": [[[0.9, 0.1], [0.2, 0.8]], [[0.7, 0.3], [0.1, 0.9]]],
                                            "index": ["$prev_state", "$action"]}}},
        "policy_prior": {"distribution": "categorical", "params": {"probs": [0.5, 0.5]}},
        "optimality": {"distribution": "bernoulli",
                       "params": {"probs": {"table": table, "index": ["$state", "$action"]}}},
        "initial_state": {"distribution": "categorical", "params": {"probs": [0.5, 0.5]}},
    }


def root_state():
    return {"nodes": [{"name": "z_s[0]", "kind": "latent", **normal(0.0)}], "links": []}


def chain(T):
    g = build_graph(root_state())
    for tau in range(1, T + 1):
        g = idioms.compose(g, idioms.transition_idiom(WALK, step=tau), {"prev_state": f"z_s[{tau - 1}]"}, prefix="")
    return g


def variables(g):
    return [n.name for n in g.nodes if n.kind in (LATENT, "observed")]


def test_transition_step_structure():
    frag = idioms.transition_idiom(WALK).instantiate({"prev_state": "s0"})
    latents = [n for n in frag["nodes"] if n["kind"] == LATENT]
    assert len(latents) == 2
    assert len(frag["collections"]) == 1


def test_chained_transitions_factorize():
    atoms = factorize.factorize_joint(chain(2)).atom_set()
    expected = {
        ("z_s[2]", frozenset({"z_s[1]", "z_a[1]"}), frozenset()),
        ("z_a[1]", frozenset(), frozenset()),
        ("z_s[1]", frozenset({"z_s[0]", "z_a[0]"}), frozenset()),
        ("z_a[0]", frozenset(), frozenset()),
    }
    assert expected <= atoms


def test_missing_slot():
    with pytest.raises(SlotSignatureError):
        idioms.transition_idiom({"transition": WALK["transition"]})


@pytest.mark.parametrize(
    "slot",
    [
        normal({"op": "add", "args": ["$prev_state", "$state"]}),
        normal({"op": "add", "args": ["prev", "$action"]}),
        {"distribution": "poisson", "params": {"rate": 1.0}},
        {"distribution": "normal", "params": {"loc": "$prev_state"}},
    ],
)
def test_slot_signature_is_checked(slot):
    with pytest.raises(SlotSignatureError):
        idioms.transition_idiom({**WALK, "transition": slot})


@pytest.mark.parametrize("T,I", [(2, 3), (1, 1)])
def test_slam_node_counts(T, I):
    # initial state, I map cells, then state, action and percept per step
    g = build_graph(idioms.slam_idiom(GAUSS_SLAM, horizon=T, map_size=I).instantiate())
    assert len(variables(g)) == 1 + I + 3 * T
    assert validate(g).ok


def test_slam_chain_matches_transition_chain():
    slam = build_graph(idioms.slam_idiom(GAUSS_SLAM, horizon=3, map_size=2).instantiate())
    walk = chain(3)

    def edges(g):
        keep = {n for n in variables(g) if n.startswith(("z_s", "z_a"))}
        return {(s, lk.target, lk.kind) for lk in g.links for s in g.expand_source(lk)
                if s in keep and lk.target in keep}

    assert edges(slam) == edges(walk)


def test_mdp_with_equal_rewards_is_uniform():
    g = build_graph(idioms.mdp_idiom(tabular_mdp([[0.5, 0.5], [0.5, 0.5]]), horizon=1, initial_state=0).instantiate())
    post = oracle.enumerate_posterior(g)
    assert np.allclose(post.marginals["z_a[0]"], [0.5, 0.5], atol=1e-12)


def test_mdp_action_posterior_is_softmax():
    rewards = np.array([[-0.2, -1.5], [-0.7, -0.1]])
    g = build_graph(idioms.mdp_idiom(tabular_mdp(np.exp(rewards).tolist()), horizon=1, initial_state=1).instantiate())
    post = oracle.enumerate_posterior(g)
    soft = np.exp(rewards[1]) / np.exp(rewards[1]).sum()
    assert np.allclose(post.marginals["z_a[0]"], soft, atol=1e-12)


def test_mdp_has_an_optimality_factor_per_step():
    T = 3
    g = build_graph(idioms.mdp_idiom(tabular_mdp([[0.3, 0.6], [0.9, 0.2]]), horizon=T).instantiate())
    atoms = factorize.factorize_joint(g).atom_set()
    for tau in range(T):
        assert (f"x_O[{tau}]", frozenset({f"z_s[{tau}]", f"z_a[{tau}]"}), frozenset()) in atoms
        assert g.node(f"x_O[{tau}]").value == 1.0


def test_slam_composed_with_mdp(models):
    assert validate(models["slam_mdp"]).ok
    host = idioms.slam_idiom(modelfile.parse(modelfile.model_text("slam"))["idioms"][0]["slots"], 2, 3)
    mdp_slots = {k: v for k, v in tabular_mdp([[0.5, 0.5], [0.5, 0.5]]).items() if k != "initial_state"}
    mdp_slots["transition"] = host.slots["transition"]
    mdp_slots["policy_prior"] = host.slots["policy_prior"]
    mdp_slots["optimality"] = {"distribution": "bernoulli",
                               "params": {"probs": {"table": [[0.5] * 3] * 3, "index": ["$state", "$action"]}}}
    g = idioms.compose(host, idioms.mdp_idiom(mdp_slots, horizon=2), {"initial_state": "final_state"})
    assert validate(g).ok
    assert "mdp/z_a[0]" in g.latents
    assert {p.source for p in g.parents("mdp/x_O[0]")} == {"z_s[2]", "mdp/z_a[0]"}


def test_unbound_input():
    slots = {k: v for k, v in tabular_mdp([[0.5, 0.5], [0.5, 0.5]]).items() if k != "initial_state"}
    guest = idioms.mdp_idiom(slots, horizon=1)
    with pytest.raises(BindingError):
        guest.instantiate()
    with pytest.raises(BindingError):
        idioms.compose(root_state(), guest, {})
    with pytest.raises(BindingError):
        idioms.compose(root_state(), guest, {"initial_state": "nowhere"})
    with pytest.raises(BindingError):
        idioms.compose(root_state(), guest, {"exit": "z_s[0]"})


def test_binding_shape_mismatch():
    host = {"nodes": [{"name": "s", "kind": "latent", "distribution": "categorical",
                       "params": {"probs": [0.2, 0.3, 0.5]}}], "links": []}
    slots = {k: v for k, v in tabular_mdp([[0.5, 0.5], [0.5, 0.5]]).items() if k != "initial_state"}
    with pytest.raises(BindingError):
        idioms.compose(host, idioms.mdp_idiom(slots, horizon=1), {"initial_state": "s"})


def test_instantiation_is_deterministic():
    a = idioms.slam_idiom(GAUSS_SLAM, 2, 2).instantiate(prefix="r/")
    b = idioms.slam_idiom(GAUSS_SLAM, 2, 2).instantiate(prefix="r/")
    assert a == b
    assert build_graph(a) == build_graph(b)


@pytest.mark.parametrize("T,I", [(1, 1), (2, 3), (3, 2)])
def test_instantiated_idioms_validate(T, I):
    assert validate(build_graph(idioms.slam_idiom(GAUSS_SLAM, T, I).instantiate())).ok
    assert validate(build_graph(idioms.mdp_idiom(tabular_mdp([[0.4, 0.6], [0.9, 0.2]]), T).instantiate())).ok
    assert not any(lk.kind == DETACHED for lk in chain(T).links)


def test_slam_views_share_atoms(models):
    g = models["slam"]
    renders = {v: factorize.factorize_joint(g, cols(2)) for v, cols in idioms.SLAM_VIEWS.items()}
    atoms = {v: f.atom_set() for v, f in renders.items()}
    assert atoms["atomic"] == atoms["steps"] == atoms["blocks"]
    assert len(renders["atomic"].factors) > len(renders["steps"].factors) > len(renders["blocks"].factors)


def test_unknown_template():
    with pytest.raises(SchemaError):
        idioms.from_stanza({"template": "teleport"})
    with pytest.raises(SchemaError):
        idioms.from_stanza({"template": "slam", "slots": GAUSS_SLAM, "args": {"depth": 2}})
