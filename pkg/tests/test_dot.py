from pathlib import Path

import pytest

from gfg import dot, modelfile
from gfg.graph import build_graph

GOLDEN = Path(__file__).parent / "golden"


def test_conjugate_golden(models):
    assert dot.render_dot(models["conjugate"]) == (GOLDEN / "conjugate.dot").read_text()


def test_detached_link_marking(models):
    text = dot.render_dot(models["detached_pair"])
    assert '"z_a" -> "z_b" [label="detached", arrowhead=curve];' in text
    assert '"z_a" -> "x_a";' in text


def test_influence_and_branch_labels():
    g = build_graph({
        "nodes": [
            {"name": "z", "kind": "latent", "distribution": "normal", "params": {"loc": 0.0, "scale": 1.0}},
            {"name": "c", "kind": "fixed_param", "value": 0.0},
            {"name": "b", "kind": "branch", "predicate": "positive"},
            {"name": "y", "kind": "latent", "distribution": "normal", "params": {"loc": "b", "scale": 1.0}},
            {"name": "w", "kind": "latent", "distribution": "normal", "params": {"loc": "b", "scale": 2.0}},
        ],
        "links": [
            {"from": "c", "to": "b"},
            {"from": "z", "to": "b", "kind": "influence"},
            {"from": "b", "to": "y", "when": 1},
            {"from": "b", "to": "w", "when": 0},
        ],
        "predicates": ["positive"],
    })
    text = dot.render_dot(g)
    assert '"z" -> "b" [style=dashed];' in text
    assert '"b" [shape=diamond];' in text
    assert 'headlabel="1"' in text
    assert dot.is_valid_dot(text)


def test_plate_cluster():
    text = dot.render_dot(modelfile.load("slam"))
    assert 'label="map: i = 1..3";' in text
    assert "peripheries=2;" in text


def test_empty_graph():
    text = dot.render_dot(build_graph({"nodes": [], "links": []}))
    assert dot.is_valid_dot(text)


def test_every_bundled_model_renders_valid_dot(models):
    for name, g in models.items():
        text = dot.render_dot(g)
        dot.check_dot(text)
        assert text == dot.render_dot(g), name


@pytest.mark.parametrize(
    "bad",
    [
        "digraph {",
        'digraph "g" { "a" -> ; }',
        "graph g { a -> b; }",
        'digraph g { a [shape=circle; }',
        "digraph g { } trailing",
        "",
    ],
)
def test_checker_rejects_malformed_text(bad):
    assert not dot.is_valid_dot(bad)
    with pytest.raises(dot.DotSyntaxError):
        dot.check_dot(bad)


def test_names_are_quoted():
    assert dot.quote('a"b') == '"a\\"b"'
