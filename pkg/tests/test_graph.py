import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsg.errors import EmptyBatch, MaskPresent
from dsg.graph import (
    SceneGraphState,
    Vocabulary,
    enumerate_graphs,
    pad_batch,
    serialize_graph,
    to_dot,
    unpad_batch,
    validate,
)


def state(nodes, edges=None, rels=None):
    n = len(nodes)
    e = np.zeros((n, n), dtype=int) if edges is None else np.array(edges)
    r = np.zeros((n, n), dtype=int) if rels is None else np.array(rels)
    return SceneGraphState(np.array(nodes), e, r)


def test_validate_inactive_pair_is_valid(tiny_vocab):
    s = state([0, 1])
    assert validate(s, tiny_vocab).ok


def test_validate_relation_on_inactive_edge(tiny_vocab):
    s = state([0, 1], [[0, 0], [0, 0]], [[0, 2], [0, 0]])
    report = validate(s, tiny_vocab)
    assert not report.ok
    assert "relation on inactive edge (0,1)" in report.violations


def test_validate_self_loop(tiny_vocab):
    e = np.zeros((3, 3), dtype=int)
    e[1, 1] = 1
    s = SceneGraphState(np.array([0, 1, 0]), e, np.zeros((3, 3), dtype=int))
    report = validate(s, tiny_vocab)
    assert any("self-loop at node 1" == v for v in report.violations)


def test_validate_active_edge_needs_relation(tiny_vocab):
    s = state([0, 1], [[0, 1], [0, 0]], [[0, 0], [0, 0]])
    assert not validate(s, tiny_vocab).ok


def test_validate_accepts_exactly_the_constrained_space(tiny_vocab):
    # per ordered pair: 1 inactive + k_rel active choices; nodes free
    graphs = enumerate_graphs(2, tiny_vocab)
    assert len(graphs) == tiny_vocab.k_obj ** 2 * (1 + tiny_vocab.k_rel) ** 2
    assert all(validate(g, tiny_vocab).ok for g in graphs)


def test_serialize_single_triplet(tiny_vocab):
    s = state([0, 1], [[0, 1], [0, 0]], [[0, 1], [0, 0]])
    assert serialize_graph(s, tiny_vocab) == "person holding dog"


def test_serialize_empty_graph(tiny_vocab):
    s = SceneGraphState(np.zeros(0, dtype=int), np.zeros((0, 0), dtype=int),
                        np.zeros((0, 0), dtype=int))
    assert serialize_graph(s, tiny_vocab) == ""


def test_serialize_isolated_node_appended():
    vocab = Vocabulary(("dog", "tree", "sky"), ("under",), np.array([0.4, 0.3, 0.3]),
                       np.array([1.0]))
    e = np.zeros((3, 3), dtype=int)
    r = np.zeros((3, 3), dtype=int)
    e[0, 1] = 1
    r[0, 1] = 1
    s = SceneGraphState(np.array([0, 1, 2]), e, r)
    assert serialize_graph(s, vocab) == "dog under tree. sky"


def test_serialize_rejects_masks(tiny_vocab):
    s = state([tiny_vocab.mask_obj_index, 1])
    with pytest.raises(MaskPresent):
        serialize_graph(s, tiny_vocab)


def test_serialize_deterministic(tiny_vocab, tiny_dataset):
    graphs, _ = tiny_dataset
    for g in graphs[:10]:
        assert serialize_graph(g, tiny_vocab) == serialize_graph(g, tiny_vocab)


def test_pad_batch_masks(tiny_vocab):
    s2 = state([0, 1], [[0, 1], [0, 0]], [[0, 2], [0, 0]])
    s3 = state([1, 0, 1])
    batch = pad_batch([s2, s3])
    assert batch.max_nodes == 3
    assert batch.node_mask[0].tolist() == [1, 1, 0]
    assert batch.node_mask[1].tolist() == [1, 1, 1]
    assert batch.pair_mask[0, 0, 2] == 0
    assert batch.pair_mask[1, 0, 2] == 1
    assert batch.pair_mask[1, 1, 1] == 0


def test_pad_batch_singleton_all_real(tiny_vocab):
    s3 = state([1, 0, 1])
    batch = pad_batch([s3])
    off_diag = batch.pair_mask[0].sum()
    assert off_diag == 6 and batch.node_mask.all()


def test_pad_batch_empty_raises():
    with pytest.raises(EmptyBatch):
        pad_batch([])


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_pad_unpad_round_trip(data):
    vocab = Vocabulary(("a", "b", "c"), ("r1", "r2"), np.full(3, 1 / 3), np.full(2, 0.5))
    rng = np.random.default_rng(data.draw(st.integers(0, 10_000)))
    states = []
    for _ in range(data.draw(st.integers(1, 5))):
        n = int(rng.integers(1, 5))
        nodes = rng.integers(0, 3, size=n)
        edges = (rng.random((n, n)) < 0.4).astype(int)
        np.fill_diagonal(edges, 0)
        rels = edges * rng.integers(1, 3, size=(n, n))
        states.append(SceneGraphState(nodes, edges, rels))
    out = unpad_batch(pad_batch(states))
    for a, b in zip(states, out):
        assert np.array_equal(a.node_labels, b.node_labels)
        assert np.array_equal(a.edge_exist, b.edge_exist)
        assert np.array_equal(a.relation_labels, b.relation_labels)


def test_to_dot_single_node(tiny_vocab):
    text = to_dot(state([0]), tiny_vocab)
    assert "digraph" in text and '"person"' in text


def test_to_dot_edge_label(tiny_vocab):
    s = state([0, 1], [[0, 1], [0, 0]], [[0, 2], [0, 0]])
    text = to_dot(s, tiny_vocab)
    assert 'n0 -> n1 [label="near"]' in text


def test_to_dot_mask_label(tiny_vocab):
    text = to_dot(state([tiny_vocab.mask_obj_index]), tiny_vocab)
    assert '"[MASK]"' in text


def test_vocab_invariants_checked():
    with pytest.raises(ValueError):
        Vocabulary(("a", "b"), ("r",), np.array([0.5, 0.6]), np.array([1.0]))
