import json

import numpy as np
import pytest

from dsg.data import (
    SynthSpec,
    exact_stats,
    graph_to_json,
    load_checkpoint,
    load_corpus,
    save_checkpoint,
    synth_generate,
    write_corpus,
)
from dsg.denoiser import MessagePassingDenoiser, TrainConfig, train
from dsg.errors import (
    CorruptFile,
    InconsistentSpec,
    InvalidGraph,
    ParseError,
    VersionMismatch,
    VocabHashMismatch,
)
from dsg.graph import SceneGraphState, validate
from dsg.metrics import rare_k_tv_exact, triplet_tv_exact
from dsg.schedule import build_schedule


def test_empty_corpus(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    vocab, states = load_corpus(path)
    assert states == [] and vocab.k_obj == 0


def test_single_triplet_corpus(tmp_path):
    path = tmp_path / "one.jsonl"
    path.write_text(json.dumps({"nodes": ["person", "surfboard"],
                                "edges": [{"s": 0, "o": 1, "r": "on"}]}) + "\n")
    vocab, states = load_corpus(path)
    assert vocab.k_obj == 2 and vocab.k_rel == 1
    assert len(states) == 1 and validate(states[0], vocab).ok
    assert states[0].edge_exist[0, 1] == 1


def test_malformed_relation_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"nodes": ["a"], "edges": []}\n{"nodes": ["b"], "edges": [{"s": 0, "o": 5, "r": "x"}]}\n')
    with pytest.raises(ParseError) as err:
        load_corpus(path)
    assert "line 2" in str(err.value)


def test_bad_json_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"nodes": ["a"]}\nnot json\n')
    with pytest.raises(ParseError) as err:
        load_corpus(path)
    assert err.value.line == 2


def test_symmetric_loading(tmp_path):
    path = tmp_path / "sym.jsonl"
    path.write_text(json.dumps({"nodes": ["a", "b"],
                                "edges": [{"s": 0, "o": 1, "r": "near"}]}) + "\n")
    _, states = load_corpus(path, symmetric=True)
    s = states[0]
    assert s.edge_exist[0, 1] == 1 and s.edge_exist[1, 0] == 1
    assert s.relation_labels[1, 0] == s.relation_labels[0, 1]


def test_corpus_round_trip(tmp_path):
    spec = SynthSpec.preset("long_tailed", k_obj=5, k_rel=6)
    spec.box_law = "relational"
    vocab, states, _ = synth_generate(spec, 60, np.random.default_rng(0))
    path = tmp_path / "c.jsonl"
    write_corpus(path, states, vocab)
    vocab2, states2 = load_corpus(path)
    assert len(states2) == len(states)
    for a, b in zip(states, states2):
        assert [vocab.object_name(v) for v in a.node_labels] == \
               [vocab2.object_name(v) for v in b.node_labels]
        assert np.array_equal(a.edge_exist, b.edge_exist)
        for i in range(a.n_nodes):
            for j in range(a.n_nodes):
                if a.edge_exist[i, j]:
                    assert vocab.relation_name(a.relation_labels[i, j]) == \
                           vocab2.relation_name(b.relation_labels[i, j])
        assert np.abs(a.boxes - b.boxes).max() < 1e-9


def test_degenerate_box_rejected(tmp_path):
    path = tmp_path / "z.jsonl"
    path.write_text(json.dumps({"nodes": ["a"], "edges": [],
                                "boxes": [[0.5, 0.5, 0.0, 0.2]]}) + "\n")
    with pytest.raises(ParseError):
        load_corpus(path)


# -- synthetic corpora ------------------------------------------------------------


def test_deterministic_preset_obeys_rule():
    spec = SynthSpec.preset("deterministic", k_obj=3, k_rel=3)
    vocab, states, stats = synth_generate(spec, 100, np.random.default_rng(1))
    for s in states:
        for i in range(s.n_nodes):
            for j in range(s.n_nodes):
                if s.edge_exist[i, j]:
                    expect = 1 + (s.node_labels[i] + s.node_labels[j]) % 3
                    assert s.relation_labels[i, j] == expect
    # the exact triplet law is a point mass per pair type
    per_pair = {}
    for (a, r, b), p in stats.triplet.items():
        per_pair.setdefault((a, b), []).append(r)
    assert all(len(v) == 1 for v in per_pair.values())


def test_long_tailed_histogram_matches_exact_law():
    spec = SynthSpec.preset("long_tailed", k_obj=6, k_rel=8)
    vocab, states, stats = synth_generate(spec, 4000, np.random.default_rng(2))
    assert triplet_tv_exact(states, stats.triplet) < 0.03
    assert rare_k_tv_exact(states, stats.relation_marginal) < 0.02
    # the marginal is long-tailed and ranked head-first
    m = stats.relation_marginal
    assert m[0] > 2.5 * m[-1]
    assert all(validate(s, vocab).ok for s in states)


def test_zero_graphs_still_returns_stats():
    spec = SynthSpec.preset("uniform", k_obj=3, k_rel=2)
    vocab, states, stats = synth_generate(spec, 0, np.random.default_rng(3))
    assert states == []
    assert abs(sum(stats.triplet.values()) - 1.0) < 1e-9


def test_exact_degree_law_matches_empirical():
    spec = SynthSpec.preset("uniform", k_obj=3, k_rel=2)
    vocab, states, stats = synth_generate(spec, 4000, np.random.default_rng(4))
    degs = np.concatenate([s.edge_exist.sum(axis=1) for s in states])
    emp = np.bincount(degs, minlength=stats.out_degree_pmf.shape[0])
    emp = emp / emp.sum()
    assert 0.5 * np.abs(emp - stats.out_degree_pmf).sum() < 0.02


def test_inconsistent_spec_rejected():
    with pytest.raises(InconsistentSpec):
        SynthSpec(2, 2, {2: 1.0}, [(1.0, np.array([0.5, 0.5]))],
                  np.full((2, 2), 0.3), np.full((2, 2, 2), 0.7))  # bad conditionals
    with pytest.raises(InconsistentSpec):
        SynthSpec(2, 2, {2: 0.5}, [(1.0, np.array([0.5, 0.5]))],
                  np.full((2, 2), 0.3), np.full((2, 2, 2), 0.5))  # node law sum != 1


def test_stats_sidecar_serializable():
    spec = SynthSpec.preset("long_tailed", k_obj=4, k_rel=4)
    stats = exact_stats(spec)
    text = json.dumps(stats.as_dict(), sort_keys=True)
    assert json.loads(text)["edge_density"] > 0


# -- checkpoints -------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_ckpt():
    spec = SynthSpec.preset("uniform", k_obj=3, k_rel=2)
    vocab, states, _ = synth_generate(spec, 80, np.random.default_rng(5))
    sched = build_schedule(5, vocab, mask_mix=0.2)
    cfg = TrainConfig(epochs=1, batch_size=16, learning_rate=3e-4, seed=0)
    ckpt, _ = train(states, sched, cfg, np.random.default_rng(6))
    return ckpt, vocab


def test_checkpoint_round_trip_bit_identical(tmp_path, trained_ckpt):
    ckpt, vocab = trained_ckpt
    path = tmp_path / "m.dsg"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.vocab_hash == ckpt.vocab_hash
    for k in ckpt.params:
        assert np.array_equal(loaded.params[k], ckpt.params[k])
        assert np.array_equal(loaded.ema_params[k], ckpt.ema_params[k])
    # model round trip: predictions identical
    a = ckpt.build_model().predict_batch
    b = loaded.build_model().predict_batch
    spec = SynthSpec.preset("uniform", k_obj=3, k_rel=2)
    _, states, _ = synth_generate(spec, 4, np.random.default_rng(7))
    from dsg.graph import pad_batch

    batch = pad_batch(states)
    assert np.array_equal(a(batch, 2).obj_probs, b(batch, 2).obj_probs)


def test_checkpoint_truncated(tmp_path, trained_ckpt):
    ckpt, _ = trained_ckpt
    path = tmp_path / "m.dsg"
    save_checkpoint(ckpt, path)
    data = path.read_bytes()
    (tmp_path / "cut.dsg").write_bytes(data[: len(data) // 2])
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "cut.dsg")
    (tmp_path / "junk.dsg").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CorruptFile):
        load_checkpoint(tmp_path / "junk.dsg")


def test_checkpoint_version_mismatch(tmp_path, trained_ckpt):
    import struct

    ckpt, _ = trained_ckpt
    path = tmp_path / "m.dsg"
    save_checkpoint(ckpt, path)
    data = bytearray(path.read_bytes())
    data[4:8] = struct.pack("<I", 99)
    (tmp_path / "v99.dsg").write_bytes(bytes(data))
    with pytest.raises(VersionMismatch):
        load_checkpoint(tmp_path / "v99.dsg")


def test_checkpoint_vocab_mismatch(tmp_path, trained_ckpt):
    ckpt, vocab = trained_ckpt
    path = tmp_path / "m.dsg"
    save_checkpoint(ckpt, path)
    spec = SynthSpec.preset("uniform", k_obj=4, k_rel=3)
    other_vocab, _, _ = synth_generate(spec, 5, np.random.default_rng(8))
    with pytest.raises(VocabHashMismatch):
        load_checkpoint(path, expected_vocab=other_vocab)
    assert load_checkpoint(path, expected_vocab=vocab) is not None
