"""Corpus ingestion (line-delimited graph JSON), synthetic generators with
analytically known statistics, and checkpoint persistence."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .denoiser.training import Checkpoint
from .errors import CorruptFile, InconsistentSpec, InvalidGraph, ParseError, VersionMismatch, VocabHashMismatch
from .graph import SceneGraphState, Vocabulary, validate

OBJECT_WORDS = ["person", "dog", "car", "tree", "sky", "chair", "boat", "horse", "house", "bird",
                "table", "cat", "lamp", "road", "cloud", "fence"]
RELATION_WORDS = ["holding", "under", "near", "above", "behind", "wearing", "riding", "pushing",
                  "beside", "facing", "carrying", "touching"]


# ---------------------------------------------------------------------------
# corpus JSONL
# ---------------------------------------------------------------------------


def graph_to_json(state, vocab):
    rec = {"nodes": [vocab.object_name(v) for v in state.node_labels], "edges": []}
    n = state.n_nodes
    for i in range(n):
        for j in range(n):
            if i != j and state.edge_exist[i, j] == 1:
                rec["edges"].append({"s": i, "o": j, "r": vocab.relation_name(state.relation_labels[i, j])})
    if state.boxes is not None:
        rec["boxes"] = [[float(x) for x in b] for b in state.boxes]
    return rec


def write_corpus(path, states, vocab):
    with open(path, "w") as fh:
        for s in states:
            fh.write(json.dumps(graph_to_json(s, vocab)) + "\n")


def load_corpus(path, symmetric=False, vocab=None):
    """Parse a JSONL corpus, build the vocabulary from observed labels, and
    validate every graph.  With ``symmetric`` set, each edge record is loaded
    as two directed edges.  Passing an existing ``vocab`` interprets labels
    against it by name (unknown labels are parse errors) instead of building
    a fresh one."""
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"bad JSON: {exc}", line=lineno) from exc
            if not isinstance(rec, dict) or "nodes" not in rec:
                raise ParseError("record must be an object with a 'nodes' list", line=lineno)
            records.append((lineno, rec))

    obj_names, rel_names = [], []
    obj_index, rel_index = {}, {}
    fixed_vocab = vocab is not None
    if fixed_vocab:
        obj_names = list(vocab.object_labels)
        rel_names = list(vocab.relation_labels)
        obj_index = {name: k for k, name in enumerate(obj_names)}
        rel_index = {name: k for k, name in enumerate(rel_names)}
    for lineno, rec in records:
        for name in rec["nodes"]:
            if not isinstance(name, str):
                raise ParseError("node labels must be strings", line=lineno)
            if name not in obj_index:
                if fixed_vocab:
                    raise ParseError(f"object label {name!r} not in vocabulary", line=lineno)
                obj_index[name] = len(obj_names)
                obj_names.append(name)
        for e in rec.get("edges", []):
            r = e.get("r")
            if not isinstance(r, str):
                raise ParseError("relation labels must be strings", line=lineno)
            if r not in rel_index:
                if fixed_vocab:
                    raise ParseError(f"relation label {r!r} not in vocabulary", line=lineno)
                rel_index[r] = len(rel_names)
                rel_names.append(r)

    obj_counts = np.zeros(len(obj_names))
    rel_counts = np.zeros(max(len(rel_names), 1))
    states = []
    total_pairs = 0
    total_edges = 0
    for lineno, rec in records:
        n = len(rec["nodes"])
        nodes = np.array([obj_index[name] for name in rec["nodes"]], dtype=np.int64)
        edges = np.zeros((n, n), dtype=np.int64)
        rels = np.zeros((n, n), dtype=np.int64)
        for e in rec.get("edges", []):
            try:
                s_i, o_i = int(e["s"]), int(e["o"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"malformed edge record: {e}", line=lineno) from exc
            if not (0 <= s_i < n and 0 <= o_i < n):
                raise ParseError(f"edge endpoint out of range: {e}", line=lineno)
            r = rel_index[e["r"]] + 1
            pairs = [(s_i, o_i), (o_i, s_i)] if symmetric else [(s_i, o_i)]
            for i, j in pairs:
                edges[i, j] = 1
                rels[i, j] = r
        boxes = None
        if "boxes" in rec and rec["boxes"] is not None:
            boxes = np.asarray(rec["boxes"], dtype=np.float64)
            if boxes.shape != (n, 4):
                raise ParseError("boxes must be one [cx,cy,w,h] row per node", line=lineno)
            if (boxes[:, 2:] <= 0).any():
                raise ParseError("degenerate zero-area box", line=lineno)
        state = SceneGraphState(nodes, edges, rels, boxes)
        obj_counts += np.bincount(nodes, minlength=len(obj_names))
        active = rels[edges == 1]
        if active.size:
            rel_counts[: len(rel_names)] += np.bincount(active - 1, minlength=len(rel_names))
        total_pairs += n * (n - 1)
        total_edges += int(edges.sum())
        states.append((lineno, state))

    if not fixed_vocab:
        vocab = Vocabulary.from_counts(obj_names, rel_names, obj_counts, rel_counts[: len(rel_names)])
        vocab = Vocabulary(vocab.object_labels, vocab.relation_labels, vocab.object_freq,
                           vocab.relation_freq, vocab.object_counts, vocab.relation_counts,
                           edge_freq=(total_edges / total_pairs) if total_pairs else None)
    out = []
    for lineno, state in states:
        report = validate(state, vocab)
        if not report.ok:
            raise InvalidGraph(f"line {lineno}: invalid graph", violations=report.violations)
        out.append(state)
    return vocab, out


# ---------------------------------------------------------------------------
# synthetic corpora with exact statistics
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Generative law for synthetic corpora.

    Graphs are drawn i.i.d.: a profile (scene cluster) is picked per graph,
    node labels are i.i.d. within the profile, each ordered pair's edge is
    Bernoulli in the pair's labels, and each active edge's relation follows a
    conditional law indexed by the label pair.
    """

    k_obj: int
    k_rel: int
    node_count_probs: dict
    profiles: list  # [(weight, label_probs)]
    edge_prob: np.ndarray  # (k_obj, k_obj)
    rel_probs: np.ndarray  # (k_obj, k_obj, k_rel)
    object_labels: tuple = ()
    relation_labels: tuple = ()
    box_law: str | None = None

    def __post_init__(self):
        if not self.object_labels:
            self.object_labels = tuple(OBJECT_WORDS[: self.k_obj])
        if not self.relation_labels:
            self.relation_labels = tuple(RELATION_WORDS[: self.k_rel])
        self.edge_prob = np.asarray(self.edge_prob, dtype=np.float64)
        self.rel_probs = np.asarray(self.rel_probs, dtype=np.float64)
        if self.edge_prob.shape != (self.k_obj, self.k_obj):
            raise InconsistentSpec("edge_prob must be k_obj x k_obj")
        if self.rel_probs.shape != (self.k_obj, self.k_obj, self.k_rel):
            raise InconsistentSpec("rel_probs must be k_obj x k_obj x k_rel")
        if np.abs(self.rel_probs.sum(axis=2) - 1.0).max() > 1e-9:
            raise InconsistentSpec("relation conditionals must sum to 1")
        if abs(sum(p for p, _ in self.profiles) - 1.0) > 1e-9:
            raise InconsistentSpec("profile weights must sum to 1")
        if abs(sum(self.node_count_probs.values()) - 1.0) > 1e-9:
            raise InconsistentSpec("node-count law must sum to 1")
        if ((self.edge_prob < 0) | (self.edge_prob > 1)).any():
            raise InconsistentSpec("edge probabilities must lie in [0, 1]")

    @classmethod
    def preset(cls, name, k_obj=6, k_rel=8):
        if name == "uniform":
            return cls(
                k_obj, k_rel, {2: 0.5, 3: 0.5},
                [(1.0, np.full(k_obj, 1.0 / k_obj))],
                np.full((k_obj, k_obj), 0.3),
                np.full((k_obj, k_obj, k_rel), 1.0 / k_rel),
            )
        if name == "deterministic":
            rel = np.zeros((k_obj, k_obj, k_rel))
            for a in range(k_obj):
                for b in range(k_obj):
                    rel[a, b, (a + b) % k_rel] = 1.0
            return cls(
                k_obj, k_rel, {2: 0.4, 3: 0.6},
                [(1.0, np.full(k_obj, 1.0 / k_obj))],
                np.full((k_obj, k_obj), 0.5),
                rel,
            )
        if name == "long_tailed":
            return cls._long_tailed(k_obj, k_rel)
        raise InconsistentSpec(f"unknown preset: {name}")

    @classmethod
    def _long_tailed(cls, k_obj, k_rel, zipf_exp=1.0, pref_mass=0.7):
        """Disjoint two-label scene clusters; pair-conditional relations whose
        pooled marginal tracks a Zipf law.

        Each graph draws all its nodes from one cluster, so object labels are
        correlated within a graph -- the structure a sampler must reproduce.
        """
        if k_obj < 2:
            raise InconsistentSpec("long_tailed preset needs k_obj >= 2")
        bounds = list(range(0, k_obj, 2)) + [k_obj]
        clusters = [list(range(lo, hi)) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]
        profiles = []
        for members in clusters:
            p = np.zeros(k_obj)
            p[members] = 1.0 / len(members)
            profiles.append((1.0 / len(clusters), p))
        zipf = 1.0 / np.arange(1, k_rel + 1) ** zipf_exp
        zipf /= zipf.sum()
        # distribute a preferred relation over in-cluster pair types so the
        # preferred-choice histogram itself tracks the zipf law
        pair_types = []
        for members in clusters:
            pair_types += [(a, b) for a in members for b in members]
        n_types = len(pair_types)
        alloc = np.floor(zipf * n_types).astype(int)
        rem = n_types - alloc.sum()
        order = np.argsort(-(zipf * n_types - alloc))
        for k in order[:rem]:
            alloc[k] += 1
        preferred = []
        for r, cnt in enumerate(alloc):
            preferred.extend([r] * cnt)
        rel = np.tile(zipf, (k_obj, k_obj, 1))
        for (a, b), r in zip(pair_types, preferred):
            rel[a, b] = (1.0 - pref_mass) * zipf
            rel[a, b, r] += pref_mass
        return cls(k_obj, k_rel, {3: 0.3, 4: 0.4, 5: 0.3}, profiles,
                   np.full((k_obj, k_obj), 0.5), rel)


@dataclass
class SynthStats:
    """Closed-form statistics of a SynthSpec, for oracle comparisons."""

    triplet: dict           # {(a, r, b): p} conditioned on an active edge
    relation_marginal: np.ndarray
    node_marginal: np.ndarray
    edge_density: float
    out_degree_pmf: np.ndarray
    in_degree_pmf: np.ndarray
    node_count_probs: dict = field(default_factory=dict)

    def as_dict(self):
        return {
            "triplet": [[int(a), int(r), int(b), float(p)] for (a, r, b), p in sorted(self.triplet.items())],
            "relation_marginal": [float(x) for x in self.relation_marginal],
            "node_marginal": [float(x) for x in self.node_marginal],
            "edge_density": float(self.edge_density),
            "out_degree_pmf": [float(x) for x in self.out_degree_pmf],
            "in_degree_pmf": [float(x) for x in self.in_degree_pmf],
            "node_count_probs": {str(k): float(v) for k, v in sorted(self.node_count_probs.items())},
        }


def _binom_pmf(n, p, size):
    pmf = np.zeros(size)
    k = np.arange(n + 1)
    from math import comb

    for kk in k:
        pmf[kk] = comb(n, kk) * p ** kk * (1 - p) ** (n - kk)
    return pmf


def exact_stats(spec):
    triplet = {}
    node_marginal = np.zeros(spec.k_obj)
    for w, probs in spec.profiles:
        node_marginal += w * probs
        for a in range(spec.k_obj):
            for b in range(spec.k_obj):
                mass = w * probs[a] * probs[b] * spec.edge_prob[a, b]
                if mass == 0:
                    continue
                for r in range(spec.k_rel):
                    p = mass * spec.rel_probs[a, b, r]
                    if p > 0:
                        key = (a, r + 1, b)
                        triplet[key] = triplet.get(key, 0.0) + p
    z = sum(triplet.values())
    if z == 0:
        raise InconsistentSpec("spec generates no active edges")
    triplet = {k: v / z for k, v in triplet.items()}
    rel_marginal = np.zeros(spec.k_rel)
    for (a, r, b), p in triplet.items():
        rel_marginal[r - 1] += p
    edge_density = 0.0
    for w, probs in spec.profiles:
        edge_density += w * float(probs @ spec.edge_prob @ probs)

    # degree laws pool over nodes, so a size-n graph weighs n times a node
    max_n = max(spec.node_count_probs)
    mean_n = sum(n * p for n, p in spec.node_count_probs.items())
    out_pmf = np.zeros(max_n)
    in_pmf = np.zeros(max_n)
    for n, pn in spec.node_count_probs.items():
        node_w = pn * n / mean_n
        for w, probs in spec.profiles:
            for a in range(spec.k_obj):
                if probs[a] == 0:
                    continue
                q_out = float(spec.edge_prob[a] @ probs)
                q_in = float(probs @ spec.edge_prob[:, a])
                out_pmf += node_w * w * probs[a] * _binom_pmf(n - 1, q_out, max_n)
                in_pmf += node_w * w * probs[a] * _binom_pmf(n - 1, q_in, max_n)
    return SynthStats(triplet, rel_marginal, node_marginal, edge_density,
                      out_pmf, in_pmf, dict(spec.node_count_probs))


def synth_generate(spec, n_graphs, rng):
    """Draw graphs i.i.d. from the spec; returns (vocabulary, states, stats)
    where the statistics are exact closed forms, not sample estimates."""
    stats = exact_stats(spec)
    counts = sorted(spec.node_count_probs)
    count_p = np.array([spec.node_count_probs[c] for c in counts])
    prof_p = np.array([w for w, _ in spec.profiles])
    states = []
    rel_counts = np.zeros(spec.k_rel)
    obj_counts = np.zeros(spec.k_obj)
    for _ in range(n_graphs):
        n = counts[rng.choice(len(counts), p=count_p)]
        profile = spec.profiles[rng.choice(len(prof_p), p=prof_p)][1]
        nodes = rng.choice(spec.k_obj, size=n, p=profile)
        edges = np.zeros((n, n), dtype=np.int64)
        rels = np.zeros((n, n), dtype=np.int64)
        for i in range(n):
            for j in range(n):
                if i != j and rng.random() < spec.edge_prob[nodes[i], nodes[j]]:
                    edges[i, j] = 1
                    rels[i, j] = rng.choice(spec.k_rel, p=spec.rel_probs[nodes[i], nodes[j]]) + 1
        boxes = None
        if spec.box_law == "relational":
            boxes = _relational_boxes(nodes, edges, rels, rng)
        states.append(SceneGraphState(nodes, edges, rels, boxes))
        obj_counts += np.bincount(nodes, minlength=spec.k_obj)
        active = rels[edges == 1]
        if active.size:
            rel_counts += np.bincount(active - 1, minlength=spec.k_rel)
    vocab = Vocabulary(
        spec.object_labels, spec.relation_labels,
        stats.node_marginal / stats.node_marginal.sum(),
        stats.relation_marginal / stats.relation_marginal.sum(),
        object_counts=obj_counts, relation_counts=np.maximum(rel_counts, 0),
        edge_freq=stats.edge_density,
    )
    return vocab, states, stats


def _relational_boxes(nodes, edges, rels, rng):
    """Boxes tied to relations: relation index 1 forces the subject's center
    above the object's."""
    n = nodes.shape[0]
    boxes = np.stack([
        rng.uniform(0.2, 0.8, n), rng.uniform(0.2, 0.8, n),
        rng.uniform(0.1, 0.35, n), rng.uniform(0.1, 0.35, n),
    ], axis=1)
    for i in range(n):
        for j in range(n):
            if i != j and edges[i, j] == 1 and rels[i, j] == 1 and boxes[i, 1] > boxes[j, 1]:
                boxes[[i, j], 1] = boxes[[j, i], 1]
    return boxes


# ---------------------------------------------------------------------------
# checkpoint container: "DSG1" magic + version + JSON header + float64 blobs
# ---------------------------------------------------------------------------

MAGIC = b"DSG1"
VERSION = 1


def _vocab_to_json(vocab):
    return {
        "object_labels": list(vocab.object_labels),
        "relation_labels": list(vocab.relation_labels),
        "object_freq": [float(x) for x in vocab.object_freq],
        "relation_freq": [float(x) for x in vocab.relation_freq],
        "object_counts": None if vocab.object_counts is None else [float(x) for x in vocab.object_counts],
        "relation_counts": None if vocab.relation_counts is None else [float(x) for x in vocab.relation_counts],
        "edge_freq": None if vocab.edge_freq is None else float(vocab.edge_freq),
    }


def _vocab_from_json(d):
    return Vocabulary(
        tuple(d["object_labels"]), tuple(d["relation_labels"]),
        np.array(d["object_freq"]), np.array(d["relation_freq"]),
        None if d.get("object_counts") is None else np.array(d["object_counts"]),
        None if d.get("relation_counts") is None else np.array(d["relation_counts"]),
        d.get("edge_freq"),
    )


def save_checkpoint(ckpt, path):
    tensors = []
    blobs = []
    for section, params in (("raw", ckpt.params), ("ema", ckpt.ema_params)):
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype=np.float64)
            tensors.append({"name": name, "section": section, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    header = json.dumps({
        "vocab": _vocab_to_json(ckpt.vocab),
        "vocab_hash": ckpt.vocab_hash,
        "schedule_config": ckpt.schedule_config,
        "arch": ckpt.arch,
        "meta": ckpt.meta,
        "tensors": tensors,
    }).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_vocab=None):
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[:4] != MAGIC:
        raise CorruptFile("not a checkpoint container (bad magic)")
    version, header_len = struct.unpack("<IQ", data[4:16])
    if version != VERSION:
        raise VersionMismatch(f"container version {version} unsupported")
    if len(data) < 16 + header_len:
        raise CorruptFile("truncated header")
    try:
        header = json.loads(data[16 : 16 + header_len])
    except json.JSONDecodeError as exc:
        raise CorruptFile("unreadable header") from exc
    vocab = _vocab_from_json(header["vocab"])
    if vocab.hash() != header["vocab_hash"]:
        raise CorruptFile("vocabulary hash does not match container contents")
    if expected_vocab is not None and expected_vocab.hash() != header["vocab_hash"]:
        raise VocabHashMismatch("checkpoint was trained against a different vocabulary")
    offset = 16 + header_len
    params, ema = {}, {}
    for spec in header["tensors"]:
        size = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = size * 8
        if offset + nbytes > len(data):
            raise CorruptFile(f"truncated tensor {spec['name']}")
        arr = np.frombuffer(data[offset : offset + nbytes], dtype=np.float64).reshape(spec["shape"]).copy()
        offset += nbytes
        (params if spec["section"] == "raw" else ema)[spec["name"]] = arr
    return Checkpoint(params, ema, vocab, header["vocab_hash"],
                      header["schedule_config"], header["arch"], header.get("meta", {}))
