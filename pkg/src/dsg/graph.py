"""Factorized scene-graph state space: vocabulary, states, batches, serialization.

A scene graph is a directed labeled graph (V, E, R+) where node labels V take
values in an object alphabet, E is a binary edge-existence matrix with empty
diagonal, and R+ assigns a semantic relation to every active edge.  The
defining constraint of the space is edge-gating: ``e[i][j] == 0`` forces
``r[i][j] == 0``.  Mask tokens extend the object and relation alphabets by one
index each; edges carry no mask token.

All types here are immutable after construction and safe to share across
threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyBatch, MaskPresent


def _frozen(arr, dtype=None):
    out = np.asarray(arr, dtype=dtype)
    out = np.ascontiguousarray(out)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Vocabulary:
    """Object and relation alphabets with empirical frequency tables.

    Relation index 0 is reserved for the null relation, so the ``k_rel``
    semantic labels occupy indices ``1..k_rel``; ``relation_labels[i]`` names
    semantic index ``i + 1``.  Mask tokens sit just past the label ranges:
    ``mask_obj_index == k_obj`` and ``mask_rel_index == k_rel + 1``.
    """

    object_labels: tuple
    relation_labels: tuple
    object_freq: np.ndarray
    relation_freq: np.ndarray
    object_counts: np.ndarray | None = field(default=None, compare=False)
    relation_counts: np.ndarray | None = field(default=None, compare=False)
    edge_freq: float | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "object_labels", tuple(self.object_labels))
        object.__setattr__(self, "relation_labels", tuple(self.relation_labels))
        object.__setattr__(self, "object_freq", _frozen(self.object_freq, np.float64))
        object.__setattr__(self, "relation_freq", _frozen(self.relation_freq, np.float64))
        if self.object_counts is not None:
            object.__setattr__(self, "object_counts", _frozen(self.object_counts, np.float64))
        if self.relation_counts is not None:
            object.__setattr__(self, "relation_counts", _frozen(self.relation_counts, np.float64))
        if len(self.object_labels) != self.object_freq.shape[0]:
            raise ValueError("object_freq length must match object_labels")
        if len(self.relation_labels) != self.relation_freq.shape[0]:
            raise ValueError("relation_freq length must match relation_labels")
        if self.object_freq.size and abs(self.object_freq.sum() - 1.0) > 1e-9:
            raise ValueError("object_freq must sum to 1")
        if self.relation_freq.size and abs(self.relation_freq.sum() - 1.0) > 1e-9:
            raise ValueError("relation_freq must sum to 1")

    @property
    def k_obj(self):
        return len(self.object_labels)

    @property
    def k_rel(self):
        return len(self.relation_labels)

    @property
    def mask_obj_index(self):
        return self.k_obj

    @property
    def mask_rel_index(self):
        return self.k_rel + 1

    def object_name(self, v):
        return "[MASK]" if v == self.mask_obj_index else self.object_labels[v]

    def relation_name(self, r):
        if r == self.mask_rel_index:
            return "[MASK]"
        if r == 0:
            raise ValueError("null relation has no name")
        return self.relation_labels[r - 1]

    def hash(self):
        payload = json.dumps(
            {
                "objects": list(self.object_labels),
                "relations": list(self.relation_labels),
                "object_freq": [repr(x) for x in self.object_freq],
                "relation_freq": [repr(x) for x in self.relation_freq],
            },
            sort_keys=True,
        ).encode()
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def from_counts(cls, object_labels, relation_labels, object_counts, relation_counts):
        oc = np.asarray(object_counts, dtype=np.float64)
        rc = np.asarray(relation_counts, dtype=np.float64)
        of = oc / oc.sum() if oc.sum() > 0 else np.full(len(object_labels), 1.0 / max(len(object_labels), 1))
        rf = rc / rc.sum() if rc.sum() > 0 else np.full(len(relation_labels), 1.0 / max(len(relation_labels), 1))
        return cls(tuple(object_labels), tuple(relation_labels), of, rf, oc, rc)


@dataclass(frozen=True, eq=False)
class SceneGraphState:
    """One (V, E, R+) state, optionally with per-node boxes in cxcywh form."""

    node_labels: np.ndarray
    edge_exist: np.ndarray
    relation_labels: np.ndarray
    boxes: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "node_labels", _frozen(self.node_labels, np.int64))
        object.__setattr__(self, "edge_exist", _frozen(self.edge_exist, np.int64))
        object.__setattr__(self, "relation_labels", _frozen(self.relation_labels, np.int64))
        if self.boxes is not None:
            object.__setattr__(self, "boxes", _frozen(self.boxes, np.float64))
        n = self.node_labels.shape[0]
        if self.edge_exist.shape != (n, n) or self.relation_labels.shape != (n, n):
            raise ValueError("edge_exist and relation_labels must be n_nodes x n_nodes")
        if self.boxes is not None and self.boxes.shape != (n, 4):
            raise ValueError("boxes must be n_nodes x 4")

    @property
    def n_nodes(self):
        return self.node_labels.shape[0]

    def has_masks(self, vocab):
        if (self.node_labels == vocab.mask_obj_index).any():
            return True
        return bool(((self.edge_exist == 1) & (self.relation_labels == vocab.mask_rel_index)).any())

    def replace(self, node_labels=None, edge_exist=None, relation_labels=None, boxes=None):
        return SceneGraphState(
            self.node_labels if node_labels is None else node_labels,
            self.edge_exist if edge_exist is None else edge_exist,
            self.relation_labels if relation_labels is None else relation_labels,
            self.boxes if boxes is None else boxes,
        )


@dataclass(frozen=True)
class ValidityReport:
    violations: tuple

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok


def validate(state, vocab):
    """Check a state against the constrained space; violations become report
    entries, never exceptions."""
    v = []
    n = state.n_nodes
    labels = state.node_labels
    e = state.edge_exist
    r = state.relation_labels
    for i in range(n):
        if not (0 <= labels[i] <= vocab.mask_obj_index):
            v.append(f"node label out of range at node {i}")
    for i in range(n):
        if e[i, i] != 0 or r[i, i] != 0:
            v.append(f"self-loop at node {i}")
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if e[i, j] not in (0, 1):
                v.append(f"edge value out of range at ({i},{j})")
            elif e[i, j] == 0:
                if r[i, j] != 0:
                    v.append(f"relation on inactive edge ({i},{j})")
            else:
                if not (1 <= r[i, j] <= vocab.mask_rel_index):
                    v.append(f"invalid relation on active edge ({i},{j})")
    if state.boxes is not None:
        for i in range(n):
            cx, cy, w, h = state.boxes[i]
            if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0 and 0.0 < w <= 1.0 and 0.0 < h <= 1.0):
                v.append(f"box out of range at node {i}")
    return ValidityReport(tuple(v))


def serialize_graph(state, vocab):
    """Deterministic text form: one "<subj> <rel> <obj>" clause per active edge
    in row-major pair order, isolated nodes appended as bare names."""
    if state.has_masks(vocab):
        raise MaskPresent("cannot serialize a state that still carries mask tokens")
    n = state.n_nodes
    clauses = []
    touched = np.zeros(n, dtype=bool)
    for i in range(n):
        for j in range(n):
            if i != j and state.edge_exist[i, j] == 1:
                clauses.append(
                    f"{vocab.object_name(state.node_labels[i])} "
                    f"{vocab.relation_name(state.relation_labels[i, j])} "
                    f"{vocab.object_name(state.node_labels[j])}"
                )
                touched[i] = touched[j] = True
    for i in range(n):
        if not touched[i]:
            clauses.append(vocab.object_name(state.node_labels[i]))
    return ". ".join(clauses)


def to_dot(state, vocab):
    """GraphViz DOT text with object-name node labels and relation-name edge
    labels; mask tokens render as "[MASK]"."""
    lines = ["digraph scene_graph {"]
    for i in range(state.n_nodes):
        lines.append(f'  n{i} [label="{vocab.object_name(state.node_labels[i])}"];')
    for i in range(state.n_nodes):
        for j in range(state.n_nodes):
            if i != j and state.edge_exist[i, j] == 1:
                lines.append(f'  n{i} -> n{j} [label="{vocab.relation_name(state.relation_labels[i, j])}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True, eq=False)
class GraphBatch:
    """A batch of states padded to a common node count.

    ``node_mask[b, i] == 1`` marks a real node; ``pair_mask[b, i, j] == 1``
    marks an off-diagonal pair whose both endpoints are real.  Padded
    positions are ignored by every loss and metric.
    """

    nodes: np.ndarray
    edges: np.ndarray
    rels: np.ndarray
    node_mask: np.ndarray
    pair_mask: np.ndarray
    boxes: np.ndarray | None = None

    @property
    def size(self):
        return self.nodes.shape[0]

    @property
    def max_nodes(self):
        return self.nodes.shape[1]

    def state(self, b):
        n = int(self.node_mask[b].sum())
        boxes = None if self.boxes is None else self.boxes[b, :n]
        return SceneGraphState(self.nodes[b, :n], self.edges[b, :n, :n], self.rels[b, :n, :n], boxes)

    def states(self):
        return [self.state(b) for b in range(self.size)]

    def copy(self):
        return GraphBatch(
            self.nodes.copy(), self.edges.copy(), self.rels.copy(),
            self.node_mask.copy(), self.pair_mask.copy(),
            None if self.boxes is None else self.boxes.copy(),
        )

    @classmethod
    def full(cls, nodes, edges, rels, boxes=None):
        """Batch of same-size graphs: every node and off-diagonal pair is real."""
        b, n = nodes.shape
        node_mask = np.ones((b, n), dtype=np.int64)
        pair_mask = np.ones((b, n, n), dtype=np.int64)
        pair_mask[:, np.arange(n), np.arange(n)] = 0
        return cls(nodes.astype(np.int64), edges.astype(np.int64), rels.astype(np.int64),
                   node_mask, pair_mask, boxes)


def pad_batch(states):
    """Pad a list of states to the max node count; unpad o pad is the identity
    on valid entries."""
    if not states:
        raise EmptyBatch("pad_batch requires at least one state")
    n_max = max(s.n_nodes for s in states)
    b = len(states)
    nodes = np.zeros((b, n_max), dtype=np.int64)
    edges = np.zeros((b, n_max, n_max), dtype=np.int64)
    rels = np.zeros((b, n_max, n_max), dtype=np.int64)
    node_mask = np.zeros((b, n_max), dtype=np.int64)
    pair_mask = np.zeros((b, n_max, n_max), dtype=np.int64)
    any_boxes = any(s.boxes is not None for s in states)
    boxes = np.zeros((b, n_max, 4), dtype=np.float64) if any_boxes else None
    for k, s in enumerate(states):
        n = s.n_nodes
        nodes[k, :n] = s.node_labels
        edges[k, :n, :n] = s.edge_exist
        rels[k, :n, :n] = s.relation_labels
        node_mask[k, :n] = 1
        pair_mask[k, :n, :n] = 1
        if s.boxes is not None:
            boxes[k, :n] = s.boxes
    for i in range(n_max):
        pair_mask[:, i, i] = 0
    return GraphBatch(nodes, edges, rels, node_mask, pair_mask, boxes)


def unpad_batch(batch):
    return batch.states()


def batch_violation_count(batch, vocab):
    """Vectorized constraint check over a batch; returns the total number of
    violated (entity, rule) pairs, zero iff every state lies in the space."""
    nodes, e, r = batch.nodes, batch.edges, batch.rels
    nm, pm = batch.node_mask.astype(bool), batch.pair_mask.astype(bool)
    count = int((nm & ~((nodes >= 0) & (nodes <= vocab.mask_obj_index))).sum())
    diag = np.arange(batch.max_nodes)
    count += int((e[:, diag, diag] != 0).sum() + (r[:, diag, diag] != 0).sum())
    count += int((pm & ~((e == 0) | (e == 1))).sum())
    count += int((pm & (e == 0) & (r != 0)).sum())
    count += int((pm & (e == 1) & ~((r >= 1) & (r <= vocab.mask_rel_index))).sum())
    return count


def enumerate_graphs(n_nodes, vocab):
    """Every valid mask-free state on ``n_nodes`` nodes, in a fixed order.

    Per ordered pair there are ``1 + k_rel`` choices (inactive, or active with
    each semantic relation), so the count is
    ``k_obj**n + ...`` -- exponential; intended for oracle-scale spaces only.
    """
    pair_choices = [(0, 0)] + [(1, r) for r in range(1, vocab.k_rel + 1)]
    pairs = [(i, j) for i in range(n_nodes) for j in range(n_nodes) if i != j]
    out = []

    def rec_nodes(prefix):
        if len(prefix) == n_nodes:
            rec_pairs(prefix, 0, [])
            return
        for v in range(vocab.k_obj):
            rec_nodes(prefix + [v])

    def rec_pairs(nodes, k, acc):
        if k == len(pairs):
            e = np.zeros((n_nodes, n_nodes), dtype=np.int64)
            r = np.zeros((n_nodes, n_nodes), dtype=np.int64)
            for (i, j), (ev, rv) in zip(pairs, acc):
                e[i, j] = ev
                r[i, j] = rv
            out.append(SceneGraphState(np.array(nodes), e, r))
            return
        for choice in pair_choices:
            rec_pairs(nodes, k + 1, acc + [choice])

    rec_nodes([])
    return out
