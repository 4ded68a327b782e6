"""Exact Bayes clean-state predictor over an enumerable data distribution.

Given a finite set of clean candidate graphs with probabilities, the oracle
computes p(x_0 | x_t) proportional to p_data(x_0) * q(x_t | x_0) using the
closed-form forward marginals, then marginalizes to per-entity clean
distributions.  It underwrites every downstream sampler test.

Predictions are cached: when the noisy state space is small enough the full
per-timestep table is built lazily and lookups become array gathers;
otherwise individual states are memoized by their byte encoding.
"""

from __future__ import annotations

import numpy as np

from .._kernels import encode_mixed_radix
from ..errors import UnreachableState
from ..graph import GraphBatch
from .base import Denoiser, DenoiserOutput

_TABLE_LIMIT = 200_000


class TabularBayesOracle(Denoiser):
    def __init__(self, states, probs, schedule, table_limit=_TABLE_LIMIT):
        probs = np.asarray(probs, dtype=np.float64)
        if len(states) != probs.shape[0] or not len(states):
            raise ValueError("states and probs must be equal-length and non-empty")
        if abs(probs.sum() - 1.0) > 1e-9 or (probs < 0).any():
            raise ValueError("probs must be a distribution")
        self.schedule = schedule
        self.table_limit = table_limit
        self._groups = {}
        for s, p in zip(states, probs):
            g = self._groups.setdefault(s.n_nodes, {"nodes": [], "edges": [], "rels": [], "boxes": [], "probs": []})
            g["nodes"].append(s.node_labels)
            g["edges"].append(s.edge_exist)
            g["rels"].append(s.relation_labels)
            g["boxes"].append(s.boxes)
            g["probs"].append(p)
        for n, g in self._groups.items():
            g["nodes"] = np.stack(g["nodes"])
            g["edges"] = np.stack(g["edges"])
            g["rels"] = np.stack(g["rels"])
            g["probs"] = np.asarray(g["probs"])
            g["boxes"] = np.stack(g["boxes"]) if all(b is not None for b in g["boxes"]) else None
            with np.errstate(divide="ignore"):
                g["log_probs"] = np.log(g["probs"])
            c = g["nodes"].shape[0]
            k_obj, k_rel = schedule.k_obj, schedule.k_rel
            g["oh_v"] = np.zeros((c, n, k_obj))
            for k in range(k_obj):
                g["oh_v"][:, :, k] = g["nodes"] == k
            g["oh_r"] = np.zeros((c, n, n, k_rel))
            for k in range(k_rel):
                g["oh_r"][:, :, :, k] = (g["edges"] == 1) & (g["rels"] == k + 1)
        self._tables = {}
        self._memo = {}
        self._log_qbar = {}

    # -- likelihood pieces -------------------------------------------------

    def _logs(self, t):
        if t not in self._log_qbar:
            with np.errstate(divide="ignore"):
                prior_full = np.zeros(self.schedule.k_rel + 2)
                prior_full[1 : self.schedule.k_rel + 1] = self.schedule.prior_r
                self._log_qbar[t] = (
                    np.log(self.schedule.qbar_v[t]),
                    np.log(self.schedule.qbar_e[t]),
                    np.log(self.schedule.qbar_r[t]),
                    np.log(prior_full),
                )
        return self._log_qbar[t]

    def _posterior_weights(self, group, nodes, edges, rels, t):
        """Log-posterior over clean candidates for each query row."""
        lv, le, lr, lprior = self._logs(t)
        c = group["nodes"].shape[0]
        b, n = nodes.shape
        ll = np.tile(group["log_probs"], (b, 1))
        for i in range(n):
            ll += lv[group["nodes"][:, i]][:, nodes[:, i]].T
        for i in range(n):
            for j in range(n):
                if i == j:
                    continue
                e0 = group["edges"][:, i, j]
                r0 = group["rels"][:, i, j]
                e_t = edges[:, i, j]
                r_t = rels[:, i, j]
                ll += le[e0][:, e_t].T
                kept = lr[r0][:, r_t].T            # (B, C): clean edge carried through
                fresh = np.tile(lprior[r_t][:, None], (1, c))  # edge activated by corruption
                rel_term = np.where(e0[None, :] == 1, kept, fresh)
                ll += np.where((e_t == 1)[:, None], rel_term, 0.0)
        return ll

    def _compute(self, nodes, edges, rels, t, raise_dead=True):
        n = nodes.shape[1]
        group = self._groups.get(n)
        if group is None:
            raise UnreachableState(f"no clean candidates with {n} nodes")
        ll = self._posterior_weights(group, nodes, edges, rels, t)
        peak = ll.max(axis=1)
        dead = ~np.isfinite(peak)
        if dead.any():
            if raise_dead:
                raise UnreachableState("noisy state has zero forward support under every candidate")
            ll = ll.copy()
            ll[dead] = 0.0
            peak = ll.max(axis=1)
        w = np.exp(ll - peak[:, None])
        w /= w.sum(axis=1, keepdims=True)

        obj = np.einsum("bc,cik->bik", w, group["oh_v"])
        p_edge = np.einsum("bc,cij->bij", w, (group["edges"] == 1).astype(np.float64))
        edge = np.stack([1.0 - p_edge, p_edge], axis=-1)
        num = np.einsum("bc,cijk->bijk", w, group["oh_r"])
        rel = np.where(p_edge[..., None] > 1e-300, num / np.maximum(p_edge[..., None], 1e-300),
                       self.schedule.prior_r)
        diag = np.arange(n)
        rel[:, diag, diag] = self.schedule.prior_r
        boxes = None
        if group["boxes"] is not None:
            boxes = np.einsum("bc,cid->bid", w, group["boxes"])
        with np.errstate(divide="ignore"):
            logits = np.log(np.maximum(edge, 1e-300))
        return DenoiserOutput(obj, edge, rel, logits, boxes), dead

    # -- state-space table mode ---------------------------------------------

    def _space_size(self, n):
        pair_digits = n * (n - 1)
        size = (self.schedule.k_obj + 1) ** n * (self.schedule.k_rel + 2) ** pair_digits
        return size

    def _encode(self, nodes, edges, rels):
        b, n = nodes.shape
        off = [(i, j) for i in range(n) for j in range(n) if i != j]
        digits = np.empty((b, n + len(off)), dtype=np.int64)
        digits[:, :n] = nodes
        for k, (i, j) in enumerate(off):
            digits[:, n + k] = np.where(edges[:, i, j] == 1, rels[:, i, j], 0)
        radices = np.array([self.schedule.k_obj + 1] * n + [self.schedule.k_rel + 2] * len(off), dtype=np.int64)
        return encode_mixed_radix(digits, radices)

    def _decode_all(self, n):
        """Enumerate every encodable state on n nodes (validity by construction)."""
        off = [(i, j) for i in range(n) for j in range(n) if i != j]
        radices = [self.schedule.k_obj + 1] * n + [self.schedule.k_rel + 2] * len(off)
        size = self._space_size(n)
        codes = np.arange(size, dtype=np.int64)
        digits = np.empty((size, len(radices)), dtype=np.int64)
        rem = codes.copy()
        for d in range(len(radices) - 1, -1, -1):
            digits[:, d] = rem % radices[d]
            rem //= radices[d]
        nodes = digits[:, :n]
        edges = np.zeros((size, n, n), dtype=np.int64)
        rels = np.zeros((size, n, n), dtype=np.int64)
        for k, (i, j) in enumerate(off):
            d = digits[:, n + k]
            edges[:, i, j] = d > 0
            rels[:, i, j] = d
        return nodes, edges, rels

    def _table(self, n, t):
        key = (n, t)
        if key not in self._tables:
            nodes, edges, rels = self._decode_all(n)
            self._tables[key] = self._compute(nodes, edges, rels, t, raise_dead=False)
        return self._tables[key]

    # -- public ---------------------------------------------------------------

    def predict_batch(self, batch, t):
        nodes, edges, rels = batch.nodes, batch.edges, batch.rels
        n = nodes.shape[1]
        if self._space_size(n) <= self.table_limit and n in self._groups:
            table, dead = self._table(n, t)
            idx = self._encode(nodes, edges, rels)
            if dead[idx].any():
                raise UnreachableState("noisy state has zero forward support under every candidate")
            return DenoiserOutput(
                table.obj_probs[idx], table.edge_probs[idx], table.rel_probs[idx],
                table.edge_logits[idx],
                None if table.box_preds is None else table.box_preds[idx],
            )
        b = nodes.shape[0]
        keys = [
            (t, nodes[i].tobytes(), edges[i].tobytes(), rels[i].tobytes())
            for i in range(b)
        ]
        missing = [i for i, k in enumerate(keys) if k not in self._memo]
        if missing:
            sub, _ = self._compute(nodes[missing], edges[missing], rels[missing], t)
            for row, i in enumerate(missing):
                self._memo[keys[i]] = (
                    sub.obj_probs[row], sub.edge_probs[row], sub.rel_probs[row],
                    sub.edge_logits[row],
                    None if sub.box_preds is None else sub.box_preds[row],
                )
        rows = [self._memo[k] for k in keys]
        return DenoiserOutput(
            np.stack([r[0] for r in rows]),
            np.stack([r[1] for r in rows]),
            np.stack([r[2] for r in rows]),
            np.stack([r[3] for r in rows]),
            None if rows[0][4] is None else np.stack([r[4] for r in rows]),
        )


def dataset_from_batch(batch, probs=None):
    """Helper: collapse a batch of clean graphs into (unique states, weights)."""
    states = batch.states() if isinstance(batch, GraphBatch) else list(batch)
    if probs is None:
        probs = np.full(len(states), 1.0 / len(states))
    seen = {}
    out_states, out_probs = [], []
    for s, p in zip(states, probs):
        key = (s.node_labels.tobytes(), s.edge_exist.tobytes(), s.relation_labels.tobytes())
        if key in seen:
            out_probs[seen[key]] += p
        else:
            seen[key] = len(out_states)
            out_states.append(s)
            out_probs.append(p)
    return out_states, np.asarray(out_probs)
