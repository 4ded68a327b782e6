"""Structure-aware forward corruption: the one-step kernel and the closed-form
marginal, both with edge-gated relations.

Relations are corrupted only on pairs whose edge is active at the target
timestep; a pair whose edge was just activated by corruption draws its
relation fresh from the relation prior, and an inactive pair is pinned to the
null relation.  All operations are pure functions of (state, schedule, rng)
and have batched counterparts used by the samplers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._kernels import categorical_rows
from .errors import MaskPresent, OutOfRange
from .graph import GraphBatch, pad_batch


def _check_t(schedule, t):
    if not 1 <= t <= schedule.t_steps:
        raise OutOfRange(f"t={t} outside [1, {schedule.t_steps}]")


def _draw_rows(prob_rows, rng):
    return categorical_rows(np.ascontiguousarray(prob_rows), rng.random(prob_rows.shape[0]))


def _gated_relations(e_new, e_prev, r_prev, q_r_t, prior_r, rng):
    """Relation corruption for one step given previous and freshly drawn edges.

    e_new == 0          -> 0
    e_new == 1, r_prev>0 -> draw from row r_prev of the relation kernel
    e_new == 1, r_prev=0 -> fresh draw from the relation prior
    """
    flat_e_new = e_new.reshape(-1)
    flat_r_prev = r_prev.reshape(-1)
    out = np.zeros_like(flat_r_prev)

    keep = (flat_e_new == 1) & (flat_r_prev > 0)
    if keep.any():
        rows = q_r_t[flat_r_prev[keep]]
        out[keep] = _draw_rows(rows, rng)
    fresh = (flat_e_new == 1) & (flat_r_prev == 0)
    if fresh.any():
        rows = np.tile(prior_r, (int(fresh.sum()), 1))
        out[fresh] = _draw_rows(rows, rng) + 1
    return out.reshape(e_new.shape)


def corrupt_step_batch(batch, t, schedule, rng):
    _check_t(schedule, t)
    b, n = batch.nodes.shape
    nodes = _draw_rows(schedule.q_v[t][batch.nodes.reshape(-1)], rng).reshape(b, n)
    edges = _draw_rows(schedule.q_e[t][batch.edges.reshape(-1)], rng).reshape(b, n, n)
    edges *= batch.pair_mask
    rels = _gated_relations(edges, batch.edges, batch.rels, schedule.q_r[t], schedule.prior_r, rng)
    nodes = np.where(batch.node_mask.astype(bool), nodes, batch.nodes)
    return GraphBatch(nodes, edges, rels, batch.node_mask, batch.pair_mask, batch.boxes)


def corrupt_step(x_prev, t, schedule, rng):
    """Sample x_t ~ q(x_t | x_{t-1}) for a single state."""
    return corrupt_step_batch(pad_batch([x_prev]), t, schedule, rng).state(0)


def sample_marginal_batch(batch, ts, schedule, rng):
    """Direct draw x_t ~ q(x_t | x_0) for a clean batch; ``ts`` is one
    timestep per graph (scalar broadcasts)."""
    b, n = batch.nodes.shape
    ts = np.broadcast_to(np.asarray(ts, dtype=np.int64), (b,))
    if ts.min() < 1 or ts.max() > schedule.t_steps:
        raise OutOfRange("timestep outside [1, T]")
    if (batch.nodes * batch.node_mask >= schedule.mask_obj_index).any() or (
        (batch.edges == 1) & (batch.rels == schedule.mask_rel_index)
    ).any():
        raise MaskPresent("sample_marginal requires a mask-free clean state")

    qv = schedule.qbar_v[ts]  # (B, K, K)
    rows_v = np.take_along_axis(qv, batch.nodes[:, :, None], axis=1).reshape(b * n, -1)
    nodes = _draw_rows(rows_v, rng).reshape(b, n)
    nodes = np.where(batch.node_mask.astype(bool), nodes, batch.nodes)

    qe = schedule.qbar_e[ts]
    rows_e = np.take_along_axis(qe, batch.edges.reshape(b, -1)[:, :, None], axis=1).reshape(b * n * n, 2)
    edges = _draw_rows(rows_e, rng).reshape(b, n, n)
    edges *= batch.pair_mask

    qr = schedule.qbar_r[ts]
    flat_e_t = edges.reshape(-1)
    flat_e_0 = batch.edges.reshape(-1)
    flat_r_0 = batch.rels.reshape(-1)
    rels = np.zeros_like(flat_r_0)
    kept = (flat_e_t == 1) & (flat_e_0 == 1)
    if kept.any():
        # per-entity rows of the per-graph cumulative relation kernel
        qr_rows = np.take_along_axis(
            qr, flat_r_0.reshape(b, n * n)[:, :, None], axis=1
        ).reshape(b * n * n, -1)
        rels[kept] = _draw_rows(qr_rows[kept], rng)
    fresh = (flat_e_t == 1) & (flat_e_0 == 0)
    if fresh.any():
        rows = np.tile(schedule.prior_r, (int(fresh.sum()), 1))
        rels[fresh] = _draw_rows(rows, rng) + 1
    rels = rels.reshape(b, n, n)
    return GraphBatch(nodes, edges, rels, batch.node_mask, batch.pair_mask, batch.boxes)


def sample_marginal(x_0, t, schedule, rng):
    """Sample x_t ~ q(x_t | x_0) in one shot via the cumulative kernels."""
    return sample_marginal_batch(pad_batch([x_0]), t, schedule, rng).state(0)


@dataclass(frozen=True, eq=False)
class MarginalDistribution:
    """Per-entity closed-form marginals of q(x_t | x_0).

    ``rel_dists`` is the conditional distribution of the relation given the
    edge is active at t (full relation alphabet including null and mask
    slots); inactive pairs are deterministically null.
    """

    node_dists: np.ndarray
    edge_active: np.ndarray
    rel_dists: np.ndarray


def marginal_distribution(x_0, t, schedule):
    _check_t(schedule, t)
    if x_0.has_masks(schedule.vocab):
        raise MaskPresent("marginal_distribution requires a mask-free clean state")
    n = x_0.n_nodes
    node_dists = schedule.qbar_v[t][x_0.node_labels]
    edge_active = schedule.qbar_e[t][x_0.edge_exist][:, :, 1]
    k_full = schedule.qbar_r[t].shape[0]
    rel_dists = np.zeros((n, n, k_full))
    active = x_0.edge_exist == 1
    rel_dists[active] = schedule.qbar_r[t][x_0.relation_labels[active]]
    prior_full = np.zeros(k_full)
    prior_full[1 : schedule.k_rel + 1] = schedule.prior_r
    rel_dists[~active] = prior_full
    diag = np.arange(n)
    edge_active[diag, diag] = 0.0
    rel_dists[diag, diag] = 0.0
    return MarginalDistribution(node_dists, edge_active, rel_dists)
