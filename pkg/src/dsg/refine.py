"""Inference-time refinement kernels: split-Gibbs block resampling, soft-mask
resampling of low-confidence entities, and rarity-tilted relation refinement,
composed on a window schedule inside the reverse loop.

Window positions count steps elapsed from the start of the chain: a window
with start s and duration d fires when s <= (T - t + 1) < s + d, where t is
the reverse timestep that just completed.  Every kernel preserves the
constrained space e=0 => r=0 by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import ceil

import numpy as np

from ._kernels import categorical_rows
from .graph import GraphBatch


@dataclass(frozen=True)
class GibbsBlock:
    start: int = 25
    duration: int = 10
    sweeps: int = 1
    subset_order: tuple = ("R",)


@dataclass(frozen=True)
class SoftMaskBlock:
    start: int = 90
    duration: int = 10
    # selection: entropy threshold tau, or top-k by a fraction of entities
    tau: float | None = None
    top_frac: float = 0.10
    top_k: int | None = None


@dataclass(frozen=True)
class RareBlock:
    start: int = 50
    duration: int = 10
    beta_rare: float = 1.0
    fraction: float = 1.0


@dataclass(frozen=True)
class RefinementPlan:
    """Which kernels run and when; rare refinement is off by default because
    it trades graph fidelity for tail coverage."""

    gibbs: GibbsBlock | None = field(default_factory=GibbsBlock)
    soft_mask: SoftMaskBlock | None = field(default_factory=SoftMaskBlock)
    rare: RareBlock | None = None

    @classmethod
    def none(cls):
        return cls(gibbs=None, soft_mask=None, rare=None)


def _in_window(block, elapsed):
    return block is not None and block.start <= elapsed < block.start + block.duration


def _draw(prob_rows, rng):
    return categorical_rows(np.ascontiguousarray(prob_rows), rng.random(prob_rows.shape[0]))


def _mask_nodes_query(batch, schedule, which=None):
    nodes = batch.nodes.copy()
    sel = batch.node_mask.astype(bool) if which is None else which
    nodes[sel] = schedule.mask_obj_index
    return GraphBatch(nodes, batch.edges, batch.rels, batch.node_mask, batch.pair_mask, batch.boxes)


def _mask_rels_query(batch, schedule, which=None):
    rels = batch.rels.copy()
    sel = (batch.edges == 1) if which is None else which
    rels[sel] = schedule.mask_rel_index
    return GraphBatch(batch.nodes, batch.edges, rels, batch.node_mask, batch.pair_mask, batch.boxes)


def _resample_edges_with_gating(batch, out, rng, forced_rels=None):
    """Draw every pair's edge from the predicted clean Bernoulli, then repair
    gating: surviving pairs keep their relation, fresh pairs draw from the
    predicted relation conditional, dropped pairs go null."""
    b, n = batch.nodes.shape
    flat_probs = out.edge_probs.reshape(b * n * n, 2)
    new_edges = _draw(flat_probs, rng).reshape(b, n, n)
    new_edges *= batch.pair_mask
    rels = batch.rels if forced_rels is None else forced_rels
    new_rels = np.where((new_edges == 1) & (batch.edges == 1), rels, 0)
    fresh = (new_edges == 1) & (batch.edges == 0)
    if fresh.any():
        flat_rel = out.rel_probs.reshape(b * n * n, -1)
        draws = _draw(flat_rel[fresh.reshape(-1)], rng) + 1
        new_rels[fresh] = draws
    return new_edges, new_rels


def gibbs_refine_batch(batch, denoiser, schedule, t, subset, sweeps, rng, clamp=None):
    """Resample one entity block from its clean conditional with the other
    blocks clamped.  V and R queries hide the block behind mask tokens so the
    conditional does not anchor on the old values (requires mask_mix > 0);
    edges carry no mask token, so the E conditional sees the state as-is.
    """
    for _ in range(sweeps):
        if subset == "V":
            out = denoiser.predict_batch(_mask_nodes_query(batch, schedule), t)
            free = batch.node_mask.astype(bool)
            if clamp is not None:
                free &= clamp.free_nodes
            b, n = batch.nodes.shape
            draws = _draw(out.obj_probs.reshape(b * n, -1), rng).reshape(b, n)
            nodes = np.where(free, draws, batch.nodes)
            batch = GraphBatch(nodes, batch.edges, batch.rels, batch.node_mask, batch.pair_mask, batch.boxes)
        elif subset == "E":
            if clamp is not None and not clamp.free_edges.any():
                continue
            out = denoiser.predict_batch(batch, t)
            new_edges, new_rels = _resample_edges_with_gating(batch, out, rng)
            if clamp is not None:
                new_edges = np.where(clamp.free_edges, new_edges, batch.edges)
                new_rels = np.where(clamp.free_edges, new_rels, batch.rels)
            batch = GraphBatch(batch.nodes, new_edges, new_rels, batch.node_mask, batch.pair_mask, batch.boxes)
        elif subset == "R":
            active = batch.edges == 1
            if not active.any():
                continue
            out = denoiser.predict_batch(_mask_rels_query(batch, schedule), t)
            free = active.copy()
            if clamp is not None:
                free &= clamp.free_rels
            b, n = batch.nodes.shape
            flat = out.rel_probs.reshape(b * n * n, -1)
            rels = batch.rels.copy()
            if free.any():
                rels[free] = _draw(flat[free.reshape(-1)], rng) + 1
            batch = GraphBatch(batch.nodes, batch.edges, rels, batch.node_mask, batch.pair_mask, batch.boxes)
        else:
            raise ValueError(f"unknown gibbs subset: {subset}")
    return batch


def _entropy(probs):
    p = np.clip(probs, 1e-300, 1.0)
    return -(p * np.log(p)).sum(axis=-1)


def soft_mask_refine_batch(batch, denoiser, schedule, t, block, rng, clamp=None):
    """Mask the most uncertain entities (predictive entropy above tau, or the
    top-k highest) and resample them conditioned on the masked state."""
    out = denoiser.predict_batch(batch, t)
    b, n = batch.nodes.shape
    h_nodes = _entropy(out.obj_probs)
    h_rels = _entropy(out.rel_probs)
    node_ok = batch.node_mask.astype(bool)
    rel_ok = batch.edges == 1
    if clamp is not None:
        node_ok &= clamp.free_nodes
        rel_ok &= clamp.free_rels

    sel_nodes = np.zeros((b, n), dtype=bool)
    sel_rels = np.zeros((b, n, n), dtype=bool)
    for i in range(b):
        ents = []
        if node_ok[i].any():
            ents.extend((h_nodes[i, k], 0, k) for k in np.nonzero(node_ok[i])[0])
        if rel_ok[i].any():
            ents.extend((h_rels[i, p, q], 1, p * n + q) for p, q in zip(*np.nonzero(rel_ok[i])))
        if not ents:
            continue
        if block.tau is not None:
            chosen = [e for e in ents if e[0] > block.tau]
        else:
            k = block.top_k if block.top_k is not None else ceil(block.top_frac * len(ents))
            chosen = sorted(ents, key=lambda e: (-e[0], e[1], e[2]))[:k]
        for _, kind, pos in chosen:
            if kind == 0:
                sel_nodes[i, pos] = True
            else:
                sel_rels[i, pos // n, pos % n] = True

    if not sel_nodes.any() and not sel_rels.any():
        return batch
    nodes = batch.nodes.copy()
    rels = batch.rels.copy()
    nodes[sel_nodes] = schedule.mask_obj_index
    rels[sel_rels] = schedule.mask_rel_index
    masked = GraphBatch(nodes, batch.edges, rels, batch.node_mask, batch.pair_mask, batch.boxes)
    out2 = denoiser.predict_batch(masked, t)
    if sel_nodes.any():
        flat = out2.obj_probs.reshape(b * n, -1)
        nodes[sel_nodes] = _draw(flat[sel_nodes.reshape(-1)], rng)
    if sel_rels.any():
        flat = out2.rel_probs.reshape(b * n * n, -1)
        rels[sel_rels] = _draw(flat[sel_rels.reshape(-1)], rng) + 1
    return GraphBatch(nodes, batch.edges, rels, batch.node_mask, batch.pair_mask, batch.boxes)


def rarity_scores(schedule):
    """s(r) = -log p_data(r) from the schedule's smoothed relation prior."""
    return -np.log(schedule.prior_r)


def rare_refine_batch(batch, denoiser, schedule, t, block, rng, clamp=None):
    """Tilt relations toward the tail, then revise edges and objects under the
    inverted dependency order R -> E -> V."""
    b, n = batch.nodes.shape
    active = batch.edges == 1
    if clamp is not None:
        active = active & clamp.free_rels
    sel = active
    if block.fraction < 1.0 and active.any():
        keep = rng.random(active.shape) < block.fraction
        sel = active & keep
    scores = rarity_scores(schedule)
    tilt = np.exp(block.beta_rare * scores)

    rels = batch.rels.copy()
    if sel.any():
        out = denoiser.predict_batch(_mask_rels_query(batch, schedule, which=sel), t)
        tilted = out.rel_probs * tilt
        tilted /= tilted.sum(axis=-1, keepdims=True)
        flat = tilted.reshape(b * n * n, -1)
        rels[sel] = _draw(flat[sel.reshape(-1)], rng) + 1
    state_r = GraphBatch(batch.nodes, batch.edges, rels, batch.node_mask, batch.pair_mask, batch.boxes)

    out_e = denoiser.predict_batch(state_r, t)
    new_edges, new_rels = _resample_edges_with_gating(state_r, out_e, rng)
    if clamp is not None:
        new_edges = np.where(clamp.free_edges, new_edges, state_r.edges)
        new_rels = np.where(clamp.free_edges, new_rels, state_r.rels)
    state_e = GraphBatch(batch.nodes, new_edges, new_rels, batch.node_mask, batch.pair_mask, batch.boxes)

    out_v = denoiser.predict_batch(_mask_nodes_query(state_e, schedule), t)
    free = batch.node_mask.astype(bool)
    if clamp is not None:
        free &= clamp.free_nodes
    draws = _draw(out_v.obj_probs.reshape(b * n, -1), rng).reshape(b, n)
    nodes = np.where(free, draws, batch.nodes)
    return GraphBatch(nodes, new_edges, new_rels, batch.node_mask, batch.pair_mask, batch.boxes)


def apply_plan_batch(batch, denoiser, schedule, t, plan, rng, clamp=None, hook=None):
    """Fire whichever kernels' windows contain the current elapsed step, in
    the fixed order Gibbs -> rare -> soft-mask."""
    elapsed = schedule.t_steps - t + 1
    if _in_window(plan.gibbs, elapsed):
        if hook:
            hook("gibbs")
        for subset in plan.gibbs.subset_order:
            batch = gibbs_refine_batch(batch, denoiser, schedule, t, subset,
                                       plan.gibbs.sweeps, rng, clamp=clamp)
    if _in_window(plan.rare, elapsed):
        if hook:
            hook("rare")
        batch = rare_refine_batch(batch, denoiser, schedule, t, plan.rare, rng, clamp=clamp)
    if _in_window(plan.soft_mask, elapsed):
        if hook:
            hook("soft_mask")
        batch = soft_mask_refine_batch(batch, denoiser, schedule, t, plan.soft_mask, rng, clamp=clamp)
    return batch


def apply_plan(x, denoiser, schedule, t, plan, rng, hook=None):
    """Single-state form of the composed refinement schedule."""
    from .graph import pad_batch

    return apply_plan_batch(pad_batch([x]), denoiser, schedule, t, plan, rng, hook=hook).state(0)


def gibbs_refine(x, denoiser, schedule, t, subset, sweeps, rng):
    from .graph import pad_batch

    return gibbs_refine_batch(pad_batch([x]), denoiser, schedule, t, subset, sweeps, rng).state(0)


def soft_mask_refine(x, denoiser, schedule, t, selection, rng):
    """``selection``: a SoftMaskBlock, or a float entropy threshold, or an int
    top-k count."""
    from .graph import pad_batch

    if isinstance(selection, SoftMaskBlock):
        block = selection
    elif isinstance(selection, float):
        block = SoftMaskBlock(tau=selection)
    else:
        block = SoftMaskBlock(top_k=int(selection))
    return soft_mask_refine_batch(pad_batch([x]), denoiser, schedule, t, block, rng).state(0)


def rare_refine(x, denoiser, schedule, t, beta_rare, rng, fraction=1.0):
    from .graph import pad_batch

    block = RareBlock(beta_rare=beta_rare, fraction=fraction)
    return rare_refine_batch(pad_batch([x]), denoiser, schedule, t, block, rng).state(0)
