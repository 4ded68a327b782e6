"""Loss suite: masked cross-entropies for the three channels, class-weighted
relation loss on active clean edges only, the L1 + GIoU box loss, and the
optional intermediate reverse-step supervision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DegenerateBox
from . import autodiff as ad


@dataclass
class TrainConfig:
    lambda_v: float = 1.0
    lambda_r: float = 0.5
    lambda_e: float = 0.5
    lambda_box: float = 1.0
    lambda_giou: float = 1.0
    lambda_rev: float = 0.0
    class_weight_strategy: str = "effective_num"
    class_weight_param: float = 0.999  # beta for effective_num, alpha for inverse_freq
    learning_rate: float = 1e-4
    weight_decay: float = 1e-2
    ema_decay: float = 0.999
    grad_clip: float = 1.0
    epochs: int = 4
    batch_size: int = 32
    hidden: int = 64
    rounds: int = 2
    proj_dim: int = 8
    with_boxes: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("lambda_v", "lambda_r", "lambda_e", "lambda_box", "lambda_giou", "lambda_rev"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.class_weight_strategy == "effective_num" and not 0.0 < self.class_weight_param < 1.0:
            raise ValueError("effective_num beta must lie in (0, 1)")


def class_weights(values, strategy, param=None):
    """Per-relation weights, renormalized to mean 1.

    simple         -> all ones
    inverse_freq   -> 1 / (p + 1e-6)^alpha on probabilities (alpha = param)
    effective_num  -> (1 - beta) / (1 - beta^f) on raw class counts (beta = param)
    """
    values = np.asarray(values, dtype=np.float64)
    if strategy == "simple":
        w = np.ones_like(values)
    elif strategy == "inverse_freq":
        alpha = 1.0 if param is None else param
        w = 1.0 / np.power(values + 1e-6, alpha)
    elif strategy == "effective_num":
        beta = 0.999 if param is None else param
        with np.errstate(divide="ignore"):
            w = np.where(values > 0, (1.0 - beta) / (1.0 - np.power(beta, values)), 0.0)
        if (values == 0).any():
            # unseen classes get the heaviest observed weight
            w[values == 0] = w[values > 0].max() if (values > 0).any() else 1.0
    else:
        raise ValueError(f"unknown class-weight strategy: {strategy}")
    return w / w.mean()


def giou(a, b):
    """Generalized IoU of cxcywh boxes, in (-1, 1]; elementwise over rows."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    if (a[:, 2:] <= 0).any() or (b[:, 2:] <= 0).any():
        raise DegenerateBox("boxes must have positive width and height")

    def corners(x):
        return np.stack([x[:, 0] - x[:, 2] / 2, x[:, 1] - x[:, 3] / 2,
                         x[:, 0] + x[:, 2] / 2, x[:, 1] + x[:, 3] / 2], axis=1)

    ca, cb = corners(a), corners(b)
    lo = np.maximum(ca[:, :2], cb[:, :2])
    hi = np.minimum(ca[:, 2:], cb[:, 2:])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[:, 0] * wh[:, 1]
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    hull_lo = np.minimum(ca[:, :2], cb[:, :2])
    hull_hi = np.maximum(ca[:, 2:], cb[:, 2:])
    hull = (hull_hi[:, 0] - hull_lo[:, 0]) * (hull_hi[:, 1] - hull_lo[:, 1])
    out = inter / union - (hull - union) / hull
    return out if out.shape[0] > 1 else float(out[0])


def _col(t, k):
    sel = np.zeros((4, 1))
    sel[k, 0] = 1.0
    return ad.matmul(t, ad.Tensor(sel))


def giou_tape(pred, target):
    """GIoU on the tape: pred is an (M, 4) tensor, target a constant array."""
    tgt = ad.Tensor(np.asarray(target, dtype=np.float64).reshape(-1, 4))
    ax, ay, aw, ah = (_col(pred, k) for k in range(4))
    bx, by, bw, bh = (_col(tgt, k) for k in range(4))
    a_x0, a_x1 = ad.sub(ax, ad.mul(aw, 0.5)), ad.add(ax, ad.mul(aw, 0.5))
    a_y0, a_y1 = ad.sub(ay, ad.mul(ah, 0.5)), ad.add(ay, ad.mul(ah, 0.5))
    b_x0, b_x1 = ad.sub(bx, ad.mul(bw, 0.5)), ad.add(bx, ad.mul(bw, 0.5))
    b_y0, b_y1 = ad.sub(by, ad.mul(bh, 0.5)), ad.add(by, ad.mul(bh, 0.5))

    iw = ad.relu(ad.sub(ad.minimum(a_x1, b_x1), ad.maximum(a_x0, b_x0)))
    ih = ad.relu(ad.sub(ad.minimum(a_y1, b_y1), ad.maximum(a_y0, b_y0)))
    inter = ad.mul(iw, ih)
    union = ad.sub(ad.add(ad.mul(aw, ah), ad.mul(bw, bh)), inter)
    hull = ad.mul(ad.sub(ad.maximum(a_x1, b_x1), ad.minimum(a_x0, b_x0)),
                  ad.sub(ad.maximum(a_y1, b_y1), ad.minimum(a_y0, b_y0)))
    return ad.sub(ad.div(inter, union), ad.div(ad.sub(hull, union), hull))


@dataclass
class LossBreakdown:
    total: float
    l_v: float
    l_e: float
    l_r: float
    l_box: float = 0.0
    l_rev: float = 0.0
    extras: dict = field(default_factory=dict)

    def as_dict(self):
        return {"total": self.total, "l_v": self.l_v, "l_e": self.l_e,
                "l_r": self.l_r, "l_box": self.l_box, "l_rev": self.l_rev}


def _masked_mean_np(neg_log, mask):
    denom = mask.sum()
    return float((neg_log * mask).sum() / denom) if denom > 0 else 0.0


def loss(output, x_0, node_mask, pair_mask, rel_weights, config):
    """Loss breakdown from a probability-space prediction (the public
    test-facing form; training differentiates the logit-space twin).

    L = L_V + lambda_E L_E + lambda_R L_R (+ lambda_box L_box); the relation
    term averages only over pairs with an active clean edge and is zero when
    no such pair exists.
    """
    tiny = 1e-12
    nodes = x_0.node_labels if hasattr(x_0, "node_labels") else x_0.nodes
    edges = x_0.edge_exist if hasattr(x_0, "edge_exist") else x_0.edges
    rels = x_0.relation_labels if hasattr(x_0, "relation_labels") else x_0.rels
    node_mask = np.asarray(node_mask, dtype=np.float64)
    pair_mask = np.asarray(pair_mask, dtype=np.float64)
    obj_p = np.take_along_axis(output.obj_probs, nodes[..., None], axis=-1)[..., 0]
    l_v = _masked_mean_np(-np.log(obj_p + tiny), node_mask)
    edge_p = np.take_along_axis(output.edge_probs, edges[..., None], axis=-1)[..., 0]
    l_e = _masked_mean_np(-np.log(edge_p + tiny), pair_mask)
    active = pair_mask * (edges == 1)
    if active.sum() > 0:
        rel_idx = np.clip(rels - 1, 0, None)
        rel_p = np.take_along_axis(output.rel_probs, rel_idx[..., None], axis=-1)[..., 0]
        w = rel_weights[rel_idx]
        l_r = float((-np.log(rel_p + tiny) * w * active).sum() / active.sum())
    else:
        l_r = 0.0
    l_box = 0.0
    boxes = getattr(x_0, "boxes", None)
    if config.lambda_box > 0 and output.box_preds is not None and boxes is not None:
        pred = output.box_preds.reshape(-1, 4)
        tgt = np.asarray(boxes).reshape(-1, 4)
        keep = node_mask.reshape(-1).astype(bool)
        if keep.any():
            l1 = np.abs(pred[keep] - tgt[keep]).sum(axis=1)
            g = np.atleast_1d(giou(pred[keep], tgt[keep]))
            l_box = float((l1 + config.lambda_giou * (1.0 - g)).mean())
    total = l_v + config.lambda_e * l_e + config.lambda_r * l_r + config.lambda_box * l_box
    return LossBreakdown(total, l_v, l_e, l_r, l_box)


def _masked_ce(logits, targets, mask, row_weights=None):
    flat_mask = mask.reshape(-1).astype(np.float64)
    ce = ad.softmax_cross_entropy(ad.reshape(logits, (flat_mask.shape[0], -1)),
                                  targets.reshape(-1))
    w = flat_mask if row_weights is None else flat_mask * row_weights
    denom = flat_mask.sum()
    if denom == 0:
        return ad.Tensor(0.0)
    return ad.mul(ad.tsum(ad.mul(ce, ad.Tensor(w))), 1.0 / denom)


def training_loss(heads, batch_x0, rel_weights, config, rev_ctx=None):
    """Differentiable total loss from head logits; returns (tensor, breakdown)."""
    nodes, edges, rels = batch_x0.nodes, batch_x0.edges, batch_x0.rels

    l_v = _masked_ce(heads["obj"], nodes, batch_x0.node_mask)
    l_e = _masked_ce(heads["edge"], edges, batch_x0.pair_mask)
    active = (batch_x0.pair_mask * (edges == 1)).astype(np.float64)
    if active.sum() > 0:
        rel_idx = np.clip(rels - 1, 0, None)
        ce = ad.softmax_cross_entropy(ad.reshape(heads["rel"], (rel_idx.size, -1)),
                                      rel_idx.reshape(-1))
        w = active.reshape(-1) * rel_weights[rel_idx].reshape(-1)
        l_r = ad.mul(ad.tsum(ad.mul(ce, ad.Tensor(w))), 1.0 / active.sum())
    else:
        l_r = ad.Tensor(0.0)

    total = ad.add(l_v, ad.add(ad.mul(l_e, config.lambda_e), ad.mul(l_r, config.lambda_r)))

    l_box = ad.Tensor(0.0)
    if config.lambda_box > 0 and "box" in heads and batch_x0.boxes is not None:
        keep = batch_x0.node_mask.reshape(-1).astype(np.float64)
        if keep.sum() > 0:
            pred = ad.reshape(heads["box"], (-1, 4))
            tgt = batch_x0.boxes.reshape(-1, 4)
            l1 = ad.tsum(ad.tabs(ad.sub(pred, ad.Tensor(tgt))), axis=1)
            gv = ad.reshape(giou_tape(pred, tgt), (-1,))
            per_node = ad.add(l1, ad.mul(ad.sub(ad.Tensor(np.ones(gv.shape[0])), gv),
                                         config.lambda_giou))
            l_box = ad.mul(ad.tsum(ad.mul(per_node, ad.Tensor(keep))), 1.0 / keep.sum())
            total = ad.add(total, ad.mul(l_box, config.lambda_box))

    l_rev = ad.Tensor(0.0)
    if config.lambda_rev > 0 and rev_ctx is not None:
        l_rev = reverse_supervision(heads, rev_ctx)
        total = ad.add(total, ad.mul(l_rev, config.lambda_rev))

    breakdown = LossBreakdown(float(total.value), float(l_v.value), float(l_e.value),
                              float(l_r.value), float(l_box.value), float(l_rev.value))
    return total, breakdown


def _posterior_tape(pred, z_t, q_t, qbar_prev, qbar_t):
    """Differentiable reverse posterior rows; constants are gathered by the
    observed value per row."""
    denom = qbar_t[:, z_t].T
    inv = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0)
    ratio = ad.mul(pred, ad.Tensor(inv))
    post = ad.mul(ad.matmul(ratio, ad.Tensor(qbar_prev)), ad.Tensor(q_t[:, z_t].T))
    norm = ad.tsum(post, axis=1, keepdims=True)
    return ad.div(post, ad.add(norm, 1e-30))


def _nll_at(dist_rows, targets):
    onehot = np.eye(dist_rows.value.shape[1])[targets]
    picked = ad.tsum(ad.mul(dist_rows, ad.Tensor(onehot)), axis=1)
    return ad.mul(ad.tlog(ad.add(picked, 1e-30)), -1.0)


def reverse_supervision(heads, ctx):
    """Intermediate reverse-step supervision: CE of the model-induced reverse
    posterior at a target x_{t-1} drawn from the known forward process.
    Relation terms follow the edge-gated cases; e_{t-1}=0 pairs carry no term.
    """
    schedule, xt, xprev, ts = ctx["schedule"], ctx["x_t"], ctx["x_prev"], ctx["ts"]
    b, n = xt.nodes.shape
    pred_v = ad.concat([ad.softmax(ad.reshape(heads["obj"], (b * n, -1))),
                        ad.Tensor(np.zeros((b * n, 1)))], axis=1)
    pred_e = ad.softmax(ad.reshape(heads["edge"], (b * n * n, 2)))
    zeros_col = ad.Tensor(np.zeros((b * n * n, 1)))
    pred_r = ad.concat([zeros_col, ad.softmax(ad.reshape(heads["rel"], (b * n * n, -1))),
                        zeros_col], axis=1)

    node_graph = np.repeat(np.arange(b), n)
    pair_graph = np.repeat(np.arange(b), n * n)
    nodes_t, nodes_p = xt.nodes.reshape(-1), xprev.nodes.reshape(-1)
    e_t, e_p = xt.edges.reshape(-1), xprev.edges.reshape(-1)
    r_t, r_p = xt.rels.reshape(-1), xprev.rels.reshape(-1)
    node_ok = xt.node_mask.reshape(-1) == 1
    pair_ok = xt.pair_mask.reshape(-1) == 1

    total = ad.Tensor(0.0)
    count = 0
    for t in np.unique(ts):
        in_t_nodes = (ts == t)[node_graph]
        in_t_pairs = (ts == t)[pair_graph]
        rows = np.nonzero(in_t_nodes & node_ok)[0]
        if rows.size:
            post = _posterior_tape(ad.gather_rows(pred_v, rows), nodes_t[rows],
                                   schedule.q_v[t], schedule.qbar_v[t - 1], schedule.qbar_v[t])
            total = ad.add(total, ad.tsum(_nll_at(post, nodes_p[rows])))
            count += rows.size
        rows = np.nonzero(in_t_pairs & pair_ok)[0]
        if rows.size:
            post = _posterior_tape(ad.gather_rows(pred_e, rows), e_t[rows],
                                   schedule.q_e[t], schedule.qbar_e[t - 1], schedule.qbar_e[t])
            total = ad.add(total, ad.tsum(_nll_at(post, e_p[rows])))
            count += rows.size
        rows = np.nonzero(in_t_pairs & pair_ok & (e_p == 1) & (e_t == 1))[0]
        if rows.size:
            post = _posterior_tape(ad.gather_rows(pred_r, rows), r_t[rows],
                                   schedule.q_r[t], schedule.qbar_r[t - 1], schedule.qbar_r[t])
            total = ad.add(total, ad.tsum(_nll_at(post, r_p[rows])))
            count += rows.size
        rows = np.nonzero(in_t_pairs & pair_ok & (e_p == 1) & (e_t == 0))[0]
        if rows.size:
            pushed = ad.matmul(ad.gather_rows(pred_r, rows), ad.Tensor(schedule.qbar_r[t - 1]))
            total = ad.add(total, ad.tsum(_nll_at(pushed, r_p[rows])))
            count += rows.size
    return ad.mul(total, 1.0 / count) if count else ad.Tensor(0.0)
