"""Training loop: uniform-timestep corruption, AdamW with decoupled weight
decay and gradient clipping, an EMA parameter copy used at sampling time, and
a finite-difference gradient-check harness."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import DivergedLoss
from ..forward import corrupt_step_batch, sample_marginal_batch
from ..graph import pad_batch
from .losses import class_weights, training_loss
from .network import MessagePassingDenoiser


class AdamW:
    def __init__(self, params, lr, weight_decay, clip):
        self.params = params
        self.lr = lr
        self.wd = weight_decay
        self.clip = clip
        self.step_count = 0
        self.m = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in params.items()}
        self.b1, self.b2, self.eps = 0.9, 0.999, 1e-8

    def step(self):
        self.step_count += 1
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
        if self.clip and self.clip > 0:
            total = np.sqrt(sum(float((p.grad ** 2).sum()) for p in self.params.values()))
            if total > self.clip:
                scale = self.clip / (total + 1e-12)
                for p in self.params.values():
                    p.grad *= scale
        c1 = 1.0 - self.b1 ** self.step_count
        c2 = 1.0 - self.b2 ** self.step_count
        for k, p in self.params.items():
            g = p.grad
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.value -= self.lr * (update + self.wd * p.value)


@dataclass
class Checkpoint:
    params: dict
    ema_params: dict
    vocab: object
    vocab_hash: str
    schedule_config: dict
    arch: dict
    meta: dict = field(default_factory=dict)

    def build_model(self, use_ema=True):
        model = MessagePassingDenoiser.empty(
            self.vocab, hidden=self.arch["hidden"], rounds=self.arch["rounds"],
            proj_dim=self.arch["proj_dim"], with_boxes=self.arch["with_boxes"],
        )
        model.load_arrays(self.ema_params if use_ema else self.params)
        model.trained_steps = self.meta.get("steps", 0)
        return model


def make_checkpoint(model, ema, schedule, meta=None):
    return Checkpoint(
        params={k: v.copy() for k, v in model.param_arrays().items()},
        ema_params={k: v.copy() for k, v in ema.items()},
        vocab=model.vocab,
        vocab_hash=model.vocab.hash(),
        schedule_config=schedule.config(),
        arch={"hidden": model.hidden, "rounds": model.rounds,
              "proj_dim": model.proj_dim, "with_boxes": model.with_boxes},
        meta=meta or {},
    )


def relation_class_weights(vocab, config):
    if config.class_weight_strategy == "effective_num":
        counts = vocab.relation_counts
        if counts is None:
            # no counts recorded: approximate from frequencies at corpus scale
            counts = np.maximum(vocab.relation_freq * 1000.0, 1.0)
        return class_weights(counts, "effective_num", config.class_weight_param)
    if config.class_weight_strategy == "inverse_freq":
        return class_weights(vocab.relation_freq, "inverse_freq", config.class_weight_param)
    return class_weights(vocab.relation_freq, "simple")


def train(dataset, schedule, config, rng, model=None, log=None):
    """Optimize the reference denoiser on clean graphs.

    Per step: draw a minibatch, sample t ~ Uniform{1..T} per graph, corrupt
    through the closed-form marginal, predict, apply the loss suite, update
    with AdamW, and maintain the EMA copy.  Returns (checkpoint, history).
    """
    vocab = schedule.vocab
    if model is None:
        model = MessagePassingDenoiser(vocab, hidden=config.hidden, rounds=config.rounds,
                                       proj_dim=config.proj_dim, with_boxes=config.with_boxes,
                                       seed=config.seed)
    states = list(dataset)
    if not states:
        raise ValueError("training dataset is empty")
    rel_w = relation_class_weights(vocab, config)
    opt = AdamW(model.params, config.learning_rate, config.weight_decay, config.grad_clip)
    ema = {k: v.copy() for k, v in model.param_arrays().items()}
    decay = config.ema_decay

    history = []
    n = len(states)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            x0 = pad_batch([states[i] for i in idx])
            ts = rng.integers(1, schedule.t_steps + 1, size=len(idx))
            rev_ctx = None
            if config.lambda_rev > 0:
                x_prev = _marginal_at(x0, ts - 1, schedule, rng)
                x_t = corrupt_step_batch_per_t(x_prev, ts, schedule, rng)
                rev_ctx = {"schedule": schedule, "x_t": x_t, "x_prev": x_prev, "ts": ts}
            else:
                x_t = sample_marginal_batch(x0, ts, schedule, rng)
            heads = model.forward(x_t.nodes, x_t.edges, x_t.rels,
                                  x_t.node_mask, x_t.pair_mask, ts)
            total, breakdown = training_loss(heads, x0, rel_w, config, rev_ctx=rev_ctx)
            if not np.isfinite(breakdown.total):
                raise DivergedLoss(f"loss became non-finite at step {opt.step_count}")
            if config.learning_rate > 0:
                total.backward()
                opt.step()
                for k, p in model.params.items():
                    ema[k] = decay * ema[k] + (1.0 - decay) * p.value
            model.trained_steps += 1
            epoch_losses.append(breakdown)
        means = {key: float(np.mean([b.as_dict()[key] for b in epoch_losses]))
                 for key in ("total", "l_v", "l_e", "l_r", "l_box", "l_rev")}
        means["epoch"] = epoch
        history.append(means)
        if log is not None:
            log(means)
    sizes, freqs = np.unique([s.n_nodes for s in states], return_counts=True)
    ckpt = make_checkpoint(model, ema, schedule, meta={
        "steps": opt.step_count, "epochs": config.epochs,
        "node_count_probs": {str(int(s)): float(f / freqs.sum()) for s, f in zip(sizes, freqs)},
    })
    return ckpt, history


def _marginal_at(x0, ts_prev, schedule, rng):
    """Marginal draw at t-1, where t-1 = 0 returns the clean batch."""
    ts_prev = np.asarray(ts_prev)
    if (ts_prev == 0).all():
        return x0
    safe = np.maximum(ts_prev, 1)
    drawn = sample_marginal_batch(x0, safe, schedule, rng)
    keep_clean = ts_prev == 0
    if keep_clean.any():
        nodes = np.where(keep_clean[:, None], x0.nodes, drawn.nodes)
        edges = np.where(keep_clean[:, None, None], x0.edges, drawn.edges)
        rels = np.where(keep_clean[:, None, None], x0.rels, drawn.rels)
        from ..graph import GraphBatch

        return GraphBatch(nodes, edges, rels, x0.node_mask, x0.pair_mask, x0.boxes)
    return drawn


def corrupt_step_batch_per_t(batch, ts, schedule, rng):
    """One corruption step with a per-graph timestep (groups rows by t)."""
    from ..graph import GraphBatch

    ts = np.asarray(ts)
    nodes = batch.nodes.copy()
    edges = batch.edges.copy()
    rels = batch.rels.copy()
    for t in np.unique(ts):
        rows = np.nonzero(ts == t)[0]
        sub = GraphBatch(batch.nodes[rows], batch.edges[rows], batch.rels[rows],
                         batch.node_mask[rows], batch.pair_mask[rows],
                         None if batch.boxes is None else batch.boxes[rows])
        out = corrupt_step_batch(sub, int(t), schedule, rng)
        nodes[rows] = out.nodes
        edges[rows] = out.edges
        rels[rows] = out.rels
    return GraphBatch(nodes, edges, rels, batch.node_mask, batch.pair_mask, batch.boxes)


@dataclass
class GradCheckReport:
    max_rel_error: float
    probes: list

    @property
    def ok(self):
        return np.isfinite(self.max_rel_error)


def gradient_check(model, x_t, x_0, ts, config, rng, n_probes=10, step=1e-6):
    """Central finite differences against the tape gradients on randomly
    probed parameter coordinates; deterministic under a fixed seed."""
    rel_w = relation_class_weights(model.vocab, config)

    def loss_value():
        heads = model.forward(x_t.nodes, x_t.edges, x_t.rels,
                              x_t.node_mask, x_t.pair_mask, ts)
        total, _ = training_loss(heads, x_0, rel_w, config)
        return total

    total = loss_value()
    total.backward()
    grads = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.value))
             for k, p in model.params.items()}

    names = sorted(model.params)
    probes = []
    for _ in range(n_probes):
        name = names[int(rng.integers(len(names)))]
        p = model.params[name]
        flat = int(rng.integers(p.value.size))
        orig = p.value.reshape(-1)[flat]
        h = step * max(1.0, abs(orig))
        p.value.reshape(-1)[flat] = orig + h
        up = float(loss_value().value)
        p.value.reshape(-1)[flat] = orig - h
        down = float(loss_value().value)
        p.value.reshape(-1)[flat] = orig
        fd = (up - down) / (2 * h)
        an = grads[name].reshape(-1)[flat]
        err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
        probes.append({"param": name, "index": flat, "fd": fd, "analytic": an, "rel_error": err})
    return GradCheckReport(max(p["rel_error"] for p in probes), probes)
