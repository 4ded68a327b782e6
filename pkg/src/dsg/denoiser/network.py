"""Reference trainable denoiser: entity embeddings with sinusoidal timestep,
two rounds of node/pair message passing with residual connections, and
structured heads (object, edge, relation conditioned on a projection of the
edge logits, and a sigmoid layout head)."""

from __future__ import annotations

import math

import numpy as np

from ..errors import UntrainedModel
from . import autodiff as ad
from .base import Denoiser, DenoiserOutput


def sinusoidal_features(ts, dim):
    ts = np.asarray(ts, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = ts[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class MessagePassingDenoiser(Denoiser):
    def __init__(self, vocab, hidden=64, rounds=2, proj_dim=8, with_boxes=True, seed=0,
                 _init=True):
        self.vocab = vocab
        self.hidden = hidden
        self.rounds = rounds
        self.proj_dim = proj_dim
        self.with_boxes = with_boxes
        self.fast_inference = True  # float32 forward for sampling; tape stays float64
        self.params = {}
        self.trained_steps = 0
        if _init:
            self._initialize(np.random.default_rng(seed))

    @classmethod
    def empty(cls, vocab, hidden=64, rounds=2, proj_dim=8, with_boxes=True):
        """Uninitialized shell; predict raises UntrainedModel until parameters
        are loaded or training runs."""
        return cls(vocab, hidden, rounds, proj_dim, with_boxes, _init=False)

    def _initialize(self, rng):
        d, v = self.hidden, self.vocab

        def dense(name, fan_in, fan_out):
            self.params[name] = ad.Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), (fan_in, fan_out)))
            self.params[name + "_b"] = ad.Tensor(np.zeros(fan_out))

        self.params["emb_v"] = ad.Tensor(rng.normal(0.0, 0.5, (v.k_obj + 1, d)))
        self.params["emb_e"] = ad.Tensor(rng.normal(0.0, 0.5, (2, d)))
        self.params["emb_r"] = ad.Tensor(rng.normal(0.0, 0.5, (v.k_rel + 2, d)))
        dense("time", d, d)
        dense("pair_init", 2 * d, d)
        for layer in range(self.rounds):
            dense(f"pair_h_{layer}", 3 * d, d)
            dense(f"pair_o_{layer}", d, d)
            dense(f"node_h_{layer}", 2 * d, d)
            dense(f"node_o_{layer}", d, d)
        dense("head_v", d, v.k_obj)
        dense("head_e", d, 2)
        dense("phi", 2, self.proj_dim)
        dense("head_r", d + self.proj_dim, v.k_rel)
        if self.with_boxes:
            dense("head_b", d, 4)

    def n_params(self):
        return sum(p.value.size for p in self.params.values())

    def param_arrays(self):
        return {k: p.value for k, p in self.params.items()}

    def load_arrays(self, arrays):
        if not self.params:
            for k, a in arrays.items():
                self.params[k] = ad.Tensor(np.array(a))
        else:
            for k, p in self.params.items():
                p.value = np.array(arrays[k])
        return self

    def _affine(self, x, name):
        return ad.add(ad.matmul(x, self.params[name]), self.params[name + "_b"])

    def forward(self, nodes, edges, rels, node_mask, pair_mask, ts):
        """Build the tape; returns logit tensors keyed by head."""
        if not self.params:
            raise UntrainedModel("denoiser has no parameters; train or load a checkpoint")
        b, n = nodes.shape
        d = self.hidden
        nm = node_mask.astype(np.float64)[..., None]
        pm = pair_mask.astype(np.float64)[..., None]
        gate = (edges == 1).astype(np.float64)[..., None]

        tfeat = sinusoidal_features(ts, d)
        temb = self._affine(ad.Tensor(tfeat), "time")  # (B, d)
        temb_n = ad.reshape(temb, (b, 1, d))
        temb_p = ad.reshape(temb, (b, 1, 1, d))

        hv = ad.mul(ad.add(ad.reshape(ad.gather_rows(self.params["emb_v"], nodes.reshape(-1)), (b, n, d)), temb_n), nm)
        he = ad.add(ad.reshape(ad.gather_rows(self.params["emb_e"], edges.reshape(-1)), (b, n, n, d)), temb_p)
        hr_raw = ad.add(ad.reshape(ad.gather_rows(self.params["emb_r"], rels.reshape(-1)), (b, n, n, d)), temb_p)
        hr = ad.mul(hr_raw, gate)  # zero relation embedding on inactive pairs
        hp = ad.mul(ad.reshape(
            self._affine(ad.reshape(ad.concat([he, hr], axis=-1), (b * n * n, 2 * d)), "pair_init"),
            (b, n, n, d)), pm)

        ones_row = np.ones((1, n, 1, 1))
        ones_col = np.ones((1, 1, n, 1))
        pair_counts = pair_mask.sum(axis=2) + pair_mask.sum(axis=1)
        inv_counts = (1.0 / np.maximum(pair_counts, 1.0))[..., None]

        for layer in range(self.rounds):
            hi = ad.mul(ad.reshape(hv, (b, n, 1, d)), ones_col)
            hj = ad.mul(ad.reshape(hv, (b, 1, n, d)), ones_row)
            inp = ad.reshape(ad.concat([hp, hi, hj], axis=-1), (b * n * n, 3 * d))
            delta = self._affine(ad.relu(self._affine(inp, f"pair_h_{layer}")), f"pair_o_{layer}")
            hp = ad.add(hp, ad.mul(ad.reshape(delta, (b, n, n, d)), pm))

            inc = ad.mul(ad.add(ad.tsum(hp, axis=2), ad.tsum(hp, axis=1)), inv_counts)
            ninp = ad.reshape(ad.concat([hv, inc], axis=-1), (b * n, 2 * d))
            ndelta = self._affine(ad.relu(self._affine(ninp, f"node_h_{layer}")), f"node_o_{layer}")
            hv = ad.add(hv, ad.mul(ad.reshape(ndelta, (b, n, d)), nm))

        obj_logits = ad.reshape(self._affine(ad.reshape(hv, (b * n, d)), "head_v"), (b, n, self.vocab.k_obj))
        edge_logits = ad.reshape(self._affine(ad.reshape(hp, (b * n * n, d)), "head_e"), (b, n, n, 2))
        phi = self._affine(ad.reshape(edge_logits, (b * n * n, 2)), "phi")
        rel_in = ad.concat([ad.reshape(hp, (b * n * n, d)), phi], axis=-1)
        rel_logits = ad.reshape(self._affine(rel_in, "head_r"), (b, n, n, self.vocab.k_rel))
        out = {"obj": obj_logits, "edge": edge_logits, "rel": rel_logits}
        if self.with_boxes:
            out["box"] = ad.reshape(ad.sigmoid(self._affine(ad.reshape(hv, (b * n, d)), "head_b")), (b, n, 4))
        return out

    def _forward_arrays(self, nodes, edges, rels, node_mask, pair_mask, ts):
        """Tape-free twin of ``forward`` for the sampling hot path.

        Computation-equivalent restructure of the tape graph: table matmuls
        are precomputed per embedding row and broadcast node terms multiply
        (B*N) rather than (B*N*N) rows, so results differ from the tape only
        by float round-off.
        """
        if not self.params:
            raise UntrainedModel("denoiser has no parameters; train or load a checkpoint")
        dt = np.float32 if self.fast_inference else np.float64
        p = {k: v.value.astype(dt) for k, v in self.params.items()}
        b, n = nodes.shape
        d = self.hidden
        nm = node_mask.astype(dt)[..., None]
        pm = pair_mask.astype(dt)[..., None]
        gate = (edges == 1).astype(dt)[..., None]

        temb = sinusoidal_features(ts, d).astype(dt) @ p["time"] + p["time_b"]
        hv = (p["emb_v"][nodes] + temb[:, None, :]) * nm

        # pair_init on concat([he, hr]) via split weights and embedding LUTs
        wp_e, wp_r = p["pair_init"][:d], p["pair_init"][d:]
        lut_e = p["emb_e"] @ wp_e
        lut_r = p["emb_r"] @ wp_r
        te = (temb @ wp_e)[:, None, None, :]
        tr = (temb @ wp_r)[:, None, None, :]
        hp = (lut_e[edges] + te + gate * (lut_r[rels] + tr) + p["pair_init_b"]) * pm

        pair_counts = pair_mask.sum(axis=2) + pair_mask.sum(axis=1)
        inv_counts = (1.0 / np.maximum(pair_counts, 1.0))[..., None]
        for layer in range(self.rounds):
            w1 = p[f"pair_h_{layer}"]
            hv_flat = hv.reshape(b * n, d)
            part_p = (hp.reshape(b * n * n, d) @ w1[:d]).reshape(b, n, n, -1)
            part_i = (hv_flat @ w1[d : 2 * d]).reshape(b, n, 1, -1)
            part_j = (hv_flat @ w1[2 * d :]).reshape(b, 1, n, -1)
            hidden = np.maximum(part_p + part_i + part_j + p[f"pair_h_{layer}_b"], 0.0)
            delta = hidden.reshape(b * n * n, -1) @ p[f"pair_o_{layer}"] + p[f"pair_o_{layer}_b"]
            hp = hp + delta.reshape(b, n, n, d) * pm

            inc = (hp.sum(axis=2) + hp.sum(axis=1)) * inv_counts
            w3 = p[f"node_h_{layer}"]
            nh = np.maximum(hv.reshape(b * n, d) @ w3[:d] + inc.reshape(b * n, d) @ w3[d:]
                            + p[f"node_h_{layer}_b"], 0.0)
            hv = hv + (nh @ p[f"node_o_{layer}"] + p[f"node_o_{layer}_b"]).reshape(b, n, d) * nm

        obj = (hv.reshape(b * n, d) @ p["head_v"] + p["head_v_b"]).reshape(b, n, -1)
        edge = (hp.reshape(b * n * n, d) @ p["head_e"] + p["head_e_b"]).reshape(b, n, n, 2)
        phi = edge.reshape(b * n * n, 2) @ p["phi"] + p["phi_b"]
        wr = p["head_r"]
        rel = (hp.reshape(b * n * n, d) @ wr[:d] + phi @ wr[d:]
               + p["head_r_b"]).reshape(b, n, n, -1)
        box = None
        if self.with_boxes:
            z = hv.reshape(b * n, d) @ p["head_b"] + p["head_b_b"]
            box = (1.0 / (1.0 + np.exp(-z))).reshape(b, n, 4).astype(np.float64)
        return (obj.astype(np.float64), edge.astype(np.float64),
                rel.astype(np.float64), box)

    def predict_batch(self, batch, t):
        ts = np.full(batch.size, t) if np.isscalar(t) else t
        obj, edge, rel, box = self._forward_arrays(batch.nodes, batch.edges, batch.rels,
                                                   batch.node_mask, batch.pair_mask, ts)

        def smax(x):
            e = np.exp(x - x.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)

        return DenoiserOutput(smax(obj), smax(edge), smax(rel), edge, box)
