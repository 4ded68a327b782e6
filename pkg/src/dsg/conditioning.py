"""Text-conditioned generation: reward-tilted Sequential Monte Carlo over the
reverse chain with a pluggable reward.

The default reward is a deterministic lexical overlap between the serialized
graph and the prompt; an embedding-service reward is available behind a small
HTTP client and can fall back to the lexical reward on service failure.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
import requests

from .errors import AllZeroWeights, MalformedResponse, ServiceUnavailable
from .graph import GraphBatch, serialize_graph
from .refine import apply_plan_batch
from .sampler import decode_argmax, resolve_masks, reverse_step_batch, sample_batch
from .schedule import _stationary_unchecked

STOP_WORDS = frozenset({
    "a", "an", "the", "and", "or", "of", "to", "in", "on", "at", "by",
    "for", "from", "with", "is", "are", "was", "were", "it", "this",
    "that", "there",
})

_PUNCT = ".,;:!?\"'()[]"


def _tokens(text):
    out = set()
    for raw in text.lower().split():
        tok = raw.strip(_PUNCT)
        if tok and tok not in STOP_WORDS:
            out.add(tok)
    return out


def graph_tokens(graph, vocab):
    """Token set of the serialized graph; masked entities contribute nothing."""
    toks = set()
    for v in graph.node_labels:
        if v != vocab.mask_obj_index:
            toks |= _tokens(vocab.object_name(v))
    n = graph.n_nodes
    for i in range(n):
        for j in range(n):
            if i != j and graph.edge_exist[i, j] == 1:
                r = graph.relation_labels[i, j]
                if r != vocab.mask_rel_index and r != 0:
                    toks |= _tokens(vocab.relation_name(r))
    return toks


def reward_lexical(graph, prompt, vocab):
    """Jaccard similarity of stop-word-filtered token sets, in [0, 1]."""
    a = graph_tokens(graph, vocab)
    b = _tokens(prompt)
    union = a | b
    if not union:
        return 1.0
    return len(a & b) / len(union)


class EmbeddingClient:
    """Thin client for the embedding-service wire protocol:
    POST {url}/embed with {"texts": [a, b]} -> {"vectors": [[...], [...]]}."""

    def __init__(self, url=None, timeout=5.0, session=None):
        self.url = url or os.environ.get("DSG_EMBED_URL")
        if not self.url:
            raise ServiceUnavailable("no embedding service URL configured (DSG_EMBED_URL)")
        self.timeout = timeout
        self.session = session or requests.Session()

    def embed_pair(self, text_a, text_b):
        try:
            resp = self.session.post(
                self.url.rstrip("/") + "/embed",
                json={"texts": [text_a, text_b]},
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise ServiceUnavailable(str(exc)) from exc
        if resp.status_code != 200:
            raise ServiceUnavailable(f"embedding service returned {resp.status_code}")
        try:
            payload = resp.json()
            vecs = payload["vectors"]
            va = np.asarray(vecs[0], dtype=np.float64)
            vb = np.asarray(vecs[1], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise MalformedResponse(str(exc)) from exc
        if va.ndim != 1 or va.shape != vb.shape or va.size == 0:
            raise MalformedResponse("vectors must be two equal-length rows")
        return va, vb


def reward_embedding(graph, prompt, client, vocab=None):
    """Cosine similarity of service embeddings, mapped to [0, 1]."""
    vocab = vocab if vocab is not None else getattr(client, "vocab", None)
    text = serialize_graph(graph, vocab)
    va, vb = client.embed_pair(text, prompt)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise MalformedResponse("zero-norm embedding vector")
    cos = float(va @ vb / (na * nb))
    return (1.0 + cos) / 2.0


def incremental_weight(r_new, r_old, beta):
    """exp(beta * (r_new - r_old)): the per-step tilt of the particle weight."""
    return math.exp(beta * (r_new - r_old))


@dataclass
class ParticleSet:
    """Weighted population of graph states plus cached last rewards."""

    batch: GraphBatch
    weights: np.ndarray
    cached_rewards: np.ndarray
    beta: float

    @property
    def size(self):
        return self.weights.shape[0]

    @property
    def ess(self):
        s = self.weights.sum()
        q = (self.weights ** 2).sum()
        return (s * s) / q if q > 0 else 0.0


def systematic_indices(weights, rng, n_out=None):
    """Stratified index draws: the copy count of index d is within 1 of
    n_out * w_d deterministically."""
    total = weights.sum()
    if total <= 0.0:
        raise AllZeroWeights("cannot resample: all particle weights are zero")
    d = weights.shape[0]
    n_out = d if n_out is None else n_out
    positions = (rng.random() + np.arange(n_out)) / n_out
    cum = np.cumsum(weights / total)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right").clip(0, d - 1)


def resample(particles, rng):
    """Systematic resampling: expected copy count of particle d is exactly
    D * w_d; output weights reset to uniform."""
    idx = systematic_indices(particles.weights, rng)
    b = particles.batch
    new_batch = GraphBatch(
        b.nodes[idx], b.edges[idx], b.rels[idx], b.node_mask[idx], b.pair_mask[idx],
        None if b.boxes is None else b.boxes[idx],
    )
    d = particles.size
    return ParticleSet(new_batch, np.full(d, 1.0 / d), particles.cached_rewards[idx],
                       particles.beta)


class _CachedReward:
    """Memoize a reward callable on the encoded graph state."""

    def __init__(self, fn, prompt, vocab):
        self.fn = fn
        self.prompt = prompt
        self.vocab = vocab
        self.cache = {}

    def batch_rewards(self, batch):
        out = np.empty(batch.size)
        for i in range(batch.size):
            key = (batch.nodes[i].tobytes(), batch.edges[i].tobytes(), batch.rels[i].tobytes())
            r = self.cache.get(key)
            if r is None:
                r = float(self.fn(batch.state(i), self.prompt, self.vocab))
                self.cache[key] = r
            out[i] = r
        return out


def smc_sample(denoiser, schedule, prompt, n_particles, beta, reward, n_nodes, rng,
               plan=None, resample_mode="adaptive", return_mode="best",
               ghat_sample=False, single_pass=False, fallback=None, trace=None):
    """Reward-tilted SMC targeting p(G) * exp(beta * R(G, prompt)).

    Per timestep: propagate every particle through the reverse transition
    (plus refinements), score the argmax clean prediction, reweight by the
    incremental tilt, and resample -- every step, or adaptively when the
    effective sample size drops below half the population.  Returns the
    best-reward particle at t=0, or a uniformly drawn one under
    ``return_mode="uniform"``.
    """
    if n_particles < 1:
        raise ValueError("need at least one particle")
    if beta < 0:
        raise ValueError("beta must be nonnegative")
    vocab = schedule.vocab
    scorer = _CachedReward(reward, prompt, vocab)
    fallback_scorer = _CachedReward(fallback, prompt, vocab) if fallback is not None else None
    degraded = [False]

    def score(batch):
        if degraded[0]:
            return fallback_scorer.batch_rewards(batch)
        try:
            return scorer.batch_rewards(batch)
        except ServiceUnavailable:
            if fallback_scorer is None:
                raise
            degraded[0] = True
            return fallback_scorer.batch_rewards(batch)

    batch = _stationary_unchecked(schedule, n_nodes).sample_batch(n_particles, rng)
    ghat = decode_argmax(denoiser.predict_batch(batch, schedule.t_steps), schedule)
    rewards = score(ghat)
    particles = ParticleSet(batch, np.full(n_particles, 1.0 / n_particles), rewards, beta)

    for t in range(schedule.t_steps, 0, -1):
        new_batch = reverse_step_batch(particles.batch, denoiser, schedule, t, rng,
                                       single_pass=single_pass)
        if plan is not None:
            new_batch = apply_plan_batch(new_batch, denoiser, schedule, t, plan, rng)
        if t > 1:
            out = denoiser.predict_batch(new_batch, t - 1)
            ghat = decode_argmax(out, schedule)
            if ghat_sample:
                ghat = _sample_clean(out, new_batch, schedule, rng)
        else:
            ghat = resolve_masks(new_batch, denoiser, schedule)
        r_new = score(ghat)
        incr = np.exp(beta * (r_new - particles.cached_rewards))
        weights = particles.weights * incr
        total = weights.sum()
        if total <= 0.0:
            raise AllZeroWeights("all incremental weights vanished")
        weights = weights / total
        particles = ParticleSet(new_batch, weights, r_new, beta)
        if trace is not None:
            trace.append({"t": t, "max_reward": float(r_new.max()),
                          "mean_reward": float(r_new.mean()), "ess": float(particles.ess)})
        if resample_mode == "always" or (resample_mode == "adaptive"
                                         and particles.ess < n_particles / 2.0):
            particles = resample(particles, rng)

    final = resolve_masks(particles.batch, denoiser, schedule)
    final_rewards = score(final)
    if return_mode == "uniform":
        # unbiased draw from the weighted terminal ensemble (the residual
        # weights are uniform only under every-step resampling)
        cum = np.cumsum(particles.weights / particles.weights.sum())
        cum[-1] = 1.0
        pick = int(np.searchsorted(cum, rng.random(), side="right").clip(0, n_particles - 1))
    else:
        pick = int(np.argmax(final_rewards))
    return final.state(pick)


def _sample_clean(out, batch, schedule, rng):
    """Sample (rather than argmax-decode) a clean graph from the prediction."""
    from ._kernels import categorical_rows

    b, n = batch.nodes.shape
    nodes = categorical_rows(out.obj_probs.reshape(b * n, -1),
                             rng.random(b * n)).reshape(b, n)
    edges = categorical_rows(out.edge_probs.reshape(b * n * n, 2),
                             rng.random(b * n * n)).reshape(b, n, n)
    diag = np.arange(n)
    edges[:, diag, diag] = 0
    rels = (categorical_rows(out.rel_probs.reshape(b * n * n, -1),
                             rng.random(b * n * n)).reshape(b, n, n) + 1) * edges
    return GraphBatch.full(nodes, edges, rels)


def smc_equivalent_unconditional(denoiser, schedule, n_nodes, rng, plan=None, single_pass=False):
    """The unconditional sampler on the same code path SMC takes with beta=0
    and one particle (used by the seed-matched equivalence checks)."""
    return sample_batch(denoiser, schedule, n_nodes, 1, rng, plan=plan,
                        single_pass=single_pass, attach_boxes=False).state(0)
