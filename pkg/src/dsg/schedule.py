"""Per-timestep corruption rates, priors, transition matrices, and cumulative
products for the three channels (objects V, edges E, relations R).

Each channel's one-step kernel is the hybrid random+mask form

    row a:  (1 - beta) * onehot(a) + beta * (rho * onehot(mask) + (1 - rho) * prior)

where the prior is extended with zero mass on the mask slot.  Edges use the
random component only (no mask token), and the relation channel's null slot
(index 0) is pinned to an absorbing identity row: the null relation is not
part of the corruption alphabet, so corruption can never move a semantic
relation to "no edge" directly -- the only path to r = 0 is through e = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVocab, MaskMixNonzero, OutOfRange
from .graph import GraphBatch, SceneGraphState

RETENTION_BOUND = 1e-4  # required: prod_t (1 - beta_t) <= this, per channel
BETA_CEIL = 1.0 - 1e-9  # keep retention strictly positive so every mask-free
                        # state stays forward-reachable (needed for posterior
                        # support, including the mask-only setting)


def cosine_betas(t_steps):
    """Betas derived from a cosine law on cumulative retention."""
    s = 0.008
    grid = np.arange(t_steps + 1, dtype=np.float64) / t_steps
    alpha_bar = np.cos((grid + s) / (1 + s) * math.pi / 2.0) ** 2
    alpha_bar /= alpha_bar[0]
    betas = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    return np.clip(betas, RETENTION_BOUND, BETA_CEIL)


def linear_betas(t_steps):
    return np.clip(np.linspace(0.01, 0.35, t_steps), RETENTION_BOUND, BETA_CEIL)


def _force_retention_bound(betas):
    """Bump the final beta so the retention product meets the bound."""
    betas = betas.copy()
    prod = np.prod(1.0 - betas)
    if prod > RETENTION_BOUND:
        head = np.prod(1.0 - betas[:-1])
        betas[-1] = 1.0 - RETENTION_BOUND / head if head > 0 else BETA_CEIL
    return np.clip(betas, RETENTION_BOUND, BETA_CEIL)


def transition_matrix(beta, prior, mask_mix, mask_index):
    """One-step hybrid kernel over ``alphabet + {mask}``.

    ``prior`` has one entry per alphabet symbol and sums to 1; the mask slot is
    appended at ``mask_index == len(prior)``.
    """
    if not (0.0 < beta <= 1.0):
        raise ValueError("beta must lie in (0, 1]")
    prior = np.asarray(prior, dtype=np.float64)
    k = prior.shape[0]
    if mask_index != k:
        raise ValueError("mask_index must equal the alphabet size")
    size = k + 1
    prior_ext = np.zeros(size)
    prior_ext[:k] = prior
    mix = np.zeros(size)
    mix[mask_index] = mask_mix
    mix += (1.0 - mask_mix) * prior_ext
    return (1.0 - beta) * np.eye(size) + beta * np.tile(mix, (size, 1))


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Immutable cache of per-step and cumulative kernels, index 1..T.

    All matrix arrays have shape (T+1, K, K); slot 0 holds the identity so
    ``qbar[t-1]`` is valid at t = 1.
    """

    t_steps: int
    beta_v: np.ndarray
    beta_e: np.ndarray
    beta_r: np.ndarray
    prior_v: np.ndarray
    rho_e: float
    prior_r: np.ndarray
    mask_mix: float
    q_v: np.ndarray
    q_e: np.ndarray
    q_r: np.ndarray
    qbar_v: np.ndarray
    qbar_e: np.ndarray
    qbar_r: np.ndarray
    vocab: object = None

    @property
    def k_obj(self):
        return self.prior_v.shape[0]

    @property
    def k_rel(self):
        return self.prior_r.shape[0]

    @property
    def mask_obj_index(self):
        return self.k_obj

    @property
    def mask_rel_index(self):
        return self.k_rel + 1

    def config(self):
        return {
            "T": self.t_steps,
            "mask_mix": self.mask_mix,
            "rho_e": self.rho_e,
            "prior_v": self.prior_v.tolist(),
            "prior_r": self.prior_r.tolist(),
            "beta_v": self.beta_v[1:].tolist(),
        }


def _smooth(p, floor):
    p = np.asarray(p, dtype=np.float64)
    if floor > 0:
        p = np.maximum(p, floor)
    return p / p.sum()


def _stack_with_identity(mats):
    size = mats[0].shape[0]
    return np.concatenate([np.eye(size)[None], np.stack(mats)], axis=0)


def _cumulative(q):
    out = np.empty_like(q)
    out[0] = np.eye(q.shape[1])
    for t in range(1, q.shape[0]):
        out[t] = out[t - 1] @ q[t]
    return out


def build_schedule(t_steps, vocab, mask_mix=0.2, schedule_shape="cosine",
                   edge_density=None, prior="empirical", smooth=1e-6):
    """Build priors, beta lists, and cached transition/cumulative matrices.

    Empirical priors are floored at ``smooth`` and renormalized so no state is
    forward-unreachable; passing ``smooth=0`` disables the floor, in which
    case a zero prior entry with ``mask_mix < 1`` raises DegenerateVocab.
    ``edge_density`` defaults to the vocabulary's recorded edge frequency,
    falling back to 0.5.
    """
    if t_steps < 1:
        raise ValueError("t_steps must be >= 1")
    if not (0.0 <= mask_mix <= 1.0):
        raise ValueError("mask_mix must lie in [0, 1]")

    if prior == "uniform":
        prior_v = np.full(vocab.k_obj, 1.0 / vocab.k_obj)
        prior_r = np.full(vocab.k_rel, 1.0 / vocab.k_rel)
    else:
        prior_v = np.asarray(vocab.object_freq, dtype=np.float64)
        prior_r = np.asarray(vocab.relation_freq, dtype=np.float64)
    if mask_mix < 1.0 and smooth == 0 and ((prior_v == 0).any() or (prior_r == 0).any()):
        raise DegenerateVocab("prior has a zero entry; smooth it or raise mask_mix to 1")
    prior_v = _smooth(prior_v, smooth)
    prior_r = _smooth(prior_r, smooth)

    if edge_density is None:
        edge_density = getattr(vocab, "edge_freq", None)
        if edge_density is None:
            edge_density = 0.5
    rho_e = float(min(max(edge_density, smooth), 1.0 - smooth))

    if schedule_shape == "cosine":
        betas = cosine_betas(t_steps)
    elif schedule_shape == "linear":
        betas = linear_betas(t_steps)
    else:
        raise ValueError(f"unknown schedule shape: {schedule_shape}")
    betas = _force_retention_bound(betas)
    beta_arr = np.concatenate([[0.0], betas])

    q_v = _stack_with_identity([transition_matrix(b, prior_v, mask_mix, vocab.k_obj) for b in betas])

    prior_e = np.array([1.0 - rho_e, rho_e])
    q_e = _stack_with_identity([(1.0 - b) * np.eye(2) + b * np.tile(prior_e, (2, 1)) for b in betas])

    # Relation kernels live on the full alphabet {0, 1..k_rel, mask}; the
    # prior puts zero mass on the null slot and row 0 is pinned to identity.
    prior_r_alpha = np.zeros(vocab.k_rel + 1)
    prior_r_alpha[1:] = prior_r
    q_r_list = []
    for b in betas:
        m = transition_matrix(b, prior_r_alpha, mask_mix, vocab.k_rel + 1)
        m[0, :] = 0.0
        m[0, 0] = 1.0
        q_r_list.append(m)
    q_r = _stack_with_identity(q_r_list)

    sched = NoiseSchedule(
        t_steps=t_steps,
        beta_v=beta_arr, beta_e=beta_arr.copy(), beta_r=beta_arr.copy(),
        prior_v=prior_v, rho_e=rho_e, prior_r=prior_r, mask_mix=float(mask_mix),
        q_v=q_v, q_e=q_e, q_r=q_r,
        qbar_v=_cumulative(q_v), qbar_e=_cumulative(q_e), qbar_r=_cumulative(q_r),
        vocab=vocab,
    )
    for q, qbar in ((sched.q_v, sched.qbar_v), (sched.q_e, sched.qbar_e), (sched.q_r, sched.qbar_r)):
        assert np.all(np.abs(q.sum(axis=2) - 1.0) < 1e-12)
        assert np.all(np.abs(qbar.sum(axis=2) - 1.0) < 1e-12)
        assert np.all(q >= 0.0)
    return sched


_CHANNELS = {"V": "qbar_v", "E": "qbar_e", "R": "qbar_r"}


def cumulative(schedule, channel, t):
    """Cached cumulative product Q-bar_t = Q_1 ... Q_t for one channel."""
    if not 1 <= t <= schedule.t_steps:
        raise OutOfRange(f"t={t} outside [1, {schedule.t_steps}]")
    return getattr(schedule, _CHANNELS[channel])[t]


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    """Factored limit of the random-corruption chain: iid node labels,
    Bernoulli edges, per-active-edge iid relations, zero diagonal."""

    prior_v: np.ndarray
    rho_e: float
    prior_r: np.ndarray
    n_nodes: int

    def sample_batch(self, size, rng):
        n = self.n_nodes
        nodes = rng.choice(self.prior_v.shape[0], size=(size, n), p=self.prior_v)
        edges = (rng.random((size, n, n)) < self.rho_e).astype(np.int64)
        rels = rng.choice(self.prior_r.shape[0], size=(size, n, n), p=self.prior_r) + 1
        diag = np.arange(n)
        edges[:, diag, diag] = 0
        rels *= edges
        return GraphBatch.full(nodes, edges, rels)

    def sample(self, rng):
        return self.sample_batch(1, rng).state(0)


def stationary_distribution(schedule, n_nodes):
    """Per-entity marginals of the forward chain's limit; only defined for the
    pure random-corruption setting (mask_mix = 0)."""
    if schedule.mask_mix != 0.0:
        raise MaskMixNonzero("stationary analysis applies to the random component only")
    return _stationary_unchecked(schedule, n_nodes)


def _stationary_unchecked(schedule, n_nodes):
    # Reverse-chain initialization: the random-component stationary law is
    # used for any mask_mix (the final forward step has beta ~ 1, so the
    # first reverse posterior barely depends on x_T).
    return StationaryDistribution(schedule.prior_v, schedule.rho_e, schedule.prior_r, n_nodes)
