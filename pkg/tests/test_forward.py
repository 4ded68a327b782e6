import numpy as np
import pytest

from dsg.errors import MaskPresent
from dsg.forward import corrupt_step, corrupt_step_batch, marginal_distribution, sample_marginal
from dsg.graph import SceneGraphState, batch_violation_count, pad_batch
from dsg.schedule import build_schedule


def two_node_state(v0, v1, e01=0, r01=0, e10=0, r10=0):
    return SceneGraphState(np.array([v0, v1]), np.array([[0, e01], [e10, 0]]),
                           np.array([[0, r01], [r10, 0]]))


def test_near_identity_kernel_keeps_state(tiny_vocab):
    # force the smallest admissible betas by a long schedule's first step
    sched = build_schedule(100, tiny_vocab, mask_mix=0.0)
    s = two_node_state(0, 1, e01=1, r01=2)
    rng = np.random.default_rng(0)
    same = 0
    for _ in range(300):
        out = corrupt_step(s, 1, sched, rng)
        same += int(np.array_equal(out.node_labels, s.node_labels)
                    and np.array_equal(out.edge_exist, s.edge_exist)
                    and np.array_equal(out.relation_labels, s.relation_labels))
    assert same >= 290  # beta_1 ~ 1e-4: flips are rare


def test_edge_dropout_forces_null_relation(tiny_schedule):
    s = two_node_state(0, 1, e01=1, r01=1)
    rng = np.random.default_rng(1)
    for _ in range(200):
        out = corrupt_step(s, 5, tiny_schedule, rng)
        if out.edge_exist[0, 1] == 0:
            assert out.relation_labels[0, 1] == 0


def test_one_step_kernel_monte_carlo(tiny_schedule):
    """Empirical one-step frequencies match the analytic kernel per entity."""
    s = two_node_state(0, 1, e01=1, r01=1)
    rng = np.random.default_rng(2)
    t = 3
    n = 200_000
    batch = pad_batch([s] * n)
    out = corrupt_step_batch(batch, t, tiny_schedule, rng)

    node_hist = np.bincount(out.nodes[:, 0], minlength=3) / n
    expect = tiny_schedule.q_v[t][0]
    assert 0.5 * np.abs(node_hist - expect).sum() < 0.005

    edge_hist = np.bincount(out.edges[:, 0, 1], minlength=2) / n
    assert 0.5 * np.abs(edge_hist - tiny_schedule.q_e[t][1]).sum() < 0.005

    active = out.edges[:, 0, 1] == 1
    rel_hist = np.bincount(out.rels[active, 0, 1], minlength=4) / active.sum()
    assert 0.5 * np.abs(rel_hist - tiny_schedule.q_r[t][1]).sum() < 0.005

    # the (1, 0) pair was inactive with r=0: relations on corruption-activated
    # edges come from the prior
    active10 = out.edges[:, 1, 0] == 1
    rel10 = np.bincount(out.rels[active10, 1, 0], minlength=4)[1:3] / active10.sum()
    assert 0.5 * np.abs(rel10 - tiny_schedule.prior_r).sum() < 0.005


def test_forward_validity_preservation(tiny_schedule, tiny_vocab, tiny_dataset):
    graphs, w = tiny_dataset
    rng = np.random.default_rng(3)
    idx = rng.choice(len(graphs), p=w, size=2000)
    cur = pad_batch([graphs[i] for i in idx])
    for t in range(1, tiny_schedule.t_steps + 1):
        cur = corrupt_step_batch(cur, t, tiny_schedule, rng)
        assert batch_violation_count(cur, tiny_vocab) == 0


def test_rare_relation_insulation(tiny_schedule):
    # no direct path from a semantic relation to the null class
    for t in range(1, tiny_schedule.t_steps + 1):
        q = tiny_schedule.q_r[t]
        assert np.all(q[1:, 0] == 0.0)
        assert q[0, 0] == 1.0


def test_chapman_kolmogorov(tiny_schedule):
    for q, qbar in ((tiny_schedule.q_v, tiny_schedule.qbar_v),
                    (tiny_schedule.q_e, tiny_schedule.qbar_e),
                    (tiny_schedule.q_r, tiny_schedule.qbar_r)):
        for t in range(1, tiny_schedule.t_steps + 1):
            assert np.abs(qbar[t - 1] @ q[t] - qbar[t]).max() < 1e-12


def test_sample_marginal_rejects_masks(tiny_schedule, tiny_vocab):
    s = two_node_state(tiny_vocab.mask_obj_index, 1)
    with pytest.raises(MaskPresent):
        sample_marginal(s, 2, tiny_schedule, np.random.default_rng(0))


def test_sample_marginal_matches_stationary_at_t_final(tiny_vocab):
    sched = build_schedule(5, tiny_vocab, mask_mix=0.0, edge_density=0.4)
    s = two_node_state(0, 0, e01=1, r01=1)
    rng = np.random.default_rng(4)
    n = 100_000
    batch = pad_batch([s] * n)
    from dsg.forward import sample_marginal_batch

    drawn = sample_marginal_batch(batch, sched.t_steps, sched, rng)
    node_hist = np.bincount(drawn.nodes.reshape(-1), minlength=3)[:2] / (2 * n)
    assert 0.5 * np.abs(node_hist - sched.prior_v).sum() < 0.01
    edge_rate = drawn.edges[:, 0, 1].mean()
    assert abs(edge_rate - sched.rho_e) < 0.01
    active = drawn.edges[:, 0, 1] == 1
    rel_hist = np.bincount(drawn.rels[active, 0, 1], minlength=4)[1:3] / active.sum()
    assert 0.5 * np.abs(rel_hist - sched.prior_r).sum() < 0.01


def test_marginal_vs_stepwise_exact_per_channel(tiny_schedule):
    """Exact probability-vector propagation through per-step kernels equals
    the cumulative closed form, per channel."""
    for q, qbar in ((tiny_schedule.q_v, tiny_schedule.qbar_v),
                    (tiny_schedule.q_e, tiny_schedule.qbar_e),
                    (tiny_schedule.q_r, tiny_schedule.qbar_r)):
        k = q.shape[1]
        for start in range(k):
            p = np.eye(k)[start]
            for t in range(1, tiny_schedule.t_steps + 1):
                p = p @ q[t]
                assert np.abs(p - qbar[t][start]).max() < 1e-9


def test_marginal_distribution_t1_equals_kernel_rows(tiny_schedule):
    s = two_node_state(0, 1, e01=1, r01=2)
    dist = marginal_distribution(s, 1, tiny_schedule)
    assert np.allclose(dist.node_dists[0], tiny_schedule.q_v[1][0])
    assert np.isclose(dist.edge_active[0, 1], tiny_schedule.q_e[1][1, 1])
    assert np.allclose(dist.rel_dists[0, 1], tiny_schedule.q_r[1][2])


def test_marginal_distribution_rows_sum_to_one(tiny_schedule):
    s = two_node_state(1, 0, e01=1, r01=1)
    for t in (1, 3, 5):
        dist = marginal_distribution(s, t, tiny_schedule)
        assert np.abs(dist.node_dists.sum(axis=-1) - 1).max() < 1e-12
        assert np.abs(dist.rel_dists[0, 1].sum() - 1) < 1e-12


def test_marginal_distribution_matches_sampler(tiny_schedule):
    s = two_node_state(0, 1, e01=1, r01=1)
    t = 4
    dist = marginal_distribution(s, t, tiny_schedule)
    rng = np.random.default_rng(5)
    n = 200_000
    from dsg.forward import sample_marginal_batch

    drawn = sample_marginal_batch(pad_batch([s] * n), t, tiny_schedule, rng)
    node_hist = np.bincount(drawn.nodes[:, 0], minlength=3) / n
    assert 0.5 * np.abs(node_hist - dist.node_dists[0]).sum() < 0.005
    active = drawn.edges[:, 0, 1] == 1
    assert abs(active.mean() - dist.edge_active[0, 1]) < 0.005
    rel_hist = np.bincount(drawn.rels[active, 0, 1], minlength=4) / active.sum()
    assert 0.5 * np.abs(rel_hist - dist.rel_dists[0, 1]).sum() < 0.005
