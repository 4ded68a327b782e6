import numpy as np
import pytest

from dsg.denoiser.oracle import TabularBayesOracle
from dsg.graph import Vocabulary, enumerate_graphs
from dsg.schedule import build_schedule


@pytest.fixture
def tiny_vocab():
    return Vocabulary(("person", "dog"), ("holding", "near"),
                      np.array([0.4, 0.6]), np.array([0.5, 0.5]), edge_freq=0.4)


@pytest.fixture
def tiny_schedule(tiny_vocab):
    return build_schedule(5, tiny_vocab, mask_mix=0.2, edge_density=0.4)


@pytest.fixture
def tiny_schedule_nomask(tiny_vocab):
    return build_schedule(5, tiny_vocab, mask_mix=0.0, edge_density=0.4)


@pytest.fixture
def sampling_schedule(tiny_vocab):
    """Finer schedule for distribution-level sampler checks: the factorized
    reverse approximation tightens as steps shrink."""
    return build_schedule(20, tiny_vocab, mask_mix=0.2, edge_density=0.4)


def structured_distribution(vocab, rng):
    """A correlated data distribution over the 2-node space: relations prefer
    1 + (v_i + v_j) mod k_rel on active edges."""
    graphs = enumerate_graphs(2, vocab)
    w = rng.random(len(graphs)) + 0.3
    for k, g in enumerate(graphs):
        for i in range(2):
            for j in range(2):
                if i != j and g.edge_exist[i, j]:
                    pref = 1 + (g.node_labels[i] + g.node_labels[j]) % vocab.k_rel
                    if g.relation_labels[i, j] == pref:
                        w[k] *= 3.0
    w /= w.sum()
    return graphs, w


@pytest.fixture
def tiny_dataset(tiny_vocab):
    return structured_distribution(tiny_vocab, np.random.default_rng(11))


@pytest.fixture
def tiny_oracle(tiny_dataset, tiny_schedule):
    graphs, w = tiny_dataset
    return TabularBayesOracle(graphs, w, tiny_schedule)


def exact_triplet_distribution(graphs, probs):
    exact = {}
    for p, g in zip(probs, graphs):
        n = g.n_nodes
        for i in range(n):
            for j in range(n):
                if i != j and g.edge_exist[i, j]:
                    key = (int(g.node_labels[i]), int(g.relation_labels[i, j]), int(g.node_labels[j]))
                    exact[key] = exact.get(key, 0.0) + p
    z = sum(exact.values())
    return {k: v / z for k, v in exact.items()}
