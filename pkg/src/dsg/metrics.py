"""Graph-distribution metrics (MMD and TV families), layout F1 variants, and
the masked-completion win-rate protocol."""

from __future__ import annotations

from collections import Counter, defaultdict

import numpy as np

from .errors import EmptySampleSet, SizeMismatch

IOU_THRESHOLDS = np.arange(1, 11) * 0.05  # 0.05 .. 0.50


# ---------------------------------------------------------------------------
# feature histograms
# ---------------------------------------------------------------------------


def _node_hist(state, k_obj):
    h = np.bincount(state.node_labels, minlength=k_obj).astype(np.float64)
    return h / max(h.sum(), 1.0)


def _rel_hist(state, k_rel):
    rels = state.relation_labels[state.edge_exist == 1]
    h = np.bincount(rels - 1, minlength=k_rel).astype(np.float64) if rels.size else np.zeros(k_rel)
    return h / max(h.sum(), 1.0)


def _degree_hist(state, max_degree, axis):
    deg = state.edge_exist.sum(axis=axis)
    h = np.bincount(deg, minlength=max_degree + 1).astype(np.float64)
    return h / max(h.sum(), 1.0)


def _features(samples, feature, k_obj, k_rel, max_degree):
    if feature == "node":
        return np.stack([_node_hist(s, k_obj) for s in samples])
    if feature == "relation":
        return np.stack([_rel_hist(s, k_rel) for s in samples])
    if feature == "in_degree":
        return np.stack([_degree_hist(s, max_degree, axis=0) for s in samples])
    if feature == "out_degree":
        return np.stack([_degree_hist(s, max_degree, axis=1) for s in samples])
    raise ValueError(f"unknown feature: {feature}")


def _infer_sizes(samples_a, samples_b, vocab):
    if vocab is not None:
        return vocab.k_obj, vocab.k_rel
    k_obj = 1 + max(int(s.node_labels.max(initial=0)) for s in samples_a + samples_b)
    k_rel = max(int(s.relation_labels.max(initial=0)) for s in samples_a + samples_b)
    return k_obj, max(k_rel, 1)


def mmd(samples_a, samples_b, feature="node", bandwidth=None, vocab=None):
    """Squared MMD with an RBF kernel over per-graph normalized histograms.

    Uses the unbiased estimator when both sets have at least two graphs and
    falls back to the biased (V-statistic) form otherwise; the result is
    clamped at zero.  ``bandwidth=None`` applies the median heuristic over the
    pooled pairwise distances.
    """
    if not samples_a or not samples_b:
        raise EmptySampleSet("mmd requires two non-empty sample sets")
    k_obj, k_rel = _infer_sizes(samples_a, samples_b, vocab)
    max_degree = max(
        max(int(s.edge_exist.sum(axis=0).max(initial=0)) for s in samples_a + samples_b),
        max(int(s.edge_exist.sum(axis=1).max(initial=0)) for s in samples_a + samples_b),
    )
    x = _features(samples_a, feature, k_obj, k_rel, max_degree)
    y = _features(samples_b, feature, k_obj, k_rel, max_degree)

    def sq_dists(u, v):
        uu = (u * u).sum(axis=1)[:, None]
        vv = (v * v).sum(axis=1)[None, :]
        return np.maximum(uu + vv - 2.0 * (u @ v.T), 0.0)

    dxx, dyy, dxy = sq_dists(x, x), sq_dists(y, y), sq_dists(x, y)
    if bandwidth is None:
        pooled = np.concatenate([dxx.ravel(), dyy.ravel(), dxy.ravel()])
        med = np.sqrt(np.median(pooled[pooled > 0])) if (pooled > 0).any() else 1.0
        bandwidth = med if med > 0 else 1.0
    g = 1.0 / (2.0 * bandwidth ** 2)
    kxx, kyy, kxy = np.exp(-g * dxx), np.exp(-g * dyy), np.exp(-g * dxy)
    m, n = x.shape[0], y.shape[0]
    if m > 1 and n > 1:
        xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
        yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    else:
        xx = kxx.mean()
        yy = kyy.mean()
    return float(max(xx + yy - 2.0 * kxy.mean(), 0.0))


# ---------------------------------------------------------------------------
# TV family
# ---------------------------------------------------------------------------


def _triplet_counts(samples):
    counts = Counter()
    for s in samples:
        idx = np.argwhere(s.edge_exist == 1)
        for i, j in idx:
            counts[(int(s.node_labels[i]), int(s.relation_labels[i, j]), int(s.node_labels[j]))] += 1
    return counts


def _normalize(counts):
    total = sum(counts.values())
    return {k: v / total for k, v in counts.items()}, total


def triplet_tv(samples, reference):
    """Total variation between empirical <subject, relation, object> triplet
    distributions over active edges; a set with zero active edges is the
    empty distribution, at TV 1 from any non-empty one."""
    if not samples or not reference:
        raise EmptySampleSet("triplet_tv requires two non-empty sample sets")
    counts_a = _triplet_counts(samples)
    counts_b = _triplet_counts(reference)
    ca, na = _normalize(counts_a) if counts_a else ({}, 0)
    cb, nb = _normalize(counts_b) if counts_b else ({}, 0)
    if na == 0 and nb == 0:
        return 0.0
    if na == 0 or nb == 0:
        return 1.0
    keys = set(ca) | set(cb)
    return 0.5 * sum(abs(ca.get(k, 0.0) - cb.get(k, 0.0)) for k in keys)


def triplet_tv_exact(samples, exact):
    """TV of a sample set against an exact triplet distribution given as a
    dict {(v_i, r, v_j): prob}."""
    counts = _triplet_counts(samples)
    if not counts:
        return 1.0 if exact else 0.0
    emp, _ = _normalize(counts)
    keys = set(emp) | set(exact)
    return 0.5 * sum(abs(emp.get(k, 0.0) - exact.get(k, 0.0)) for k in keys)


def _pair_conditionals(samples):
    pair_counts = Counter()
    rel_counts = defaultdict(Counter)
    for s in samples:
        for i, j in np.argwhere(s.edge_exist == 1):
            pair = (int(s.node_labels[i]), int(s.node_labels[j]))
            pair_counts[pair] += 1
            rel_counts[pair][int(s.relation_labels[i, j])] += 1
    return pair_counts, rel_counts


def attach_tv(samples, reference):
    """Reference-pair-weighted TV of relation conditionals given object pairs;
    pairs unseen in the samples contribute TV 1."""
    if not samples or not reference:
        raise EmptySampleSet("attach_tv requires two non-empty sample sets")
    ref_pairs, ref_rels = _pair_conditionals(reference)
    gen_pairs, gen_rels = _pair_conditionals(samples)
    total_ref = sum(ref_pairs.values())
    if total_ref == 0:
        return 0.0 if sum(gen_pairs.values()) == 0 else 1.0
    out = 0.0
    for pair, cnt in ref_pairs.items():
        weight = cnt / total_ref
        ref_cond, _ = _normalize(ref_rels[pair])
        if pair not in gen_pairs:
            out += weight * 1.0
            continue
        gen_cond, _ = _normalize(gen_rels[pair])
        keys = set(ref_cond) | set(gen_cond)
        out += weight * 0.5 * sum(abs(gen_cond.get(k, 0.0) - ref_cond.get(k, 0.0)) for k in keys)
    return out


def _rel_marginal(samples, k_rel):
    counts = np.zeros(k_rel)
    for s in samples:
        rels = s.relation_labels[s.edge_exist == 1]
        if rels.size:
            counts += np.bincount(rels - 1, minlength=k_rel)
    total = counts.sum()
    return counts / total if total > 0 else counts, total


def rare_k_tv(samples, reference, alpha=1.0, vocab=None):
    """Tail-weighted TV of relation marginals: weights proportional to
    1 / p_ref(r)^alpha, normalized to sum 1."""
    if not samples or not reference:
        raise EmptySampleSet("rare_k_tv requires two non-empty sample sets")
    if not 0.5 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0.5, 1]")
    k_rel = vocab.k_rel if vocab is not None else max(
        int(s.relation_labels.max(initial=0)) for s in samples + reference
    )
    p_gen, n_gen = _rel_marginal(samples, k_rel)
    p_ref, n_ref = _rel_marginal(reference, k_rel)
    if n_ref == 0 and n_gen == 0:
        return 0.0
    if n_ref == 0 or n_gen == 0:
        return 1.0
    w = 1.0 / np.maximum(p_ref, 1e-6) ** alpha
    w /= w.sum()
    return float(0.5 * (w * np.abs(p_gen - p_ref)).sum())


def rare_k_tv_exact(samples, exact_marginal, alpha=1.0):
    """Rare-weighted TV against an exact relation marginal array (index 0 is
    semantic relation 1)."""
    exact = np.asarray(exact_marginal, dtype=np.float64)
    p_gen, n_gen = _rel_marginal(samples, exact.shape[0])
    if n_gen == 0:
        return 1.0
    w = 1.0 / np.maximum(exact, 1e-6) ** alpha
    w /= w.sum()
    return float(0.5 * (w * np.abs(p_gen - exact)).sum())


# ---------------------------------------------------------------------------
# layout F1
# ---------------------------------------------------------------------------


def _to_corners(boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def box_iou_matrix(boxes_a, boxes_b):
    a, b = _to_corners(boxes_a), _to_corners(boxes_b)
    lo = np.maximum(a[:, None, :2], b[None, :, :2])
    hi = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(hi - lo, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / union, 0.0)


def _greedy_match_count(iou, threshold):
    """One-to-one matching, highest IoU first, accepting pairs at or above the
    threshold."""
    if iou.size == 0:
        return 0
    order = np.argsort(-iou, axis=None)
    used_a = np.zeros(iou.shape[0], dtype=bool)
    used_b = np.zeros(iou.shape[1], dtype=bool)
    matches = 0
    for flat in order:
        i, j = divmod(int(flat), iou.shape[1])
        if iou[i, j] < threshold:
            break
        if not used_a[i] and not used_b[j]:
            used_a[i] = used_b[j] = True
            matches += 1
    return matches


def _f1_for_boxes(gen_boxes, ref_boxes):
    """Threshold-averaged F1 for one category of one layout pair."""
    n_gen, n_ref = len(gen_boxes), len(ref_boxes)
    if n_gen == 0 and n_ref == 0:
        return 1.0
    if n_gen == 0 or n_ref == 0:
        return 0.0
    iou = box_iou_matrix(gen_boxes, ref_boxes)
    scores = []
    for thr in IOU_THRESHOLDS:
        tp = _greedy_match_count(iou, thr)
        precision = tp / n_gen
        recall = tp / n_ref
        scores.append(0.0 if tp == 0 else 2 * precision * recall / (precision + recall))
    return float(np.mean(scores))


def layout_f1(generated, reference, variant="vanilla"):
    """Category-weighted, threshold-averaged box-matching F1.

    ``generated`` and ``reference`` are equal-length lists of layouts, each a
    (boxes, labels) pair with boxes in cxcywh form; layouts are compared
    index to index.  Variants weight categories uniformly (vanilla), by mean
    reference box area (area), by reference frequency (freq), or pool all
    boxes into one category (box).
    """
    if len(generated) != len(reference):
        raise SizeMismatch("generated and reference layout lists must align")
    if not generated:
        raise EmptySampleSet("layout_f1 requires at least one layout pair")

    if variant == "box":
        scores = []
        for (gb, _), (rb, _) in zip(generated, reference):
            scores.append(_f1_for_boxes(gb, rb))
        return float(np.mean(scores))

    cat_area = defaultdict(list)
    cat_freq = Counter()
    for rb, rl in reference:
        for box, lab in zip(np.asarray(rb).reshape(-1, 4), rl):
            cat_area[int(lab)].append(box[2] * box[3])
            cat_freq[int(lab)] += 1
    categories = set(cat_freq)
    for gb, gl in generated:
        categories |= {int(x) for x in gl}
    categories = sorted(categories)
    if not categories:
        return 1.0

    if variant == "vanilla":
        weights = {k: 1.0 / len(categories) for k in categories}
    elif variant == "area":
        means = {k: float(np.mean(cat_area[k])) if cat_area[k] else 0.0 for k in categories}
        total = sum(means.values()) or 1.0
        weights = {k: means[k] / total for k in categories}
    elif variant == "freq":
        total = sum(cat_freq.values()) or 1.0
        weights = {k: cat_freq[k] / total for k in categories}
    else:
        raise ValueError(f"unknown layout_f1 variant: {variant}")

    scores = []
    for (gb, gl), (rb, rl) in zip(generated, reference):
        gb = np.asarray(gb, dtype=np.float64).reshape(-1, 4)
        rb = np.asarray(rb, dtype=np.float64).reshape(-1, 4)
        gl = np.asarray(gl, dtype=np.int64).reshape(-1)
        rl = np.asarray(rl, dtype=np.int64).reshape(-1)
        pair_score = 0.0
        for k in categories:
            f1k = _f1_for_boxes(gb[gl == k], rb[rl == k])
            pair_score += weights[k] * f1k
        scores.append(pair_score)
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# completion win rate
# ---------------------------------------------------------------------------


def win_rate(completion_sets, ground_truth):
    """Fraction of completion sets containing at least one exact label match."""
    if len(completion_sets) != len(ground_truth):
        raise SizeMismatch("one ground-truth label per completion set required")
    if not completion_sets:
        raise EmptySampleSet("win_rate requires at least one completion set")
    declared = len(completion_sets[0])
    wins = 0
    for labels, truth in zip(completion_sets, ground_truth):
        if len(labels) != declared:
            raise SizeMismatch(f"expected {declared} completions, got {len(labels)}")
        if any(lab == truth for lab in labels):
            wins += 1
    return wins / len(completion_sets)
