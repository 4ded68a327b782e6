"""Operator entry points: synthesize corpora, train, sample, condition on
text, complete masked graphs, and evaluate metric reports.

Exit codes: 0 success, 2 usage, 3 data error, 4 numerical divergence.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import data as dio
from .conditioning import EmbeddingClient, reward_embedding, reward_lexical, smc_sample
from .config import load_run_config
from .denoiser import train as train_denoiser
from .errors import DivergedLoss, DsgError
from .graph import to_dot, validate
from .metrics import attach_tv, layout_f1, mmd, rare_k_tv, triplet_tv, win_rate
from .sampler import complete as complete_graph
from .sampler import sample_batch

EXIT_DATA_ERROR = 3
EXIT_DIVERGED = 4


def _fail(exc, code):
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


@click.group()
def main():
    """Scene-graph diffusion toolkit."""


def _rng(seed):
    return np.random.default_rng(seed)


@main.command("synth")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None,
              help="TOML run config with a [synth] block")
@click.option("--preset", default=None, help="synth preset name (overrides config)")
@click.option("--k-obj", default=6, show_default=True)
@click.option("--k-rel", default=8, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--n", default=1000, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_synth(config_path, preset, k_obj, k_rel, out_path, n, seed):
    """Write a synthetic corpus plus its exact-statistics sidecar."""
    cfg = load_run_config(config_path)
    name = preset or cfg.synth.get("preset", "long_tailed")
    k_obj = cfg.synth.get("k_obj", k_obj)
    k_rel = cfg.synth.get("k_rel", k_rel)
    try:
        spec = dio.SynthSpec.preset(name, k_obj=k_obj, k_rel=k_rel)
        vocab, states, stats = dio.synth_generate(spec, n, _rng(seed))
        dio.write_corpus(out_path, states, vocab)
        sidecar = Path(out_path).with_suffix(Path(out_path).suffix + ".stats.json")
        sidecar.write_text(json.dumps(stats.as_dict(), indent=2, sort_keys=True))
    except DsgError as exc:
        _fail(exc, EXIT_DATA_ERROR)
    click.echo(f"wrote {len(states)} graphs to {out_path} (+ {sidecar.name})")


@main.command("train")
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--ckpt", "ckpt_out", required=True, type=click.Path())
@click.option("--epochs", default=None, type=int)
@click.option("--seed", default=0, show_default=True)
def cmd_train(corpus_path, config_path, ckpt_out, epochs, seed):
    """Train the reference denoiser; prints per-epoch loss JSON lines."""
    cfg = load_run_config(config_path)
    if epochs is not None:
        cfg.train.epochs = epochs
    try:
        vocab, states = dio.load_corpus(corpus_path)
        schedule = cfg.schedule.build(vocab)
        ckpt, _ = train_denoiser(states, schedule, cfg.train, _rng(seed),
                                 log=lambda m: click.echo(json.dumps(m)))
        dio.save_checkpoint(ckpt, ckpt_out)
    except DivergedLoss as exc:
        _fail(exc, EXIT_DIVERGED)
    except DsgError as exc:
        _fail(exc, EXIT_DATA_ERROR)
    click.echo(f"checkpoint written to {ckpt_out}")


def _load_model(ckpt_path, cfg):
    ckpt = dio.load_checkpoint(ckpt_path)
    model = ckpt.build_model(use_ema=True)
    schedule = cfg.schedule.build(model.vocab)
    return ckpt, model, schedule


@main.command("sample")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--n", default=16, show_default=True)
@click.option("--nodes", "n_nodes", default=None, type=int,
              help="node count; defaults to draws from the checkpoint's corpus law")
@click.option("--dot", "dot_dir", type=click.Path(), default=None,
              help="also write one GraphViz file per graph")
@click.option("--seed", default=0, show_default=True)
def cmd_sample(ckpt_path, config_path, out_path, n, n_nodes, dot_dir, seed):
    """Sample unconditional scene graphs to JSONL."""
    cfg = load_run_config(config_path)
    rng = _rng(seed)
    try:
        ckpt, model, schedule = _load_model(ckpt_path, cfg)
        counts = _node_counts(ckpt, n_nodes, n, rng)
        states = []
        for count in sorted(set(counts)):
            size = int(np.sum(counts == count))
            batch = sample_batch(model, schedule, count, size, rng, plan=cfg.plan,
                                 single_pass=cfg.single_pass)
            states.extend(batch.states())
        for s in states:
            assert validate(s, model.vocab).ok
        dio.write_corpus(out_path, states, model.vocab)
        if dot_dir:
            Path(dot_dir).mkdir(parents=True, exist_ok=True)
            for i, s in enumerate(states):
                Path(dot_dir, f"graph_{i:05d}.dot").write_text(to_dot(s, model.vocab))
    except DsgError as exc:
        _fail(exc, EXIT_DATA_ERROR)
    click.echo(f"wrote {len(states)} graphs to {out_path}")


def _node_counts(ckpt, n_nodes, n, rng):
    if n_nodes is not None:
        return np.full(n, n_nodes)
    law = ckpt.meta.get("node_count_probs")
    if not law:
        return np.full(n, 3)
    sizes = np.array(sorted(int(k) for k in law))
    probs = np.array([law[str(k)] for k in sizes], dtype=np.float64)
    probs /= probs.sum()
    return rng.choice(sizes, size=n, p=probs)


@main.command("condition")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--prompt", required=True)
@click.option("--particles", "-D", default=None, type=int)
@click.option("--beta", default=None, type=float)
@click.option("--reward", "reward_kind", type=click.Choice(["lexical", "embed"]), default=None)
@click.option("--nodes", "n_nodes", default=3, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True)
def cmd_condition(ckpt_path, config_path, prompt, particles, beta, reward_kind,
                  n_nodes, out_path, seed):
    """Text-conditioned sampling via reward-tilted SMC; writes the selected
    graph and a per-step max-reward trace."""
    cfg = load_run_config(config_path)
    if particles is not None:
        cfg.smc.particles = particles
    if beta is not None:
        cfg.smc.beta = beta
    if reward_kind is not None:
        cfg.reward.kind = reward_kind
    rng = _rng(seed)
    try:
        _, model, schedule = _load_model(ckpt_path, cfg)
        if cfg.reward.kind == "embed":
            client = EmbeddingClient(cfg.reward.embed_url, cfg.reward.timeout)

            def reward(g, p, v):
                return reward_embedding(g, p, client, vocab=v)

            fallback = reward_lexical if cfg.reward.fallback else None
        else:
            reward, fallback = reward_lexical, None
        trace = []
        state = smc_sample(model, schedule, prompt, cfg.smc.particles, cfg.smc.beta,
                           reward, n_nodes, rng, plan=cfg.plan,
                           resample_mode=cfg.smc.resample, return_mode=cfg.smc.return_mode,
                           ghat_sample=cfg.smc.ghat_sample, single_pass=cfg.single_pass,
                           fallback=fallback, trace=trace)
        payload = {"graph": dio.graph_to_json(state, model.vocab), "prompt": prompt,
                   "trace": trace}
        Path(out_path).write_text(json.dumps(payload, indent=2))
    except DsgError as exc:
        _fail(exc, EXIT_DATA_ERROR)
    click.echo(f"selected graph written to {out_path}")


@main.command("complete")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--corpus", "corpus_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--mode", type=click.Choice(["object", "relation"]), default="object",
              show_default=True)
@click.option("--n-list", default="1,10", show_default=True,
              help="comma-separated completion counts for the w_N report")
@click.option("--max-graphs", default=50, show_default=True)
@click.option("--seed", default=0, show_default=True)
def cmd_complete(ckpt_path, corpus_path, config_path, mode, n_list, max_graphs, seed):
    """Mask one entity per corpus graph, draw N completions, report w_N."""
    cfg = load_run_config(config_path)
    rng = _rng(seed)
    try:
        ns = [int(x) for x in n_list.split(",") if x]
        ckpt = dio.load_checkpoint(ckpt_path)
        # interpret the corpus against the checkpoint's vocabulary by name
        vocab, states = dio.load_corpus(corpus_path, vocab=ckpt.vocab)
        model = ckpt.build_model(use_ema=True)
        schedule = cfg.schedule.build(vocab)
        report = completion_win_rates(model, schedule, states[:max_graphs], mode, ns, rng,
                                      single_pass=cfg.single_pass)
        click.echo(json.dumps(report))
    except DsgError as exc:
        _fail(exc, EXIT_DATA_ERROR)


def completion_win_rates(model, schedule, states, mode, ns, rng, single_pass=False):
    """Shared protocol for the completion task: mask one uniformly chosen
    entity per graph, draw max(ns) completions, report each w_N."""
    vocab = schedule.vocab
    n_max = max(ns)
    completion_sets = []
    truths = []
    skipped = 0
    for state in states:
        masked, truth, kind = _mask_one(state, mode, vocab, rng)
        if masked is None:
            skipped += 1
            continue
        outs = complete_graph(masked, model, schedule, n_max, rng, single_pass=single_pass)
        labels = [_read_entity(o, kind) for o in outs]
        completion_sets.append(labels)
        truths.append(truth)
    if skipped:
        click.echo(f"warning: skipped {skipped} graphs with no maskable {mode}", err=True)
    report = {"mode": mode, "graphs": len(completion_sets)}
    for n in ns:
        subsets = [labels[:n] for labels in completion_sets]
        report[f"w_{n}"] = win_rate(subsets, truths)
    return report


def _mask_one(state, mode, vocab, rng):
    if mode == "object":
        i = int(rng.integers(state.n_nodes))
        truth = int(state.node_labels[i])
        nodes = state.node_labels.copy()
        nodes[i] = vocab.mask_obj_index
        return state.replace(node_labels=nodes), truth, ("node", i)
    pairs = np.argwhere(state.edge_exist == 1)
    if pairs.shape[0] == 0:
        return None, None, None
    i, j = pairs[int(rng.integers(pairs.shape[0]))]
    truth = int(state.relation_labels[i, j])
    rels = state.relation_labels.copy()
    rels[i, j] = vocab.mask_rel_index
    return state.replace(relation_labels=rels), truth, ("rel", (int(i), int(j)))


def _read_entity(state, kind):
    what, where = kind
    if what == "node":
        return int(state.node_labels[where])
    i, j = where
    return int(state.relation_labels[i, j])


METRIC_CHOICES = ["n_mmd", "r_mmd", "id_mmd", "od_mmd", "triplet_tv", "attach_tv",
                  "rare_k_tv", "f1_vanilla", "f1_area", "f1_freq", "f1_box"]


@main.command("eval")
@click.option("--generated", "gen_path", required=True, type=click.Path(exists=True))
@click.option("--reference", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--metrics", "metric_list", default="n_mmd,r_mmd,id_mmd,od_mmd,triplet_tv,attach_tv,rare_k_tv",
              show_default=True)
@click.option("--alpha", default=1.0, show_default=True, help="rare_k_tv tail exponent")
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="write the JSON report here instead of stdout")
def cmd_eval(gen_path, ref_path, metric_list, alpha, out_path):
    """Emit a flat JSON metrics report comparing two corpora."""
    wanted = [m.strip() for m in metric_list.split(",") if m.strip()]
    unknown = [m for m in wanted if m not in METRIC_CHOICES]
    if unknown:
        raise click.UsageError(f"unknown metric(s): {', '.join(unknown)}")
    try:
        _, gen = dio.load_corpus(gen_path)
        _, ref = dio.load_corpus(ref_path)
        report = {}
        feature_of = {"n_mmd": "node", "r_mmd": "relation", "id_mmd": "in_degree",
                      "od_mmd": "out_degree"}
        for m in wanted:
            if m in feature_of:
                report[m] = mmd(gen, ref, feature=feature_of[m])
            elif m == "triplet_tv":
                report[m] = triplet_tv(gen, ref)
            elif m == "attach_tv":
                report[m] = attach_tv(gen, ref)
            elif m == "rare_k_tv":
                report[m] = rare_k_tv(gen, ref, alpha=alpha)
            else:
                variant = m.split("_", 1)[1]
                gen_l = [(s.boxes, s.node_labels) for s in gen if s.boxes is not None]
                ref_l = [(s.boxes, s.node_labels) for s in ref if s.boxes is not None]
                report[m] = layout_f1(gen_l, ref_l, variant=variant)
        text = json.dumps(report, sort_keys=True)
        if out_path:
            Path(out_path).write_text(text)
        else:
            click.echo(text)
    except DsgError as exc:
        _fail(exc, EXIT_DATA_ERROR)


if __name__ == "__main__":
    main()
