"""Run configuration: a single TOML file with flag overrides.

Defaults mirror the reference hyperparameters: T=100 cosine schedule with a
0.2 mask share, loss scales (1, 0.5, 0.5), effective-number class weighting,
and the Gibbs 25 / soft-mask 90 refinement windows.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .denoiser.losses import TrainConfig
from .refine import GibbsBlock, RareBlock, RefinementPlan, SoftMaskBlock


@dataclass
class ScheduleConfig:
    t_steps: int = 100
    shape: str = "cosine"
    mask_mix: float = 0.2
    prior: str = "empirical"

    def build(self, vocab, edge_density=None):
        from .schedule import build_schedule

        return build_schedule(self.t_steps, vocab, mask_mix=self.mask_mix,
                              schedule_shape=self.shape, edge_density=edge_density,
                              prior=self.prior)


@dataclass
class SmcConfig:
    particles: int = 64
    beta: float = 2.0
    resample: str = "adaptive"       # or "always"
    return_mode: str = "best"        # or "uniform"
    ghat_sample: bool = False


@dataclass
class RewardConfig:
    kind: str = "lexical"            # or "embed"
    embed_url: str | None = None
    timeout: float = 5.0
    fallback: bool = True


@dataclass
class RunConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    plan: RefinementPlan = field(default_factory=RefinementPlan)
    smc: SmcConfig = field(default_factory=SmcConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    single_pass: bool = False
    synth: dict = field(default_factory=dict)


def _plan_from_dict(d):
    defaults = RefinementPlan()
    out = {}
    for name, cls, default in (("gibbs", GibbsBlock, defaults.gibbs),
                               ("soft_mask", SoftMaskBlock, defaults.soft_mask),
                               ("rare", RareBlock, None)):
        sub = d.get(name)
        if sub is None:
            out[name] = default
        elif sub.get("enabled", True) is False:
            out[name] = None
        else:
            kwargs = {k: v for k, v in sub.items() if k != "enabled"}
            if name == "gibbs" and "subset_order" in kwargs:
                kwargs["subset_order"] = tuple(kwargs["subset_order"])
            out[name] = cls(**kwargs)
    return RefinementPlan(**out)


def load_run_config(path=None, overrides=None):
    """Parse the TOML run config; ``overrides`` is a flat dict applied on top
    (CLI flags win over the file)."""
    raw = {}
    if path is not None:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    cfg = RunConfig()
    sched = raw.get("schedule", {})
    cfg.schedule = ScheduleConfig(
        t_steps=int(sched.get("T", sched.get("t_steps", 100))),
        shape=sched.get("shape", "cosine"),
        mask_mix=float(sched.get("mask_mix", 0.2)),
        prior=sched.get("prior", "empirical"),
    )
    tr = raw.get("train", {})
    allowed = set(TrainConfig.__dataclass_fields__)
    cfg.train = TrainConfig(**{k: v for k, v in tr.items() if k in allowed})
    cfg.plan = _plan_from_dict(raw.get("refine", {}))
    smc = raw.get("smc", {})
    cfg.smc = SmcConfig(
        particles=int(smc.get("particles", 64)),
        beta=float(smc.get("beta", 2.0)),
        resample=smc.get("resample", "adaptive"),
        return_mode=smc.get("return_mode", "best"),
        ghat_sample=bool(smc.get("ghat_sample", False)),
    )
    rw = raw.get("reward", {})
    cfg.reward = RewardConfig(
        kind=rw.get("kind", "lexical"),
        embed_url=rw.get("embed_url"),
        timeout=float(rw.get("timeout", 5.0)),
        fallback=bool(rw.get("fallback", True)),
    )
    cfg.single_pass = bool(raw.get("single_pass", False))
    cfg.synth = raw.get("synth", {})
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        obj = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            obj = getattr(obj, part)
        setattr(obj, parts[-1], value)
    return cfg
