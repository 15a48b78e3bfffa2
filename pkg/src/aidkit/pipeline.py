"""Interpolation sequence generation.

Four methods produce a sequence of ``m`` images between two (seed, condition)
pairs:

* ``text_embed_baseline``: lerp the condition embeddings, slerp the noises.
* ``denoise_baseline``: switch the condition partway through sampling.
* ``aid_inner`` / ``aid_outer``: interior branches attend to the two source
  branches' keys and values, exchanged once per denoising step.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import attention as attn
from . import metrics
from .errors import ConfigError
from .model import ConditionEmbedding, DenoiserWeights, KVRecord, forward
from .numerics import SeededRng, lerp, randn, slerp
from .scheduler import Sampler
from .selection import BetaPrior, BoConfig, CoefficientSchedule, bayes_opt, beta_schedule, uniform_schedule

METHODS = ("text_embed_baseline", "denoise_baseline", "aid_inner", "aid_outer")
AID_MODES = ("aid_inner", "aid_outer")
LATENT_SHAPE = (16, 16)

# guidance warmup default: 10 of 50 steps, scaled to the sampler length
GUIDED_WARMUP_FRACTION = 10 / 50


class Denoiser:
    """Callable wrapper binding weights to :func:`aidkit.model.forward`."""

    def __init__(self, weights: DenoiserWeights):
        self.weights = weights

    def __call__(self, z, cond, j, proc=None, peers=None, record=None):
        return forward(z, cond, j, self.weights, proc=proc, peers=peers, record=record)

    def condition(self, label: int) -> ConditionEmbedding:
        return self.weights.condition(label)

    def mixed_condition(self, labels: Sequence[int]) -> ConditionEmbedding:
        """Mean of several class embeddings, used for compositional guidance."""
        tokens = np.mean([self.weights["class_embed"][c] for c in labels], axis=0)
        return ConditionEmbedding(tokens, "+".join(str(c) for c in labels))


@dataclass(frozen=True)
class InterpolationConfig:
    m: int = 7
    mode: str = "aid_outer"
    fused: bool = True
    schedule: Optional[CoefficientSchedule] = None
    guidance: Optional[ConditionEmbedding] = None
    warmup_steps: Optional[int] = None
    seeds: tuple = (0, 1)
    applies_to: str = "both"
    # "first": prompt A for the first floor(tN) steps (t=1 -> all A).
    # "aligned": A for the first floor((1-t)N) steps, so t=0 is source A.
    denoise_orientation: str = "first"

    def __post_init__(self):
        if self.m < 2:
            raise ConfigError(f"sequence length must be >= 2, got {self.m}")
        if self.mode not in METHODS:
            raise ConfigError(f"unknown interpolation mode {self.mode!r}")
        if self.schedule is None:
            object.__setattr__(self, "schedule", uniform_schedule(self.m))
        if len(self.schedule) != self.m:
            raise ConfigError(f"schedule has {len(self.schedule)} entries for m={self.m}")
        if self.guidance is not None and self.mode not in AID_MODES:
            raise ConfigError("guidance is only available for the aid modes")
        if self.applies_to not in attn.SCOPES:
            raise ConfigError(f"unknown attention scope {self.applies_to!r}")
        if self.denoise_orientation not in ("first", "aligned"):
            raise ConfigError(f"unknown orientation {self.denoise_orientation!r}")

    def resolved_warmup(self, steps: int) -> int:
        if self.warmup_steps is None:
            if self.guidance is None:
                return steps
            return int(round(GUIDED_WARMUP_FRACTION * steps))
        if not 0 <= self.warmup_steps <= steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} outside [0, {steps}]")
        return self.warmup_steps

    def echo(self, steps: Optional[int] = None) -> dict:
        out = {
            "m": self.m,
            "mode": self.mode,
            "fused": self.fused,
            "coefficients": list(self.schedule.t_values),
            "guidance": None if self.guidance is None else self.guidance.source,
            "warmup_steps": self.warmup_steps if steps is None else self.resolved_warmup(steps),
            "seeds": list(self.seeds),
            "applies_to": self.applies_to,
        }
        if self.mode == "denoise_baseline":
            out["denoise_orientation"] = self.denoise_orientation
        return out


@dataclass
class InterpolationSequence:
    images: list
    coefficients: CoefficientSchedule
    config: dict
    provenance: list = field(default_factory=list)

    @property
    def method(self) -> str:
        return self.config["mode"]

    def __len__(self):
        return len(self.images)


def source_latents(cfg: InterpolationConfig):
    return randn(SeededRng(cfg.seeds[0]), LATENT_SHAPE), randn(SeededRng(cfg.seeds[1]), LATENT_SHAPE)


def generate_single(z_T, cond: ConditionEmbedding, model, sampler: Sampler, proc=None):
    """Deterministic DDIM from ``z_T`` to a clean image."""
    z = z_T
    for _, j, j_prev in sampler.transitions():
        z = sampler.step(z, model(z, cond, j, proc=proc), j, j_prev)
    return z


def _check_mode(cfg, *allowed):
    if cfg.mode not in allowed:
        raise ConfigError(f"config mode {cfg.mode!r} does not match this method {allowed}")


def interpolate_text_embedding(cfg, c1, cm, model, sampler) -> InterpolationSequence:
    _check_mode(cfg, "text_embed_baseline")
    z1, zm = source_latents(cfg)
    images, prov = [], []
    for i, t in enumerate(cfg.schedule):
        cond = ConditionEmbedding(lerp(c1.tokens, cm.tokens, t), f"lerp({t!r})")
        images.append(generate_single(slerp(z1, zm, t), cond, model, sampler))
        prov.append({"index": i, "t": t, "role": _role(i, cfg.m), "condition": "lerp"})
    return InterpolationSequence(images, cfg.schedule, cfg.echo(sampler.steps), prov)


def steps_on_first(t: float, steps: int, orientation: str = "first") -> int:
    """How many leading steps of the denoising baseline use the first condition."""
    frac = t if orientation == "first" else 1.0 - t
    # round away representation noise such as 0.6 * 25 = 14.999999999999998
    return int(math.floor(round(frac * steps, 9)))


def interpolate_denoising(cfg, c1, cm, model, sampler) -> InterpolationSequence:
    _check_mode(cfg, "denoise_baseline")
    z1, zm = source_latents(cfg)
    images, prov = [], []
    for i, t in enumerate(cfg.schedule):
        n_first = steps_on_first(t, sampler.steps, cfg.denoise_orientation)
        z = slerp(z1, zm, t)
        for pos, j, j_prev in sampler.transitions():
            cond = c1 if pos < n_first else cm
            z = sampler.step(z, model(z, cond, j), j, j_prev)
        images.append(z)
        prov.append({"index": i, "t": t, "role": _role(i, cfg.m),
                     "steps_first": n_first, "steps_second": sampler.steps - n_first})
    return InterpolationSequence(images, cfg.schedule, cfg.echo(sampler.steps), prov)


def interior_processor(cfg: InterpolationConfig, t: float, active_steps) -> attn.ProcessorSelector:
    base = "inner" if cfg.mode == "aid_inner" else "outer"
    mode = f"fused_{base}" if cfg.fused else base
    return attn.ProcessorSelector(
        mode=mode,
        t=t,
        applies_to=cfg.applies_to,
        active_steps=frozenset(active_steps),
        guided=cfg.guidance is not None,
    )


def interpolate_aid(cfg, c1, cm, model, sampler) -> InterpolationSequence:
    """Run all branches in lockstep with interpolated attention.

    The two source branches run plain attention and export their per-layer
    keys/values; interior branches read them at the same step. During the
    first ``warmup_steps`` steps interior branches interpolate; afterwards they
    generate plainly from their own condition (the guidance prompt if one is
    given, else the lerped embedding). With guidance, cross-attention reads
    the guidance keys/values at every step.
    """
    _check_mode(cfg, *AID_MODES)
    timesteps = sampler.timesteps
    warmup = cfg.resolved_warmup(sampler.steps)
    z1, zm = source_latents(cfg)
    m = cfg.m
    ts = cfg.schedule.t_values

    latents = [z1] + [slerp(z1, zm, ts[i]) for i in range(1, m - 1)] + [zm]
    conds = [c1]
    for i in range(1, m - 1):
        if cfg.guidance is not None:
            conds.append(cfg.guidance)
        else:
            conds.append(ConditionEmbedding(lerp(c1.tokens, cm.tokens, ts[i]), f"lerp({ts[i]!r})"))
    conds.append(cm)
    procs = [None] + [interior_processor(cfg, ts[i], timesteps[:warmup]) for i in range(1, m - 1)] + [None]

    for _, j, j_prev in sampler.transitions():
        rec_first, rec_last = KVRecord(), KVRecord()
        eps_first = model(latents[0], conds[0], j, record=rec_first)
        eps_last = model(latents[-1], conds[-1], j, record=rec_last)
        peers = (rec_first, rec_last)
        eps = [eps_first]
        for i in range(1, m - 1):
            eps.append(model(latents[i], conds[i], j, proc=procs[i], peers=peers))
        eps.append(eps_last)
        latents = [sampler.step(z, e, j, j_prev) for z, e in zip(latents, eps)]

    prov = []
    for i in range(m):
        entry = {"index": i, "t": ts[i], "role": _role(i, m)}
        if 0 < i < m - 1:
            entry.update(attention=procs[i].mode, warmup_steps=warmup,
                         condition="guidance" if cfg.guidance is not None else "lerp")
        prov.append(entry)
    return InterpolationSequence(latents, cfg.schedule, cfg.echo(sampler.steps), prov)


def _role(i, m):
    return "source" if i in (0, m - 1) else "interior"


def interpolate(cfg, c1, cm, model, sampler) -> InterpolationSequence:
    if cfg.mode == "text_embed_baseline":
        return interpolate_text_embedding(cfg, c1, cm, model, sampler)
    if cfg.mode == "denoise_baseline":
        return interpolate_denoising(cfg, c1, cm, model, sampler)
    return interpolate_aid(cfg, c1, cm, model, sampler)


# -- Beta prior tuning and method comparison ---------------------------------------


def sequence_objective(cfg, c1, cm, model, sampler, distance, objective="smoothness") -> Callable:
    """Build ``f(alpha, beta)`` scoring the sequence made with that Beta prior.

    Smoothness is maximised as is; consistency is negated so that lower
    consistency scores higher.
    """

    def f(alpha, beta):
        sched = beta_schedule(cfg.m, BetaPrior(alpha, beta))
        seq = interpolate(replace(cfg, schedule=sched), c1, cm, model, sampler)
        if objective == "smoothness":
            return metrics.smoothness(seq, distance)
        return -metrics.consistency(seq, distance)

    return f


def tune_beta_prior(cfg, c1, cm, model, sampler, distance, bo: Optional[BoConfig] = None):
    bo = bo or BoConfig(steps=sampler.steps)
    result = bayes_opt(sequence_objective(cfg, c1, cm, model, sampler, distance, bo.objective), bo)
    return result


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("AIDKIT_THREADS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class MethodSpec:
    method: str
    fused: bool = True
    tune_beta: bool = False


DEFAULT_METHODS = (
    MethodSpec("text_embed_baseline"),
    MethodSpec("denoise_baseline"),
    MethodSpec("aid_inner", fused=True, tune_beta=True),
    MethodSpec("aid_outer", fused=True, tune_beta=True),
)


def compare_methods(
    pair: tuple,
    seeds: tuple,
    model: Denoiser,
    sampler: Sampler,
    methods: Sequence[MethodSpec] = DEFAULT_METHODS,
    m: int = 7,
    distance=None,
    features=None,
    bo: Optional[BoConfig] = None,
):
    """Run each method on one class pair with shared seeds.

    Returns ``[(method, sequence, report, bo_result_or_None), ...]`` in the
    order of ``methods``.
    """
    distance = distance or metrics.PixelL2()
    c1, cm = model.condition(pair[0]), model.condition(pair[1])

    def run(spec: MethodSpec):
        cfg = InterpolationConfig(m=m, mode=spec.method, fused=spec.fused, seeds=tuple(seeds))
        tuned = None
        if spec.tune_beta:
            tuned = tune_beta_prior(cfg, c1, cm, model, sampler, distance, bo)
            cfg = replace(cfg, schedule=beta_schedule(m, BetaPrior(tuned.alpha, tuned.beta)))
        seq = interpolate(cfg, c1, cm, model, sampler)
        return spec.method, seq, metrics.evaluate([seq], distance, features), tuned

    workers = min(worker_count(), len(methods))
    if workers == 1:
        return [run(s) for s in methods]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, methods))
