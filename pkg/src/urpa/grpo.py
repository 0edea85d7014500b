"""Group Relative Policy Optimization for the linear-softmax policy.

Each optimizer step refreshes ``theta_old``, samples a group of G responses per
sample, turns group rewards into normalized advantages and takes one plain
gradient-ascent step on::

    sum_i exp(logp_theta(o_i) - logp_old(o_i)) * A_i  -  beta * KL(pi_theta || pi_ref)

summed over the batch. KL is the exact per-state categorical divergence along
the sampled responses, averaged over the group.
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from urpa.core import GroundingSample
from urpa.policy import (
    MAX_LEN,
    ParamGrad,
    PolicyParams,
    PolicySnapshot,
    TokenResponse,
    pad_tokens,
    responses_from_batch,
    sample_batch,
    surrogate_terms,
)
from urpa.rewards import RewardBreakdown, RewardConfig, source_reward

log = logging.getLogger(__name__)

LOG_RATIO_GUARD = 30.0

STAGE_SOURCE = 1
STAGE_TARGET = 2
STAGE_PSEUDO = 3


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    beta: float = 0.04
    learning_rate: float = 0.05
    epochs: int = 1
    batch_size: int = 16
    adv_epsilon: float = 1e-8
    seed: int = 0
    max_grad_norm: Optional[float] = 5.0
    clip_ratio: Optional[float] = None
    max_steps: Optional[int] = None

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not self.beta >= 0:
            raise ValueError("beta must be >= 0")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if not self.adv_epsilon > 0:
            raise ValueError("adv_epsilon must be > 0")


@dataclass
class RolloutGroup:
    sample_id: str
    responses: list
    rewards: np.ndarray
    advantages: np.ndarray
    logprobs_old: np.ndarray
    breakdowns: list = field(default_factory=list)

    def __post_init__(self) -> None:
        g = len(self.responses)
        for name in ("rewards", "advantages", "logprobs_old"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (g,):
                raise ValueError(f"{name} must have length {g}")
            setattr(self, name, arr)


def compute_advantages(rewards: Sequence[float], adv_epsilon: float = 1e-8) -> np.ndarray:
    """Group-normalized advantages with the population standard deviation.

    A group whose rewards are all equal carries no preference and gets zeros.
    """
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise ValueError("need at least two rewards")
    # exact equality: the float mean of equal values can differ from them by one ulp
    if r.max() == r.min():
        return np.zeros_like(r)
    centered = r - r.mean()
    std = r.std()
    if std == 0.0:  # spread below float resolution
        return np.zeros_like(r)
    return centered / (std + adv_epsilon)


def _rollout_uniforms(seed: int, stage: int, epoch: int, sample_id: str, group_size: int) -> np.ndarray:
    key = [seed & 0xFFFFFFFFFFFFFFFF, stage, epoch, zlib.crc32(sample_id.encode())]
    return np.random.default_rng(key).random((group_size, MAX_LEN))


def sample_groups(
    params: PolicyParams,
    samples: Sequence[GroundingSample],
    group_size: int,
    seed: int,
    stage: int,
    epoch: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """G responses per sample. Row ``i*G + j`` is rollout ``j`` of sample ``i``.

    Randomness for each sample is keyed by (seed, stage, epoch, sample id), so
    results do not depend on batch composition order.
    """
    ctx = np.repeat(np.stack([s.context for s in samples]), group_size, axis=0)
    u = np.concatenate([_rollout_uniforms(seed, stage, epoch, s.id, group_size) for s in samples])
    tokens, lps = sample_batch(params, ctx, u)
    return ctx, tokens, lps


def _ratio_weights(lp: np.ndarray, lp_old: np.ndarray, adv: np.ndarray, clip_ratio: Optional[float]):
    delta = lp - lp_old
    clipped = np.abs(delta) > LOG_RATIO_GUARD
    ratio = np.exp(np.clip(delta, -LOG_RATIO_GUARD, LOG_RATIO_GUARD))
    objective_terms = ratio * adv
    weights = ratio * adv
    if clip_ratio is not None:
        lo, hi = 1.0 - clip_ratio, 1.0 + clip_ratio
        clipped_terms = np.clip(ratio, lo, hi) * adv
        use_clip = clipped_terms < objective_terms
        objective_terms = np.minimum(objective_terms, clipped_terms)
        weights = np.where(use_clip, 0.0, weights)
    return objective_terms, weights, int(clipped.sum())


def surrogate_objective(
    snapshot: PolicySnapshot,
    sample: GroundingSample,
    group: RolloutGroup,
    beta: float,
    clip_ratio: Optional[float] = None,
) -> tuple[float, ParamGrad, int]:
    """Objective value, its gradient w.r.t. ``snapshot.current`` and the ratio-guard count."""
    G = len(group.responses)
    ctx = np.repeat(sample.context[None, :], G, axis=0)
    tokens = pad_tokens([r.tokens for r in group.responses])
    value, grad, clips, _ = _batched_surrogate(
        snapshot.current, snapshot.ref, ctx, tokens, group.logprobs_old, group.advantages, G, beta, clip_ratio
    )
    return value, grad, clips


def _batched_surrogate(params, ref, ctx, tokens, lp_old, adv, G, beta, clip_ratio):
    n = tokens.shape[0]
    # first pass with unit weights only to get current log-probs
    lp_w = np.zeros(n)
    kl_w = np.full(n, beta / G)
    lp, kl, _ = surrogate_terms(params, ref, ctx, tokens, lp_w, np.zeros(n))
    terms, weights, clips = _ratio_weights(lp, lp_old, adv, clip_ratio)
    _, _, grad = surrogate_terms(params, ref, ctx, tokens, weights, kl_w)
    value = float(terms.sum() - beta * kl.sum() / G)
    return value, grad, clips, kl


def _batched_surrogate_fast(params, ref, ctx, tokens, lp_old, adv, G, beta, clip_ratio):
    """Single-pass variant valid when theta == theta_old (ratios are 1 up to rounding)."""
    n = tokens.shape[0]
    weights = np.asarray(adv, dtype=np.float64)
    lp, kl, grad = surrogate_terms(params, ref, ctx, tokens, weights, np.full(n, beta / G))
    terms, w_check, clips = _ratio_weights(lp, lp_old, adv, clip_ratio)
    if clips or not np.allclose(w_check, weights, rtol=1e-9, atol=1e-12):
        return _batched_surrogate(params, ref, ctx, tokens, lp_old, adv, G, beta, clip_ratio)
    value = float(terms.sum() - beta * kl.sum() / G)
    return value, grad, clips, kl


RewardFn = Callable[[str, GroundingSample], RewardBreakdown]


@dataclass
class TrainResult:
    params: PolicyParams
    log: list
    clip_events: int = 0
    grad_clip_events: int = 0


def _clip_grad(grad: ParamGrad, max_norm: Optional[float]) -> tuple[ParamGrad, bool]:
    if max_norm is None:
        return grad, False
    norm = float(np.sqrt((grad.U ** 2).sum() + (grad.V ** 2).sum() + (grad.b ** 2).sum()))
    if norm > max_norm:
        return grad.scale(max_norm / norm), True
    return grad, False


def run_grpo(
    samples: Sequence[GroundingSample],
    snapshot: PolicySnapshot,
    cfg: GrpoConfig,
    reward_fn: RewardFn,
    stage: int,
    log_path: Optional[Path] = None,
    on_step: Optional[Callable[[int, PolicyParams], None]] = None,
) -> TrainResult:
    """Generic GRPO loop shared by source training and target adaptation."""
    if len(samples) == 0:
        raise ValueError("empty dataset")
    params = snapshot.current.copy()
    ref = snapshot.ref
    G = cfg.group_size
    records = []
    total_clips = 0
    grad_clips = 0
    step = 0
    fh = open(log_path, "w") if log_path is not None else None
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, stage, epoch, 0xB47C]).permutation(len(samples))
            for lo in range(0, len(samples), cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                batch = [samples[int(i)] for i in order[lo: lo + cfg.batch_size]]
                old = params  # theta_old refreshed every batch
                ctx, tokens, lps = sample_groups(old, batch, G, cfg.seed, stage, epoch)
                lp_old = lps.sum(axis=1)
                responses = responses_from_batch(tokens, lps)
                breakdowns = [reward_fn(resp.rendered, batch[i // G]) for i, resp in enumerate(responses)]
                rewards = np.array([b.total for b in breakdowns]).reshape(len(batch), G)
                adv = np.concatenate([compute_advantages(r, cfg.adv_epsilon) for r in rewards])
                width = int((tokens >= 0).sum(axis=1).max())
                value, grad, clips, kl = _batched_surrogate_fast(
                    params, ref, ctx, tokens[:, :width], lp_old, adv, G, cfg.beta, cfg.clip_ratio
                )
                grad, gclipped = _clip_grad(grad, cfg.max_grad_norm)
                grad_clips += int(gclipped)
                total_clips += clips
                if cfg.learning_rate != 0.0:
                    params = params.step(grad, cfg.learning_rate)
                rec = {
                    "step": step,
                    "mean_reward": float(rewards.mean()),
                    "mean_kl": float(kl.mean()),
                    "mean_format": float(np.mean([b.r_format for b in breakdowns])),
                    "mean_tiou": float(np.mean([b.r_tiou for b in breakdowns])),
                    "clip_events": clips,
                }
                records.append(rec)
                if fh is not None:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if on_step is not None:
                    on_step(step, params)
                step += 1
    finally:
        if fh is not None:
            fh.close()
    if not params.is_finite():
        raise FloatingPointError("parameters diverged to non-finite values")
    return TrainResult(params, records, total_clips, grad_clips)


def train_source(
    dataset: Sequence[GroundingSample],
    snapshot: PolicySnapshot,
    cfg: GrpoConfig = GrpoConfig(),
    rcfg: RewardConfig = RewardConfig(),
    log_path: Optional[Path] = None,
    on_step: Optional[Callable[[int, PolicyParams], None]] = None,
) -> TrainResult:
    """GRPO on labelled source data with the 0.5/0.5 format + relaxed-tIoU reward."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if any(s.gt_interval is None for s in dataset):
        raise ValueError("source training needs labelled samples")

    def reward(rendered: str, sample: GroundingSample) -> RewardBreakdown:
        return source_reward(rendered, sample.gt_interval, rcfg)

    return run_grpo(dataset, snapshot, cfg, reward, STAGE_SOURCE, log_path, on_step)
