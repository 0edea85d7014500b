"""Label-free target adaptation from rollout-averaged pseudo labels.

For each unlabelled target sample the source-trained policy draws G rollouts.
Their mean start/end form the pseudo interval, the summed population standard
deviations of the endpoints give the uncertainty ``u``, and ``c = exp(-gamma*u)``
scales the accuracy part of the reward during the GRPO adaptation pass.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from urpa.core import GroundingSample, TimeInterval
from urpa.grpo import STAGE_PSEUDO, STAGE_TARGET, GrpoConfig, TrainResult, run_grpo, sample_groups
from urpa.parallel import map_chunks
from urpa.policy import PolicyParams, PolicySnapshot, parse_answer, render
from urpa.rewards import RewardConfig, weighted_target_reward

log = logging.getLogger(__name__)


class AdaptationError(RuntimeError):
    pass


@dataclass(frozen=True)
class PseudoLabel:
    sample_id: str
    interval: Optional[TimeInterval]
    u: float
    c: float
    n_valid: int

    @property
    def usable(self) -> bool:
        return self.interval is not None and self.n_valid >= 2

    def to_record(self) -> dict:
        return {
            "id": self.sample_id,
            "interval": None if self.interval is None else [self.interval.start, self.interval.end],
            "u": self.u,
            "c": self.c,
            "n_valid": self.n_valid,
        }


@dataclass(frozen=True)
class AdaptConfig:
    k_shots: int = 200
    gamma: float = 10.0
    pseudo_group_size: Optional[int] = None
    refresh_pseudo_labels: bool = False
    learning_rate: Optional[float] = None
    use_confidence: bool = True
    relax_pseudo: bool = True

    def __post_init__(self) -> None:
        if self.k_shots < 1:
            raise ValueError("k_shots must be >= 1")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")
        if self.pseudo_group_size is not None and self.pseudo_group_size < 2:
            raise ValueError("pseudo_group_size must be >= 2")


def _spread(x: np.ndarray) -> float:
    # identical values must give exactly zero spread, hence confidence exactly one
    return 0.0 if x.max() == x.min() else float(x.std())


def pseudo_label_from_intervals(
    sample_id: str, intervals: Sequence[Optional[TimeInterval]], gamma: float
) -> PseudoLabel:
    """Aggregate parsed rollout intervals; unparseable rollouts are left out."""
    valid = [iv for iv in intervals if iv is not None]
    n = len(valid)
    if n < 2:
        return PseudoLabel(sample_id, None, math.inf, 0.0, n)
    starts = np.array([iv.start for iv in valid])
    ends = np.array([iv.end for iv in valid])
    u = float(_spread(starts) + _spread(ends))
    s, e = float(starts.mean()), float(ends.mean())
    # the mean of values in [lo, hi] can land one ulp outside; pin it back
    s = min(max(s, starts.min()), starts.max())
    e = min(max(e, ends.min()), ends.max())
    return PseudoLabel(sample_id, TimeInterval(s, e), u, math.exp(-gamma * u), n)


def build_pseudo_labels(
    params: PolicyParams,
    samples: Sequence[GroundingSample],
    group_size: int,
    gamma: float,
    seed: int,
    epoch: int = 0,
) -> list[PseudoLabel]:
    """Pseudo labels for many samples; chunked so thread count never changes results."""

    def work(chunk):
        _, tokens, _ = sample_groups(params, chunk, group_size, seed, STAGE_PSEUDO, epoch)
        out = []
        for i, s in enumerate(chunk):
            ivs = [parse_answer(render(row[row >= 0])) for row in tokens[i * group_size:(i + 1) * group_size]]
            out.append(pseudo_label_from_intervals(s.id, ivs, gamma))
        return out

    return map_chunks(work, list(samples), chunk_size=16)


def build_pseudo_label(
    snapshot: PolicySnapshot | PolicyParams,
    sample: GroundingSample,
    group_size: int,
    gamma: float,
    seed: int,
) -> PseudoLabel:
    params = snapshot.current if isinstance(snapshot, PolicySnapshot) else snapshot
    if group_size < 2:
        raise ValueError("group_size must be >= 2")
    return build_pseudo_labels(params, [sample], group_size, gamma, seed)[0]


def write_pseudo_labels(path, labels: Sequence[PseudoLabel]) -> None:
    with open(path, "w") as fh:
        for pl in labels:
            fh.write(json.dumps(pl.to_record(), sort_keys=True) + "\n")


def read_pseudo_labels(path) -> list[PseudoLabel]:
    out = []
    with open(path) as fh:
        for line in fh:
            r = json.loads(line)
            iv = None if r["interval"] is None else TimeInterval(*r["interval"])
            out.append(PseudoLabel(r["id"], iv, float(r["u"]), float(r["c"]), int(r["n_valid"])))
    return out


@dataclass
class AdaptResult:
    params: PolicyParams
    log: list
    pseudo_labels: list
    n_unusable: int


def adapt_target(
    source_params: PolicyParams,
    target_samples: Sequence[GroundingSample],
    gcfg: GrpoConfig = GrpoConfig(),
    acfg: AdaptConfig = AdaptConfig(),
    rcfg: RewardConfig = RewardConfig(),
    log_path: Optional[Path] = None,
    pseudo_path: Optional[Path] = None,
) -> AdaptResult:
    """One pass of confidence-weighted GRPO over the K unlabelled target samples."""
    if any(s.gt_interval is not None for s in target_samples):
        raise ValueError("adaptation samples must be unlabelled")
    if len(target_samples) != acfg.k_shots:
        raise ValueError(f"expected K={acfg.k_shots} target samples, got {len(target_samples)}")
    G_pseudo = acfg.pseudo_group_size or gcfg.group_size
    labels = build_pseudo_labels(source_params, target_samples, G_pseudo, acfg.gamma, gcfg.seed)
    if pseudo_path is not None:
        write_pseudo_labels(pseudo_path, labels)
    by_id = {pl.sample_id: pl for pl in labels}
    usable = [s for s in target_samples if by_id[s.id].usable]
    n_unusable = len(target_samples) - len(usable)
    if not usable:
        raise AdaptationError(f"all {len(target_samples)} target samples unusable (fewer than 2 parseable rollouts)")
    if n_unusable:
        log.info("excluded %d unusable target samples", n_unusable)

    current = {"params": source_params}

    def reward(rendered: str, sample: GroundingSample):
        pl = by_id[sample.id]
        if acfg.refresh_pseudo_labels:
            pl = refreshed.get(sample.id, pl)
        return weighted_target_reward(rendered, pl, rcfg, acfg.use_confidence, acfg.relax_pseudo)

    refreshed: dict = {}

    def on_step(step: int, params: PolicyParams) -> None:
        current["params"] = params
        if acfg.refresh_pseudo_labels:
            fresh = build_pseudo_labels(params, usable, G_pseudo, acfg.gamma, gcfg.seed, epoch=step + 1)
            refreshed.update({pl.sample_id: pl for pl in fresh if pl.usable})

    cfg = gcfg if acfg.learning_rate is None else _with_lr(gcfg, acfg.learning_rate)
    snapshot = PolicySnapshot(source_params.copy(), source_params.copy(), source_params.copy())
    res: TrainResult = run_grpo(usable, snapshot, cfg, reward, STAGE_TARGET, log_path, on_step)
    return AdaptResult(res.params, res.log, labels, n_unusable)


def _with_lr(cfg: GrpoConfig, lr: float) -> GrpoConfig:
    from dataclasses import replace

    return replace(cfg, learning_rate=lr)
