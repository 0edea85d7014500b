"""Format, relaxed-tIoU and combined rewards for source training and target adaptation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

from urpa.core import TimeInterval, relax, tiou
from urpa.policy import FORMAT_RE, parse_answer

if TYPE_CHECKING:
    from urpa.adaptation import PseudoLabel


@dataclass(frozen=True)
class RewardConfig:
    alpha: float = 0.1
    w_format: float = 0.5
    w_acc: float = 0.5
    gamma: float = 10.0

    def __post_init__(self) -> None:
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if abs(self.w_format + self.w_acc - 1.0) > 1e-12:
            raise ValueError("w_format + w_acc must equal 1")
        if not self.gamma > 0:
            raise ValueError("gamma must be > 0")


@dataclass(frozen=True)
class RewardBreakdown:
    r_format: int
    r_tiou: float
    confidence: float
    total: float
    swapped: bool = False


def format_reward(rendered: str) -> int:
    return 1 if FORMAT_RE.match(rendered) else 0


def accuracy_reward(pred: Optional[TimeInterval], gt: TimeInterval, alpha: float) -> float:
    """tIoU against the relaxed ground truth; a missing prediction scores 0."""
    if pred is None:
        return 0.0
    return tiou(pred, relax(gt, alpha))


def _combine(rendered: str, target: TimeInterval, cfg: RewardConfig, confidence: float, alpha: float) -> RewardBreakdown:
    pred = parse_answer(rendered)
    r_format = 1 if pred is not None else 0
    r_tiou = accuracy_reward(pred, target, alpha)
    total = cfg.w_format * r_format + cfg.w_acc * r_tiou * confidence
    return RewardBreakdown(r_format, r_tiou, confidence, total, bool(pred is not None and pred.swapped))


def source_reward(rendered: str, gt: TimeInterval, cfg: RewardConfig = RewardConfig()) -> RewardBreakdown:
    if gt is None:
        raise ValueError("source reward needs a ground-truth interval")
    return _combine(rendered, gt, cfg, 1.0, cfg.alpha)


def weighted_target_reward(
    rendered: str,
    pseudo: "PseudoLabel",
    cfg: RewardConfig = RewardConfig(),
    use_confidence: bool = True,
    relax_pseudo: bool = True,
) -> RewardBreakdown:
    """Target-side reward: only the accuracy term is scaled by pseudo-label confidence.

    ``use_confidence`` and ``relax_pseudo`` switch off the two ingredients for
    ablations.
    """
    c = pseudo.c if use_confidence else 1.0
    # exp(-gamma*u) may underflow to exactly 0 for extreme gamma
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"confidence must be in [0, 1], got {c}")
    alpha = cfg.alpha if relax_pseudo else 0.0
    return _combine(rendered, pseudo.interval, cfg, c, alpha)
