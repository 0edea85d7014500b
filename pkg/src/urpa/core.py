"""Domain types and interval arithmetic on the normalized timeline [0, 1]."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Optional

import numpy as np

if TYPE_CHECKING:
    from urpa.envgen import DomainSpec

DOMAINS = ("source", "target")
SPLITS = ("train", "test")


@dataclass(frozen=True)
class TimeInterval:
    """Closed interval ``[start, end]`` with ``0 <= start <= end <= 1``.

    ``swapped`` records that the endpoints arrived in reverse order and were
    exchanged by :func:`clamp_interval`. It does not take part in equality.
    """

    start: float
    end: float
    swapped: bool = field(default=False, compare=False)

    def __post_init__(self) -> None:
        s, e = float(self.start), float(self.end)
        if not (math.isfinite(s) and math.isfinite(e)):
            raise ValueError(f"non-finite interval endpoints ({s}, {e})")
        if not (0.0 <= s <= e <= 1.0):
            raise ValueError(f"invalid interval [{s}, {e}]; need 0 <= start <= end <= 1")
        object.__setattr__(self, "start", s)
        object.__setattr__(self, "end", e)

    @property
    def duration(self) -> float:
        return self.end - self.start

    def contains(self, other: "TimeInterval") -> bool:
        return self.start <= other.start and other.end <= self.end

    def as_tuple(self) -> tuple[float, float]:
        return (self.start, self.end)


def tiou(pred: TimeInterval, gt: TimeInterval) -> float:
    """Temporal IoU of two intervals.

    Degenerate unions (both intervals zero-length) score 1 when the two points
    coincide and 0 otherwise.
    """
    inter = max(0.0, min(pred.end, gt.end) - max(pred.start, gt.start))
    union = max(pred.end, gt.end) - min(pred.start, gt.start)
    if union <= 0.0:
        return 1.0 if (pred.start == gt.start and pred.end == gt.end) else 0.0
    return min(1.0, inter / union)


def tiou_arrays(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Vectorized :func:`tiou` over ``(n, 2)`` arrays of ``[start, end]`` rows."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    inter = np.maximum(0.0, np.minimum(pred[:, 1], gt[:, 1]) - np.maximum(pred[:, 0], gt[:, 0]))
    union = np.maximum(pred[:, 1], gt[:, 1]) - np.minimum(pred[:, 0], gt[:, 0])
    same = (pred[:, 0] == gt[:, 0]) & (pred[:, 1] == gt[:, 1])
    out = np.where(same, 1.0, 0.0)
    pos = union > 0.0
    out[pos] = np.minimum(1.0, inter[pos] / union[pos])
    return out


def relax(gt: TimeInterval, alpha: float) -> TimeInterval:
    """Widen both boundaries by ``alpha`` times the duration, clipped to [0, 1]."""
    if not alpha >= 0.0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    width = gt.end - gt.start
    return TimeInterval(max(0.0, gt.start - alpha * width), min(1.0, gt.end + alpha * width))


def clamp_interval(raw_start: float, raw_end: float) -> TimeInterval:
    """Clip raw endpoints into [0, 1]; reversed endpoints are swapped and flagged."""
    s, e = float(raw_start), float(raw_end)
    if not (math.isfinite(s) and math.isfinite(e)):
        raise ValueError(f"non-finite endpoints ({raw_start}, {raw_end})")
    s = min(1.0, max(0.0, s))
    e = min(1.0, max(0.0, e))
    if e < s:
        return TimeInterval(e, s, swapped=True)
    return TimeInterval(s, e)


@dataclass
class GroundingSample:
    """One <video, query> pair as seen by the policy.

    ``similarity_profile`` is the per-frame query similarity (length L) and
    ``query_embedding`` the query vector (length d); both are float32.
    """

    id: str
    similarity_profile: np.ndarray
    query_embedding: np.ndarray
    gt_interval: Optional[TimeInterval] = None
    domain_tag: str = "source"

    def __post_init__(self) -> None:
        if self.domain_tag not in DOMAINS:
            raise ValueError(f"domain_tag must be one of {DOMAINS}, got {self.domain_tag!r}")
        self.similarity_profile = np.asarray(self.similarity_profile, dtype=np.float32)
        self.query_embedding = np.asarray(self.query_embedding, dtype=np.float32)

    @property
    def context(self) -> np.ndarray:
        return np.concatenate([self.similarity_profile, self.query_embedding]).astype(np.float64)

    def without_label(self) -> "GroundingSample":
        return GroundingSample(self.id, self.similarity_profile, self.query_embedding, None, self.domain_tag)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, GroundingSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.domain_tag == other.domain_tag
            and self.gt_interval == other.gt_interval
            and np.array_equal(self.similarity_profile, other.similarity_profile)
            and np.array_equal(self.query_embedding, other.query_embedding)
        )


@dataclass(frozen=True)
class DatasetManifest:
    n_samples: int
    seed: int
    domain_params: "DomainSpec"
    split: str = "train"

    def __post_init__(self) -> None:
        if self.split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def check_few_shot(k: int, n: int) -> None:
    """Reject target budgets that are not small relative to the source set (K <= N/10)."""
    if k > n / 10:
        raise ValueError(f"target budget K={k} is not << N={n} (need K <= N/10)")
