"""Synthetic source/target grounding data with controllable distribution shift.

A "video" is reduced to its similarity profile: per-frame cosine similarity
between frame features and the query embedding. The generator performs that
perception step itself, so downstream policies only have to localize.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from urpa.core import GroundingSample, TimeInterval, clamp_interval

FORMAT_VERSION = 1


@dataclass(frozen=True)
class DomainSpec:
    duration_shape_a: float = 2.0
    duration_shape_b: float = 5.0
    annotation_bias: float = 0.0
    feature_noise_sigma: float = 0.0
    class_rotation_angle: float = 0.0
    n_query_classes: int = 4
    profile_length: int = 100
    embed_dim: int = 8

    def validate(self) -> "DomainSpec":
        if not (self.duration_shape_a > 0 and self.duration_shape_b > 0):
            raise ValueError("duration shape parameters must be positive")
        if self.profile_length < 8:
            raise ValueError("profile_length must be >= 8")
        if self.embed_dim < 4:
            raise ValueError("embed_dim must be >= 4")
        if not (2 <= self.n_query_classes <= self.embed_dim):
            raise ValueError("n_query_classes must be in [2, embed_dim]")
        if not self.feature_noise_sigma >= 0:
            raise ValueError("feature_noise_sigma must be >= 0")
        for name in ("annotation_bias", "class_rotation_angle"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        return self

    @property
    def mean_duration(self) -> float:
        return self.duration_shape_a / (self.duration_shape_a + self.duration_shape_b)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        return cls(**d)


@dataclass(frozen=True)
class GenerationReport:
    n_generated: int
    mean_event_duration: float
    mean_profile_snr: float
    seed: int


def _q9(x: float) -> float:
    return float(f"{x:.9g}")


def _sample_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, index])))


def _generate_one(spec: DomainSpec, seed: int, index: int, domain: str, labelled: bool):
    rng = _sample_rng(seed, index)
    L, d = spec.profile_length, spec.embed_dim
    cls = int(rng.integers(spec.n_query_classes))
    duration = float(rng.beta(spec.duration_shape_a, spec.duration_shape_b))
    start = float(rng.uniform(0.0, 1.0 - duration))
    end = start + duration

    query = np.zeros(d)
    query[cls] = 1.0
    partner = np.zeros(d)
    partner[(cls + 1) % d] = 1.0
    theta = spec.class_rotation_angle
    event_feat = np.cos(theta) * query + np.sin(theta) * partner

    centers = (np.arange(L) + 0.5) / L
    inside = (centers >= start) & (centers <= end)

    background = rng.standard_normal((L, d))
    background -= np.outer(background @ query, query)
    background /= np.linalg.norm(background, axis=1, keepdims=True)
    feats = np.where(inside[:, None], event_feat[None, :], background)
    if spec.feature_noise_sigma > 0:
        feats = feats + rng.standard_normal((L, d)) * (spec.feature_noise_sigma / np.sqrt(d))
    norms = np.linalg.norm(feats, axis=1)
    profile = np.clip((feats @ query) / np.maximum(norms, 1e-12), -1.0, 1.0).astype(np.float32)

    gt = None
    if labelled:
        shift = spec.annotation_bias * duration
        g = clamp_interval(start + shift, end + shift)
        gt = TimeInterval(_q9(g.start), _q9(g.end))

    in_vals = profile[inside].astype(np.float64)
    out_vals = profile[~inside].astype(np.float64)
    if in_vals.size and out_vals.size:
        contrast = in_vals.mean() - out_vals.mean()
        spread = np.sqrt(0.5 * (in_vals.var() + out_vals.var()))
        snr = contrast / max(spread, 1e-6)
    else:
        snr = 0.0

    sample = GroundingSample(
        id=f"{domain}-{seed}-{index:06d}",
        similarity_profile=profile,
        query_embedding=query.astype(np.float32),
        gt_interval=gt,
        domain_tag=domain,
    )
    return sample, duration, snr


def generate_domain(
    spec: DomainSpec,
    n: int,
    seed: int,
    labelled: bool = True,
    domain: str = "source",
    offset: int = 0,
) -> tuple[list[GroundingSample], GenerationReport]:
    """Draw ``n`` samples; sample ``i`` uses its own stream keyed by ``(seed, offset + i)``.

    ``offset`` lets disjoint train/test splits share one seed.
    """
    spec.validate()
    if n < 1:
        raise ValueError("n must be >= 1")
    samples, durations, snrs = [], [], []
    for i in range(n):
        s, dur, snr = _generate_one(spec, seed, offset + i, domain, labelled)
        samples.append(s)
        durations.append(dur)
        snrs.append(snr)
    report = GenerationReport(
        n_generated=n,
        mean_event_duration=float(np.mean(durations)),
        mean_profile_snr=float(np.mean(snrs)),
        seed=seed,
    )
    return samples, report


def subsample_target(dataset: Sequence[GroundingSample], k: int, seed: int) -> list[GroundingSample]:
    """Uniform draw of ``k`` samples without replacement, labels stripped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(dataset):
        raise ValueError(f"k={k} exceeds dataset size {len(dataset)}")
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x5AB5])
    idx = rng.choice(len(dataset), size=k, replace=False)
    return [dataset[int(i)].without_label() for i in idx]


# -- persistence --------------------------------------------------------------


class DatasetFormatError(ValueError):
    pass


def _fmt(values: Iterable[float]) -> str:
    return "[" + ",".join(f"{float(v):.9g}" for v in values) + "]"


def _record_line(s: GroundingSample) -> str:
    gt = "null" if s.gt_interval is None else _fmt(s.gt_interval.as_tuple())
    return (
        f'{{"id":{json.dumps(s.id)},"profile":{_fmt(s.similarity_profile)},'
        f'"query":{_fmt(s.query_embedding)},"gt":{gt},"domain":{json.dumps(s.domain_tag)}}}'
    )


def write_dataset(path, samples: Sequence[GroundingSample], spec: Optional[DomainSpec] = None) -> None:
    path = Path(path)
    header = {"version": FORMAT_VERSION, "spec": None if spec is None else spec.to_dict(), "n": len(samples)}
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for s in samples:
            fh.write(_record_line(s) + "\n")
    os.replace(tmp, path)


def _parse_record(obj: dict) -> GroundingSample:
    gt = obj["gt"]
    return GroundingSample(
        id=str(obj["id"]),
        similarity_profile=np.asarray(obj["profile"], dtype=np.float32),
        query_embedding=np.asarray(obj["query"], dtype=np.float32),
        gt_interval=None if gt is None else TimeInterval(float(gt[0]), float(gt[1])),
        domain_tag=obj["domain"],
    )


def read_dataset_with_header(path) -> tuple[dict, list[GroundingSample]]:
    path = Path(path)
    samples: list[GroundingSample] = []
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file, missing header (line 1)")
    try:
        header = json.loads(lines[0])
        if header.get("version") != FORMAT_VERSION:
            raise DatasetFormatError(f"{path}: line 1: unsupported version {header.get('version')!r}")
        n = int(header["n"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DatasetFormatError):
            raise
        raise DatasetFormatError(f"{path}: line 1: malformed header ({exc})") from exc
    profile_len = query_len = None
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            s = _parse_record(json.loads(line))
            if profile_len is None:
                profile_len, query_len = len(s.similarity_profile), len(s.query_embedding)
            elif (len(s.similarity_profile), len(s.query_embedding)) != (profile_len, query_len):
                raise ValueError("inconsistent vector lengths")
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
            raise DatasetFormatError(
                f"{path}: line {lineno}: malformed record ({exc}); last good line {lineno - 1}"
            ) from exc
        samples.append(s)
    if len(samples) != n:
        raise DatasetFormatError(
            f"{path}: header declares {n} records but found {len(samples)}; "
            f"last good line {len(samples) + 1} (truncated file?)"
        )
    return header, samples


def read_dataset(path) -> list[GroundingSample]:
    return read_dataset_with_header(path)[1]
