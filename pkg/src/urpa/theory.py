"""Numerical checks of the rollout-standard-deviation consistency argument.

Three ingredients are exercised on distributions whose moments and
divergences are known: the 1/G empirical standard deviation converges at the
Monte-Carlo rate, Pinsker's inequality bounds total variation by
``sqrt(KL/2)``, and bounded second moments turn that into a variance-gap bound
``|var_p - var_q| <= 4 M sqrt(KL)``. A separate probe measures how the rollout
spread of a trained policy stabilizes as G grows.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy import integrate, stats

from urpa.core import GroundingSample
from urpa.grpo import sample_groups
from urpa.parallel import map_chunks
from urpa.policy import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    EOS,
    N_TIMESTAMPS,
    T0,
    PolicyParams,
    next_token_distribution,
    parse_answer,
    render,
)

STAGE_PROBE = 4
_BLOCK = 1024


@dataclass(frozen=True)
class AnalyticDistribution:
    """Gaussian, categorical (finite support) or Gaussian truncated to ``[lo, hi]``."""

    kind: str
    mu: float = 0.0
    sigma: float = 1.0
    lo: float = 0.0
    hi: float = 1.0
    values: tuple = ()
    probs: tuple = ()

    def __post_init__(self) -> None:
        if self.kind not in ("gaussian", "categorical", "truncated-gaussian"):
            raise ValueError(f"unknown kind {self.kind!r}")
        if self.kind == "categorical":
            p = np.asarray(self.probs, dtype=float)
            if len(self.values) != len(p) or len(p) == 0 or (p < 0).any() or abs(p.sum() - 1) > 1e-9:
                raise ValueError("categorical needs matching values and probabilities summing to 1")
        elif not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.kind == "truncated-gaussian" and not self.lo < self.hi:
            raise ValueError("need lo < hi")

    @classmethod
    def gaussian(cls, mu: float, sigma: float) -> "AnalyticDistribution":
        return cls("gaussian", mu=mu, sigma=sigma)

    @classmethod
    def truncated(cls, mu: float, sigma: float, lo: float = 0.0, hi: float = 1.0) -> "AnalyticDistribution":
        return cls("truncated-gaussian", mu=mu, sigma=sigma, lo=lo, hi=hi)

    @classmethod
    def categorical(cls, values: Sequence[float], probs: Sequence[float]) -> "AnalyticDistribution":
        return cls("categorical", values=tuple(float(v) for v in values), probs=tuple(float(p) for p in probs))

    @classmethod
    def point_mass(cls, value: float) -> "AnalyticDistribution":
        return cls.categorical([value], [1.0])

    @property
    def continuous(self) -> bool:
        return self.kind != "categorical"

    def _truncnorm(self):
        a, b = (self.lo - self.mu) / self.sigma, (self.hi - self.mu) / self.sigma
        return stats.truncnorm(a, b, loc=self.mu, scale=self.sigma)

    def mean(self) -> float:
        if self.kind == "gaussian":
            return self.mu
        if self.kind == "categorical":
            return float(np.dot(self.values, self.probs))
        return float(self._truncnorm().mean())

    def variance(self) -> float:
        if self.kind == "gaussian":
            return self.sigma ** 2
        if self.kind == "categorical":
            v, p = np.asarray(self.values), np.asarray(self.probs)
            m = float(np.dot(v, p))
            return float(np.dot(p, (v - m) ** 2))
        return float(self._truncnorm().var())

    def std(self) -> float:
        return math.sqrt(max(self.variance(), 0.0))

    def second_moment(self) -> float:
        return self.variance() + self.mean() ** 2

    def support(self) -> tuple[float, float]:
        if self.kind == "truncated-gaussian":
            return self.lo, self.hi
        if self.kind == "gaussian":
            return self.mu - 40 * self.sigma, self.mu + 40 * self.sigma
        return min(self.values), max(self.values)

    @cached_property
    def _log_norm(self) -> float:
        """log of the normalizing mass plus the Gaussian constant."""
        base = math.log(self.sigma) + 0.5 * math.log(2 * math.pi)
        if self.kind == "gaussian":
            return base
        a, b = (self.lo - self.mu) / self.sigma, (self.hi - self.mu) / self.sigma
        return base + float(np.log(stats.norm.cdf(b) - stats.norm.cdf(a)))

    def logpdf(self, x):
        if self.kind == "categorical":
            raise TypeError("categorical distributions have no density")
        if isinstance(x, (float, int)):
            if self.kind == "truncated-gaussian" and not (self.lo <= x <= self.hi):
                return -math.inf
            z = (x - self.mu) / self.sigma
            return -0.5 * z * z - self._log_norm
        z = (np.asarray(x, dtype=float) - self.mu) / self.sigma
        out = -0.5 * z * z - self._log_norm
        if self.kind == "truncated-gaussian":
            out = np.where((x >= self.lo) & (x <= self.hi), out, -np.inf)
        return out[()] if np.ndim(out) == 0 else out

    def pdf(self, x):
        lp = self.logpdf(x)
        return math.exp(lp) if isinstance(lp, float) else np.exp(lp)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gaussian":
            return self.mu + self.sigma * rng.standard_normal(n)
        if self.kind == "categorical":
            return np.asarray(self.values)[rng.choice(len(self.values), size=n, p=np.asarray(self.probs))]
        return self._truncnorm().ppf(rng.random(n))


def kl_divergence(p: AnalyticDistribution, q: AnalyticDistribution) -> float:
    """KL(p || q); closed form where available, otherwise adaptive quadrature."""
    if p.kind == "gaussian" and q.kind == "gaussian":
        return float(
            math.log(q.sigma / p.sigma) + (p.sigma ** 2 + (p.mu - q.mu) ** 2) / (2 * q.sigma ** 2) - 0.5
        )
    if p.kind == "categorical" and q.kind == "categorical":
        qmap: dict = {}
        for v, w in zip(q.values, q.probs):
            qmap[v] = qmap.get(v, 0.0) + w
        total = 0.0
        for v, w in zip(p.values, p.probs):
            if w == 0:
                continue
            wq = qmap.get(v, 0.0)
            if wq == 0:
                return math.inf
            total += w * math.log(w / wq)
        return max(total, 0.0)
    if p.continuous and q.continuous:
        lo, hi = p.support()
        qlo, qhi = q.support()
        if lo < qlo - 1e-12 or hi > qhi + 1e-12:
            if q.kind == "truncated-gaussian":
                return math.inf

        def f(x):
            px = p.pdf(x)
            return 0.0 if px <= 0 else px * (p.logpdf(x) - q.logpdf(x))

        val, _ = integrate.quad(f, lo, hi, points=[p.mu, q.mu] if p.mu != q.mu else [p.mu], limit=400, epsabs=1e-12)
        return max(float(val), 0.0)
    return math.inf


def tv_distance(p: AnalyticDistribution, q: AnalyticDistribution, abs_tol: float = 1e-6) -> float:
    if p.kind == "categorical" and q.kind == "categorical":
        support = sorted(set(p.values) | set(q.values))
        pm = dict.fromkeys(support, 0.0)
        qm = dict.fromkeys(support, 0.0)
        for v, w in zip(p.values, p.probs):
            pm[v] += w
        for v, w in zip(q.values, q.probs):
            qm[v] += w
        return 0.5 * sum(abs(pm[v] - qm[v]) for v in support)
    if not (p.continuous and q.continuous):
        return 1.0  # a discrete and a continuous law are mutually singular
    lo = min(p.support()[0], q.support()[0])
    hi = max(p.support()[1], q.support()[1])

    val, _ = integrate.quad(
        lambda x: 0.5 * abs(p.pdf(x) - q.pdf(x)), lo, hi, points=[p.mu, q.mu], limit=400, epsabs=abs_tol
    )
    return float(val)


# -- estimator ----------------------------------------------------------------


def draw(dist: AnalyticDistribution, G: int, seed: int) -> np.ndarray:
    """``G`` i.i.d. draws built from fixed-size blocks, each with its own stream.

    Any partitioning of the blocks over workers yields the same sample.
    """
    n_blocks = -(-G // _BLOCK)
    parts = [dist.sample(np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, STAGE_PROBE, b]), _BLOCK) for b in range(n_blocks)]
    return np.concatenate(parts)[:G]


def population_std(x) -> float:
    """1/G standard deviation."""
    x = np.asarray(x, dtype=np.float64)
    if x.size and x.max() == x.min():  # the float mean of equal values can miss them by one ulp
        return 0.0
    return float(np.sqrt(np.mean((x - x.mean()) ** 2)))


def empirical_std(dist: AnalyticDistribution, G: int, seed: int) -> float:
    if G < 2:
        raise ValueError("G must be >= 2")
    return population_std(draw(dist, G, seed))


def convergence_exponent(
    dist: AnalyticDistribution, G_list: Sequence[int] = (8, 64, 512, 4096), reps: int = 100, seed: int = 0
) -> tuple[float, dict]:
    """Slope of log median |sigma_hat_G - sigma| against log G."""
    sigma = dist.std()
    medians = {}
    for G in G_list:
        errs = [abs(empirical_std(dist, G, seed * 1_000_003 + 7919 * G + r) - sigma) for r in range(reps)]
        medians[G] = float(np.median(errs))
    slope = float(np.polyfit(np.log(list(medians)), np.log(list(medians.values())), 1)[0])
    return slope, medians


@dataclass(frozen=True)
class PinskerCheck:
    tv: float
    bound: float
    kl: float
    holds: Optional[bool]


def check_pinsker(p: AnalyticDistribution, q: AnalyticDistribution) -> PinskerCheck:
    """``holds`` is ``None`` when the KL is infinite (check skipped)."""
    kl = kl_divergence(p, q)
    tv = tv_distance(p, q)
    if not math.isfinite(kl):
        return PinskerCheck(tv, math.inf, kl, None)
    bound = math.sqrt(kl / 2)
    # quadrature tolerance on the TV side
    return PinskerCheck(tv, bound, kl, tv <= bound + 1e-6)


@dataclass(frozen=True)
class VarianceGapCheck:
    gap: float
    bound: float
    std_gap: float
    std_bound: float
    epsilon: float
    holds: bool


def check_variance_gap(p: AnalyticDistribution, q: AnalyticDistribution, M: float) -> VarianceGapCheck:
    for d in (p, q):
        if d.second_moment() > M:
            raise ValueError(f"second moment {d.second_moment():.4g} exceeds M={M}")
    eps = kl_divergence(p, q)
    gap = abs(p.variance() - q.variance())
    std_gap = abs(p.std() - q.std())
    bound = 4 * M * math.sqrt(eps) if math.isfinite(eps) else math.inf
    std_bound = math.sqrt(bound)
    holds = gap <= bound + 1e-12 and std_gap <= std_bound + 1e-12
    return VarianceGapCheck(gap, bound, std_gap, std_bound, eps, holds)


def random_gaussian_pairs(n: int, seed: int) -> list:
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x6A55])
    out = []
    for _ in range(n):
        mu = rng.uniform(-2, 2, size=2)
        sd = rng.uniform(0.3, 2.0, size=2)
        out.append((AnalyticDistribution.gaussian(mu[0], sd[0]), AnalyticDistribution.gaussian(mu[1], sd[1])))
    return out


def random_truncated_pairs(n: int, seed: int) -> list:
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x7C0A])
    out = []
    for _ in range(n):
        mu = rng.uniform(0.0, 1.0, size=2)
        sd = rng.uniform(0.03, 0.5, size=2)
        out.append((AnalyticDistribution.truncated(mu[0], sd[0]), AnalyticDistribution.truncated(mu[1], sd[1])))
    return out


# -- probes on a policy -------------------------------------------------------


@dataclass
class TheoremProbe:
    sample_id: str
    endpoint: str
    G: int
    sigma_hat: float
    sigma_pi: float
    epsilon: float = math.nan
    M: float = 1.0
    sigma_star: float = math.nan
    n_valid: int = 0

    def to_record(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def answer_distribution(params: PolicyParams, sample: GroundingSample) -> np.ndarray:
    """Exact joint law of the parsed (start, end) bins given a well-formed answer.

    Once ``<answer>`` is emitted the remaining decoding state depends only on
    the context and the previous token, so the answer block can be enumerated
    over all 101 x 101 timestamp pairs. Returns a (101, 101) matrix indexed by
    (start bin, end bin) after the swap rule, summing to 1.
    """
    ts = np.arange(N_TIMESTAMPS)
    first = next_token_distribution(params, sample, [ANSWER_OPEN])[T0:]
    joint = np.zeros((N_TIMESTAMPS, N_TIMESTAMPS))
    for a in ts:
        if first[a] == 0:
            continue
        second = next_token_distribution(params, sample, [ANSWER_OPEN, T0 + a])[T0:]
        joint[a] = first[a] * second
    close = np.array([
        next_token_distribution(params, sample, [ANSWER_OPEN, T0, T0 + b])[ANSWER_CLOSE] for b in ts
    ])
    eos = next_token_distribution(params, sample, [ANSWER_OPEN, T0, T0, ANSWER_CLOSE])[EOS]
    joint = joint * close[None, :] * eos
    swapped = np.zeros_like(joint)
    lo = np.minimum(ts[:, None], ts[None, :])
    hi = np.maximum(ts[:, None], ts[None, :])
    np.add.at(swapped, (lo, hi), joint)
    return swapped / swapped.sum()


def analytic_endpoint_stds(params: PolicyParams, sample: GroundingSample) -> tuple[float, float]:
    w = answer_distribution(params, sample)
    v = np.arange(N_TIMESTAMPS) / 100
    ps, pe = w.sum(axis=1), w.sum(axis=0)
    def sd(p):
        m = np.dot(p, v)
        return math.sqrt(max(np.dot(p, (v - m) ** 2), 0.0))
    return sd(ps), sd(pe)


def rollout_endpoints(
    params: PolicyParams, samples: Sequence[GroundingSample], G: int, seed: int
) -> list[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Per sample: parsed starts, parsed ends (NaN where malformed) and raw first timestamps."""

    def work(chunk):
        _, tokens, _ = sample_groups(params, chunk, G, seed, STAGE_PROBE)
        out = []
        for i in range(len(chunk)):
            starts, ends, raw = [], [], []
            for row in tokens[i * G:(i + 1) * G]:
                row = row[row >= 0]
                iv = parse_answer(render(row))
                starts.append(np.nan if iv is None else iv.start)
                ends.append(np.nan if iv is None else iv.end)
                ts = row[row >= T0]
                raw.append((ts[0] - T0) / 100 if (iv is not None and len(ts)) else np.nan)
            out.append((np.array(starts), np.array(ends), np.array(raw)))
        return out

    return map_chunks(work, list(samples), chunk_size=4)


def probe_trained_policy(
    params: PolicyParams,
    samples: Sequence[GroundingSample],
    G_list: Sequence[int] = (8, 64, 512),
    seed: int = 0,
    with_analytic: bool = True,
) -> list[TheoremProbe]:
    """sigma_hat on nested prefixes of one long rollout stream per sample."""
    G_max = max(G_list)
    probes = []
    for sample, (starts, ends, _) in zip(samples, rollout_endpoints(params, samples, G_max, seed)):
        sd_pi = analytic_endpoint_stds(params, sample) if with_analytic else (math.nan, math.nan)
        for G in sorted(G_list):
            for name, vals, spi in (("start", starts[:G], sd_pi[0]), ("end", ends[:G], sd_pi[1])):
                ok = vals[~np.isnan(vals)]
                if len(ok) < 2:
                    continue
                probes.append(TheoremProbe(sample.id, name, G, population_std(ok), spi, n_valid=len(ok)))
    return probes


def stabilization_summary(probes: Sequence[TheoremProbe], G_list: Sequence[int]) -> dict:
    """Median |sigma_hat_{G_next} - sigma_hat_G| over samples, per consecutive G pair."""
    G_list = sorted(G_list)
    table: dict = {}
    for p in probes:
        table.setdefault((p.sample_id, p.endpoint), {})[p.G] = p.sigma_hat
    out = {}
    for g0, g1 in zip(G_list, G_list[1:]):
        diffs = [abs(v[g1] - v[g0]) for v in table.values() if g0 in v and g1 in v]
        out[(g0, g1)] = float(np.median(diffs)) if diffs else math.nan
    return out


def write_probes(path, probes: Sequence[TheoremProbe]) -> None:
    with open(path, "w") as fh:
        for p in probes:
            fh.write(json.dumps(p.to_record(), sort_keys=True) + "\n")


# -- suite --------------------------------------------------------------------


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: str
    passed: bool
    detail: dict = field(default_factory=dict)


def theorem_suite(seed: int = 0, n_pinsker: int = 100, n_vargap: int = 200) -> list[CheckResult]:
    results = []
    sigma = 0.05
    g = AnalyticDistribution.gaussian(0.5, sigma)
    s_hat = empirical_std(g, 10_000, seed)
    rel = abs(s_hat - sigma) / sigma
    results.append(CheckResult("std_consistency_G1e4", rel, "< 0.02", rel < 0.02, {"sigma_hat": s_hat}))

    slope, medians = convergence_exponent(g, (8, 64, 512, 4096), 100, seed)
    results.append(
        CheckResult("convergence_exponent", slope, "-0.5 +/- 0.1", abs(slope + 0.5) <= 0.1, {"medians": medians})
    )

    checks = [check_pinsker(p, q) for p, q in random_gaussian_pairs(n_pinsker, seed)]
    viol = sum(1 for c in checks if c.holds is False)
    results.append(CheckResult("pinsker_violations", viol, "== 0", viol == 0, {"n": len(checks)}))

    vchecks = [check_variance_gap(p, q, 1.0) for p, q in random_truncated_pairs(n_vargap, seed)]
    vviol = sum(1 for c in vchecks if not c.holds)
    results.append(CheckResult("variance_gap_violations", vviol, "== 0", vviol == 0, {"n": len(vchecks)}))
    return results
