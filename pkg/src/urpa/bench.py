"""Evaluation metrics, the staged experiment pipeline and ablation sweeps."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from urpa.adaptation import AdaptConfig, adapt_target, write_pseudo_labels
from urpa.config import ConfigError, ExperimentConfig
from urpa.core import GroundingSample, tiou
from urpa.envgen import generate_domain, read_dataset, subsample_target, write_dataset
from urpa.grpo import train_source
from urpa.parallel import map_chunks
from urpa.policy import (
    PolicyParams,
    PolicySnapshot,
    init_policy,
    load_checkpoint,
    parse_answer,
    render,
    sample_batch,
    save_checkpoint,
)
from urpa.theory import probe_trained_policy, stabilization_summary, write_probes

log = logging.getLogger(__name__)

THRESHOLDS = (0.3, 0.5, 0.7)
TEST_OFFSET = 10 ** 6
TARGET_SEED_OFFSET = 1000
_EVAL_CHUNK = 64


# -- metrics ------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    r_at: dict
    miou: float
    n_eval: int
    format_rate: float
    seed: int = 0

    def __post_init__(self) -> None:
        vals = list(self.r_at.values()) + [self.miou, self.format_rate]
        if any(not (0.0 <= v <= 1.0) for v in vals):
            raise ValueError("metric fractions must lie in [0, 1]")

    def to_record(self) -> dict:
        return {
            "r_at": {f"{m:.1f}": v for m, v in sorted(self.r_at.items())},
            "miou": self.miou,
            "n_eval": self.n_eval,
            "format_rate": self.format_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EvalReport":
        return cls({float(k): v for k, v in rec["r_at"].items()}, rec["miou"], rec["n_eval"], rec["format_rate"], rec["seed"])

    def to_json(self) -> str:
        return json.dumps(self.to_record(), sort_keys=True)


def report_from_ious(ious: Sequence[float], n_wellformed: int, seed: int = 0) -> EvalReport:
    """Aggregate per-sample tIoUs; malformed outputs must already be scored 0."""
    n = len(ious)
    if n == 0:
        raise ValueError("empty test set")
    ious = [float(v) for v in ious]
    # exact summation keeps the report independent of sample order
    r_at = {m: sum(1 for v in ious if v >= m) / n for m in THRESHOLDS}
    return EvalReport(r_at, math.fsum(ious) / n, n, n_wellformed / n, seed)


def greedy_intervals(params: PolicyParams, samples: Sequence[GroundingSample]) -> list:
    def work(chunk):
        ctx = np.stack([s.context for s in chunk])
        tokens, _ = sample_batch(params, ctx, None, greedy=True)
        return [parse_answer(render(row[row >= 0])) for row in tokens]

    return map_chunks(work, list(samples), _EVAL_CHUNK)


def evaluate(snapshot: PolicySnapshot | PolicyParams, test_samples: Sequence[GroundingSample], seed: int = 0) -> EvalReport:
    """Greedy decoding scored against the unrelaxed ground truth."""
    if len(test_samples) == 0:
        raise ValueError("empty test set")
    if any(s.gt_interval is None for s in test_samples):
        raise ValueError("evaluation needs labelled samples")
    params = snapshot.current if isinstance(snapshot, PolicySnapshot) else snapshot
    preds = greedy_intervals(params, test_samples)
    ious = [0.0 if p is None else tiou(p, s.gt_interval) for p, s in zip(preds, test_samples)]
    return report_from_ious(ious, sum(p is not None for p in preds), seed)


# -- artifacts ----------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _atomic_jsonl(path, records: Iterable[dict]) -> None:
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


STAGES = ("gen", "train-source", "eval-source", "adapt", "eval-adapted", "theorem")


@dataclass
class RunResult:
    out_dir: Path
    source_on_source: Optional[EvalReport] = None
    source_only: Optional[EvalReport] = None
    adapted: Optional[EvalReport] = None
    stabilization: dict = field(default_factory=dict)
    completed: list = field(default_factory=list)
    skipped: list = field(default_factory=list)


class _Manifest:
    """Tracks completed stages with content hashes of their outputs."""

    def __init__(self, out: Path, config: ExperimentConfig):
        self.path = out / "manifest.json"
        self.out = out
        # the output location itself does not affect any artifact
        content = {k: v for k, v in config.to_dict().items() if k != "output_dir"}
        self.config_hash = hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()
        self.data = {"config_sha256": self.config_hash, "seed": config.seed, "stages": {}}
        if self.path.exists():
            try:
                old = json.loads(self.path.read_text())
            except json.JSONDecodeError:
                old = None
            if old and old.get("config_sha256") == self.config_hash:
                self.data = old

    def done(self, stage: str) -> bool:
        entry = self.data["stages"].get(stage)
        if entry is None:
            return False
        for name, digest in entry["files"].items():
            p = self.out / name
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True

    def invalidate_from(self, stage: str) -> None:
        for s in STAGES[STAGES.index(stage):]:
            self.data["stages"].pop(s, None)

    def record(self, stage: str, files: Sequence[str], seeds: dict) -> None:
        self.data["stages"][stage] = {
            "files": {name: sha256_file(self.out / name) for name in files},
            "seeds": seeds,
        }
        atomic_write_text(self.path, json.dumps(self.data, sort_keys=True, indent=1) + "\n")


def seeds_for(config: ExperimentConfig) -> dict:
    s = config.seed
    return {
        "source_data": s,
        "target_data": s + TARGET_SEED_OFFSET,
        "subsample": s,
        "init": s,
        "grpo": s,
        "probe": s,
    }


def run_experiment(
    config: ExperimentConfig,
    out_dir=None,
    stop_after: Optional[str] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> RunResult:
    """Run the staged pipeline, resuming from the first stage whose outputs are missing or stale.

    Each stage reloads its inputs from disk so a resumed run computes exactly
    what an uninterrupted run would.
    """
    config.validate()
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}")
    out = Path(out_dir if out_dir is not None else config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "config.json", config.canonical_json() + "\n")
    man = _Manifest(out, config)
    seeds = seeds_for(config)
    res = RunResult(out)
    say = progress or (lambda msg: log.info(msg))
    stale = False

    def should_run(stage: str) -> bool:
        nonlocal stale
        if not stale and man.done(stage):
            res.skipped.append(stage)
            return False
        if not stale:
            man.invalidate_from(stage)
        stale = True
        return True

    def finished(stage: str) -> bool:
        return stop_after == stage

    # gen
    if should_run("gen"):
        say("gen: generating source, target pool and test splits")
        src_train, _ = generate_domain(config.source, config.n_source, seeds["source_data"], domain="source")
        src_test, _ = generate_domain(
            config.source, config.eval_set_size, seeds["source_data"], domain="source", offset=TEST_OFFSET
        )
        pool, _ = generate_domain(config.target, config.n_target_pool, seeds["target_data"], labelled=False, domain="target")
        tgt_test, _ = generate_domain(
            config.target, config.eval_set_size, seeds["target_data"], domain="target", offset=TEST_OFFSET
        )
        shots = subsample_target(pool, config.adapt.k_shots, seeds["subsample"])
        write_dataset(out / "source_train.jsonl", src_train, config.source)
        write_dataset(out / "source_test.jsonl", src_test, config.source)
        write_dataset(out / "target_pool.jsonl", pool, config.target)
        write_dataset(out / "target_test.jsonl", tgt_test, config.target)
        write_dataset(out / "target_shots.jsonl", shots, config.target)
        files = ["source_train.jsonl", "source_test.jsonl", "target_pool.jsonl", "target_test.jsonl", "target_shots.jsonl"]
        man.record("gen", files, {k: seeds[k] for k in ("source_data", "target_data", "subsample")})
        res.completed.append("gen")
    if finished("gen"):
        return res

    if should_run("train-source"):
        say(f"train-source: {config.source_steps} GRPO steps")
        train = read_dataset(out / "source_train.jsonl")
        p0 = init_policy(train[0].context.shape[0], seed=seeds["init"])
        tr = train_source(train, PolicySnapshot.frozen(p0), config.source_grpo(), config.reward, out / "source_train_log.jsonl")
        save_checkpoint(out / "source.ckpt", tr.params)
        man.record("train-source", ["source.ckpt", "source_train_log.jsonl"], {"init": seeds["init"], "grpo": seeds["grpo"]})
        res.completed.append("train-source")
    if finished("train-source"):
        return res
    source = load_checkpoint(out / "source.ckpt")

    if should_run("eval-source"):
        say("eval-source: source-only policy on source and target test sets")
        res.source_on_source = evaluate(source, read_dataset(out / "source_test.jsonl"), config.seed)
        res.source_only = evaluate(source, read_dataset(out / "target_test.jsonl"), config.seed)
        atomic_write_text(out / "eval_source_on_source.json", res.source_on_source.to_json() + "\n")
        atomic_write_text(out / "eval_source_only.json", res.source_only.to_json() + "\n")
        man.record("eval-source", ["eval_source_on_source.json", "eval_source_only.json"], {})
        res.completed.append("eval-source")
    else:
        res.source_on_source = EvalReport.from_record(json.loads((out / "eval_source_on_source.json").read_text()))
        res.source_only = EvalReport.from_record(json.loads((out / "eval_source_only.json").read_text()))
    if finished("eval-source"):
        return res

    if should_run("adapt"):
        say(f"adapt: K={config.adapt.k_shots} unlabelled target samples, gamma={config.adapt.gamma}")
        shots = read_dataset(out / "target_shots.jsonl")
        ar = adapt_target(
            source, shots, config.adapt_grpo(), config.adapt, config.reward,
            out / "adapt_log.jsonl", out / "pseudo_labels.jsonl",
        )
        save_checkpoint(out / "adapted.ckpt", ar.params)
        man.record("adapt", ["adapted.ckpt", "adapt_log.jsonl", "pseudo_labels.jsonl"], {"grpo": seeds["grpo"]})
        res.completed.append("adapt")
    if finished("adapt"):
        return res
    adapted = load_checkpoint(out / "adapted.ckpt")

    if should_run("eval-adapted"):
        say("eval-adapted: adapted policy on the target test set")
        res.adapted = evaluate(adapted, read_dataset(out / "target_test.jsonl"), config.seed)
        atomic_write_text(out / "eval_adapted.json", res.adapted.to_json() + "\n")
        man.record("eval-adapted", ["eval_adapted.json"], {})
        res.completed.append("eval-adapted")
    else:
        res.adapted = EvalReport.from_record(json.loads((out / "eval_adapted.json").read_text()))
    if finished("eval-adapted"):
        return res

    if should_run("theorem"):
        say(f"theorem: rollout-std probes at G={list(config.theorem_G)}")
        probe_set = read_dataset(out / "target_test.jsonl")[: config.theorem_samples]
        probes = probe_trained_policy(adapted, probe_set, config.theorem_G, seeds["probe"]) if probe_set else []
        write_probes(out / "theorem_probes.tmp.jsonl", probes)
        os.replace(out / "theorem_probes.tmp.jsonl", out / "theorem_probes.jsonl")
        summary = stabilization_summary(probes, config.theorem_G)
        atomic_write_text(
            out / "theorem_summary.json",
            json.dumps({f"{a}->{b}": v for (a, b), v in summary.items()}, sort_keys=True) + "\n",
        )
        man.record("theorem", ["theorem_probes.jsonl", "theorem_summary.json"], {"probe": seeds["probe"]})
        res.completed.append("theorem")
    summary = json.loads((out / "theorem_summary.json").read_text())
    res.stabilization = summary
    return res


# -- ablations ----------------------------------------------------------------

ABLATIONS = ("no_confidence", "no_relaxation", "gamma_sweep", "g_sweep", "k_sweep")
GAMMA_GRID = (2.0, 5.0, 10.0, 25.0)
G_GRID = (4, 8, 16, 32)
K_GRID = (100, 200)


@dataclass
class AblationRow:
    name: str
    miou: float
    r_at: dict
    format_rate: float
    per_seed_miou: list
    delta_miou: float = 0.0

    def to_record(self) -> dict:
        return {
            "name": self.name,
            "miou": self.miou,
            "delta_miou": self.delta_miou,
            "r_at": {f"{m:.1f}": v for m, v in sorted(self.r_at.items())},
            "format_rate": self.format_rate,
            "per_seed_miou": self.per_seed_miou,
        }


@dataclass
class AblationTable:
    rows: list
    seeds: list
    source_only: AblationRow
    spreads: dict = field(default_factory=dict)

    def row(self, name: str) -> AblationRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)

    def records(self) -> list:
        recs = [dict(self.source_only.to_record(), kind="source_only")]
        recs += [dict(r.to_record(), kind="variant") for r in self.rows]
        recs += [{"kind": "spread", "name": k, "miou_spread": v} for k, v in sorted(self.spreads.items())]
        return recs


def _variant_settings(variants: Iterable[str]) -> list[tuple[str, dict]]:
    """(row name, overrides) per row; ``no_relaxation`` also drops confidence, as in the cumulative ablation."""
    variants = set(variants)
    unknown = sorted(variants - set(ABLATIONS))
    if unknown:
        raise ConfigError(f"unknown ablation variant(s): {', '.join(unknown)}")
    out = [("urpa", {})]
    if "no_confidence" in variants:
        out.append(("no_confidence", {"use_confidence": False}))
    if "no_relaxation" in variants:
        out.append(("no_relaxation", {"use_confidence": False, "relax_pseudo": False}))
    if "gamma_sweep" in variants:
        out += [(f"gamma={g:g}", {"gamma": g}) for g in GAMMA_GRID]
    if "g_sweep" in variants:
        out += [(f"G={g}", {"group_size": g}) for g in G_GRID]
    if "k_sweep" in variants:
        out += [(f"K={k}", {"k_shots": k}) for k in K_GRID]
    return out


class SeedContext:
    """Source model and target splits for one seed, shared by every ablation row."""

    def __init__(self, config: ExperimentConfig, seed: int, cache_dir: Optional[Path] = None):
        self.config = config
        self.seed = seed
        cfg = replace(config, seed=seed)
        s = seeds_for(cfg)
        self.pool, _ = generate_domain(config.target, config.n_target_pool, s["target_data"], labelled=False, domain="target")
        self.test, _ = generate_domain(
            config.target, config.eval_set_size, s["target_data"], domain="target", offset=TEST_OFFSET
        )
        self.source = self._source(cfg, s, cache_dir)

    def _source(self, cfg: ExperimentConfig, s: dict, cache_dir: Optional[Path]) -> PolicyParams:
        path = None
        if cache_dir is not None:
            key = hashlib.sha256(
                json.dumps(
                    {"source": cfg.to_dict()["source"], "grpo": cfg.to_dict()["grpo"], "reward": cfg.to_dict()["reward"],
                     "n": cfg.n_source, "steps": cfg.source_steps, "seed": self.seed},
                    sort_keys=True,
                ).encode()
            ).hexdigest()[:16]
            path = Path(cache_dir) / f"source_{key}.ckpt"
            if path.exists():
                return load_checkpoint(path)
        train, _ = generate_domain(cfg.source, cfg.n_source, s["source_data"], domain="source")
        p0 = init_policy(train[0].context.shape[0], seed=s["init"])
        tr = train_source(train, PolicySnapshot.frozen(p0), cfg.source_grpo(), cfg.reward)
        if path is None:
            import tempfile

            with tempfile.TemporaryDirectory() as d:
                save_checkpoint(Path(d) / "s.ckpt", tr.params)
                return load_checkpoint(Path(d) / "s.ckpt")
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, tr.params)
        return load_checkpoint(path)

    def source_only(self) -> EvalReport:
        return evaluate(self.source, self.test, self.seed)

    def adapted(self, overrides: dict) -> EvalReport:
        cfg = replace(self.config, seed=self.seed)
        adapt_kw = {k: v for k, v in overrides.items() if k in ("use_confidence", "relax_pseudo", "gamma", "k_shots")}
        acfg = replace(cfg.adapt, **adapt_kw)
        gcfg = cfg.adapt_grpo()
        if "group_size" in overrides:
            gcfg = replace(gcfg, group_size=overrides["group_size"])
            acfg = replace(acfg, pseudo_group_size=None)
        shots = subsample_target(self.pool, acfg.k_shots, self.seed)
        res = adapt_target(self.source, shots, gcfg, acfg, cfg.reward)
        return evaluate(res.params, self.test, self.seed)


def _mean_row(name: str, reports: Sequence[EvalReport]) -> AblationRow:
    n = len(reports)
    return AblationRow(
        name,
        math.fsum(r.miou for r in reports) / n,
        {m: math.fsum(r.r_at[m] for r in reports) / n for m in THRESHOLDS},
        math.fsum(r.format_rate for r in reports) / n,
        [r.miou for r in reports],
    )


def run_ablation(
    config: ExperimentConfig,
    variants: Iterable[str],
    seeds: Optional[Sequence[int]] = None,
    cache_dir=None,
    contexts: Optional[dict] = None,
    progress: Optional[Callable[[str], None]] = None,
) -> AblationTable:
    """Mean EvalReports over shared seeds for full URPA and each requested variant.

    ``contexts`` may carry pre-built :class:`SeedContext` objects keyed by seed
    so several sweeps can reuse one set of source models.
    """
    config.validate()
    settings = _variant_settings(variants)
    for name, ov in settings:
        if ov.get("k_shots", config.adapt.k_shots) * 10 > config.n_target_pool:
            raise ConfigError(f"{name}: K exceeds the few-shot bound for the target pool")
    seeds = list(seeds) if seeds is not None else [config.seed + i for i in range(5)]
    contexts = {} if contexts is None else contexts
    say = progress or (lambda msg: log.info(msg))
    per_row: dict = {name: [] for name, _ in settings}
    base_reports = []
    for seed in seeds:
        if seed not in contexts:
            say(f"seed {seed}: training source model")
            contexts[seed] = SeedContext(config, seed, cache_dir)
        ctx = contexts[seed]
        base_reports.append(ctx.source_only())
        for name, ov in settings:
            per_row[name].append(ctx.adapted(ov))
        say(f"seed {seed}: {len(settings)} adaptation runs done")
    rows = [_mean_row(name, per_row[name]) for name, _ in settings]
    base = rows[0].miou
    for r in rows:
        r.delta_miou = r.miou - base
    src = _mean_row("source_only", base_reports)
    src.delta_miou = src.miou - base
    spreads = {}
    for prefix in ("gamma=", "G=", "K="):
        vals = [r.miou for r in rows if r.name.startswith(prefix)]
        if vals:
            spreads[prefix.rstrip("=")] = max(vals) - min(vals)
    return AblationTable(rows, seeds, src, spreads)


def write_ablation(path, table: AblationTable) -> None:
    _atomic_jsonl(path, table.records())


def format_table(rows: Sequence[tuple], header: Sequence[str]) -> str:
    cells = [list(map(str, header))] + [[f"{c:.4f}" if isinstance(c, float) else str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def report_row(name: str, r: EvalReport) -> tuple:
    return (name, r.r_at[0.3], r.r_at[0.5], r.r_at[0.7], r.miou, r.format_rate, r.n_eval)


REPORT_HEADER = ("policy", "R@0.3", "R@0.5", "R@0.7", "mIoU", "format", "n")
