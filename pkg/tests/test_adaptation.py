import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from urpa.adaptation import (
    AdaptationError,
    AdaptConfig,
    PseudoLabel,
    adapt_target,
    build_pseudo_label,
    build_pseudo_labels,
    pseudo_label_from_intervals,
    read_pseudo_labels,
    write_pseudo_labels,
)
from urpa.core import TimeInterval, clamp_interval
from urpa.envgen import generate_domain
from urpa.grpo import STAGE_TARGET, GrpoConfig, run_grpo
from urpa.policy import EOS, PolicyParams, PolicySnapshot, init_policy
from urpa.rewards import RewardBreakdown, RewardConfig, format_reward
from tests.conftest import SMALL_SPEC

unit = st.floats(0.0, 1.0, allow_nan=False)


def test_pseudo_label_example():
    ivs = [TimeInterval(0.1, 0.5), TimeInterval(0.2, 0.6), TimeInterval(0.3, 0.7)]
    pl = pseudo_label_from_intervals("a", ivs, gamma=10)
    assert pl.interval.start == pytest.approx(0.2) and pl.interval.end == pytest.approx(0.6)
    assert pl.u == pytest.approx(0.16330, abs=1e-5)
    assert pl.c == pytest.approx(0.1954, abs=1e-4)
    assert pl.c == math.exp(-10 * pl.u)


def test_pseudo_label_degenerate_cases():
    same = pseudo_label_from_intervals("a", [TimeInterval(0.3, 0.4)] * 5, 10)
    assert same.u == 0.0 and same.c == 1.0
    swapped = pseudo_label_from_intervals("b", [clamp_interval(0.0, 1.0), clamp_interval(1.0, 0.0)], 10)
    assert swapped.u == 0.0 and swapped.c == 1.0 and swapped.interval.as_tuple() == (0.0, 1.0)
    few = pseudo_label_from_intervals("c", [TimeInterval(0.1, 0.2), None, None], 10)
    assert not few.usable and few.n_valid == 1 and few.c == 0.0
    mixed = pseudo_label_from_intervals("d", [TimeInterval(0.1, 0.2), None, TimeInterval(0.1, 0.2)], 10)
    assert mixed.usable and mixed.n_valid == 2 and mixed.u == 0.0


@given(st.lists(st.tuples(unit, unit), min_size=2, max_size=12))
def test_pseudo_interval_within_rollout_range(pairs):
    ivs = [clamp_interval(a, b) for a, b in pairs]
    pl = pseudo_label_from_intervals("x", ivs, 10)
    starts = [iv.start for iv in ivs]
    ends = [iv.end for iv in ivs]
    assert min(starts) <= pl.interval.start <= max(starts)
    assert min(ends) <= pl.interval.end <= max(ends)
    assert pl.u > 0 or pl.c == 1.0
    assert 0.0 <= pl.c <= 1.0


def test_confidence_decreasing_in_u_and_gamma():
    us = np.linspace(0.01, 1, 30)
    for gamma in (2, 5, 10, 25):
        cs = np.exp(-gamma * us)
        assert np.all(np.diff(cs) < 0)
    for u in us:
        cs = [math.exp(-g * u) for g in (2, 5, 10, 25)]
        assert all(a > b for a, b in zip(cs, cs[1:]))


def test_adapt_config_validation():
    for kw in ({"k_shots": 0}, {"gamma": 0}, {"pseudo_group_size": 1}):
        with pytest.raises(ValueError):
            AdaptConfig(**kw)


@pytest.fixture(scope="module")
def shots():
    pool, _ = generate_domain(SMALL_SPEC, 20, seed=1, labelled=False, domain="target")
    return pool


def test_build_pseudo_labels_thread_invariant(shots, monkeypatch):
    params = init_policy(shots[0].context.size, seed=0)
    monkeypatch.setenv("URPA_THREADS", "1")
    a = build_pseudo_labels(params, shots, 8, 10.0, seed=3)
    monkeypatch.setenv("URPA_THREADS", "8")
    b = build_pseudo_labels(params, shots, 8, 10.0, seed=3)
    assert a == b
    one = build_pseudo_label(PolicySnapshot.frozen(params), shots[4], 8, 10.0, seed=3)
    assert one == a[4]
    with pytest.raises(ValueError):
        build_pseudo_label(params, shots[0], 1, 10.0, seed=3)


def test_pseudo_label_file_roundtrip(shots, tmp_path):
    params = init_policy(shots[0].context.size, seed=0)
    labels = build_pseudo_labels(params, shots, 4, 10.0, seed=0)
    labels.append(PseudoLabel("none", None, math.inf, 0.0, 1))
    write_pseudo_labels(tmp_path / "p.jsonl", labels)
    assert read_pseudo_labels(tmp_path / "p.jsonl") == labels


def test_adapt_target_fixed_pseudo_labels(shots, tmp_path):
    source = init_policy(shots[0].context.size, seed=0)
    gcfg = GrpoConfig(batch_size=5, seed=2)
    acfg = AdaptConfig(k_shots=len(shots))
    res = adapt_target(source, shots, gcfg, acfg, log_path=tmp_path / "log.jsonl", pseudo_path=tmp_path / "pl.jsonl")
    assert len(res.log) == 4 and not res.params.equals(source)
    # labels come from the frozen source policy, not the updated one
    assert res.pseudo_labels == build_pseudo_labels(source, shots, 8, 10.0, seed=2)
    assert read_pseudo_labels(tmp_path / "pl.jsonl") == res.pseudo_labels
    again = adapt_target(source, shots, gcfg, acfg)
    assert again.params.equals(res.params)
    refreshed = adapt_target(source, shots, gcfg, AdaptConfig(k_shots=len(shots), refresh_pseudo_labels=True))
    assert not refreshed.params.equals(res.params)


def test_adapt_target_input_checks(shots):
    source = init_policy(shots[0].context.size)
    labelled, _ = generate_domain(SMALL_SPEC, 5, seed=1)
    with pytest.raises(ValueError):
        adapt_target(source, labelled, acfg=AdaptConfig(k_shots=5))
    with pytest.raises(ValueError):
        adapt_target(source, shots, acfg=AdaptConfig(k_shots=5))


def test_all_unusable_aborts(shots):
    p = init_policy(shots[0].context.size)
    b = p.b.copy()
    b[EOS] = 1e3
    with pytest.raises(AdaptationError, match="unusable"):
        adapt_target(PolicyParams(p.U, p.V, b), shots, acfg=AdaptConfig(k_shots=len(shots)))


def test_huge_gamma_reduces_to_format_only_training(shots):
    source = init_policy(shots[0].context.size, seed=0)
    gcfg = GrpoConfig(batch_size=5, seed=1)
    labels = build_pseudo_labels(source, shots, 8, 1e6, seed=1)
    assert all(pl.c == 0.0 for pl in labels if pl.usable)
    res = adapt_target(source, shots, gcfg, AdaptConfig(k_shots=len(shots), gamma=1e6))
    usable = [s for s, pl in zip(shots, labels) if pl.usable]

    def format_only(rendered, sample):
        f = format_reward(rendered)
        return RewardBreakdown(f, 0.0, 0.0, 0.5 * f)

    base = run_grpo(usable, PolicySnapshot.frozen(source), gcfg, format_only, STAGE_TARGET)
    assert res.params.equals(base.params)
