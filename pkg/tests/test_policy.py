import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from urpa.core import TimeInterval
from urpa.policy import (
    ANSWER_CLOSE,
    ANSWER_OPEN,
    EOS,
    FILLER0,
    MAX_LEN,
    N_PHASES,
    T0,
    THINK_CLOSE,
    THINK_OPEN,
    VOCAB_SIZE,
    PolicyParams,
    PolicySnapshot,
    batch_kl_and_grad,
    grad_kl_to_ref,
    grad_logprob,
    greedy_response,
    init_policy,
    kl_to_ref,
    load_checkpoint,
    logprob,
    next_token_distribution,
    parse_answer,
    quantize,
    render,
    sample_batch,
    sample_response,
    save_checkpoint,
    template_tokens,
    timestamp_token,
    token_name,
)
from tests.conftest import random_params


# -- independent reference implementation ------------------------------------


def _ref_logits(params, ctx, prev, phase):
    D = params.context_dim + 1
    x = np.append(ctx, 1.0)
    z = params.U[:, phase * D:(phase + 1) * D] @ x + params.V[:, prev] + params.b
    return z / params.temperature


def _log_softmax(z):
    m = z.max()
    return z - m - np.log(np.exp(z - m).sum())


def ref_states(params, ctx, tokens):
    prev, phase = EOS, 0
    for tok in tokens:
        yield _log_softmax(_ref_logits(params, ctx, prev, phase)), tok
        phase = min(phase + (tok >= T0), N_PHASES - 1)
        prev = tok


def ref_logprob(params, ctx, tokens):
    return sum(lp[tok] for lp, tok in ref_states(params, ctx, tokens))


def ref_kl(params, ref, ctx, tokens):
    total = 0.0
    for (lp, _), (lq, _) in zip(ref_states(params, ctx, tokens), ref_states(ref, ctx, tokens)):
        total += float(np.exp(lp) @ (lp - lq))
    return total


def _directional_check(f, params, grad, rng, n_dirs=3, h=1e-6):
    x0 = params.flat()
    g = grad.flat()
    errs = []
    for _ in range(n_dirs):
        d = rng.standard_normal(x0.size)
        d /= np.linalg.norm(d)
        fd = (f(params.from_flat(x0 + h * d)) - f(params.from_flat(x0 - h * d))) / (2 * h)
        an = float(g @ d)
        errs.append(abs(fd - an) / max(abs(an), abs(fd), 1e-3))
    return max(errs)


# -- vocabulary, rendering, parsing -------------------------------------------


def test_vocabulary_layout():
    assert VOCAB_SIZE == 114
    assert token_name(THINK_OPEN) == "THINK_OPEN" and token_name(FILLER0 + 7) == "F7"
    assert token_name(T0) == "T000" and token_name(VOCAB_SIZE - 1) == "T100"
    assert timestamp_token(0.234) == T0 + 23 and timestamp_token(1.7) == T0 + 100


def test_parse_examples():
    assert parse_answer("<think>F1F2</think><answer>0.20 0.60</answer>").as_tuple() == (0.2, 0.6)
    assert parse_answer("<think>F1F2<answer>0.20 0.60</answer>") is None
    toks = [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, T0 + 70, T0 + 40, ANSWER_CLOSE, EOS]
    iv = parse_answer(render(toks))
    assert iv.as_tuple() == (0.4, 0.7) and iv.swapped


def test_render_of_malformed_sequences_fails_regex():
    assert parse_answer(render([THINK_OPEN, T0, THINK_CLOSE, EOS])) is None
    assert parse_answer(render([ANSWER_OPEN, T0, T0 + 1, ANSWER_CLOSE, EOS])) is None
    assert parse_answer(render([THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, T0, ANSWER_CLOSE, EOS])) is None


@given(st.integers(0, 100), st.integers(0, 100), st.lists(st.integers(0, 7), max_size=10))
def test_render_parse_roundtrip(a, b, fillers):
    toks = [THINK_OPEN] + [FILLER0 + f for f in fillers] + [THINK_CLOSE, ANSWER_OPEN, T0 + a, T0 + b, ANSWER_CLOSE, EOS]
    iv = parse_answer(render(toks))
    assert iv.as_tuple() == (min(a, b) / 100, max(a, b) / 100)
    assert iv.swapped == (a > b)


def test_template_tokens_roundtrip():
    toks = template_tokens(TimeInterval(0.12, 0.87))
    assert parse_answer(render(toks)).as_tuple() == (0.12, 0.87)


# -- sampling -----------------------------------------------------------------


def test_softmax_normalization(small_samples):
    params = random_params(small_samples[0].context.size, 1, scale=2.0)
    for prefix in ([], [THINK_OPEN], [THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, T0 + 3]):
        p = next_token_distribution(params, small_samples[0], prefix)
        assert abs(p.sum() - 1.0) < 1e-12


def test_first_token_frequencies_match_softmax(small_samples):
    s = small_samples[0]
    params = random_params(s.context.size, 2, scale=1.0)
    params = PolicyParams(params.U, np.zeros_like(params.V), params.b)
    n = 10_000
    tokens, _ = sample_batch(params, np.repeat(s.context[None], n, axis=0), np.random.default_rng(0).random((n, MAX_LEN)))
    freq = np.bincount(tokens[:, 0], minlength=VOCAB_SIZE) / n
    assert np.abs(freq - next_token_distribution(params, s)).max() < 0.015


def test_near_zero_temperature_is_greedy(small_samples):
    s = small_samples[1]
    params = random_params(s.context.size, 3).with_temperature(1e-4)
    g = greedy_response(params, s)
    rng = np.random.default_rng(5)
    for _ in range(20):
        assert sample_response(params, s, rng).tokens == g.tokens


def test_collision_rate_bounded_by_first_token_collision(small_samples):
    s = small_samples[2]
    params = random_params(s.context.size, 4, scale=1.0)
    params = PolicyParams(params.U, np.zeros_like(params.V), params.b)
    p0 = next_token_distribution(params, s)
    n = 4000
    ctx = np.repeat(s.context[None], 2 * n, axis=0)
    tokens, _ = sample_batch(params, ctx, np.random.default_rng(1).random((2 * n, MAX_LEN)))
    same = np.mean([np.array_equal(tokens[2 * i], tokens[2 * i + 1]) for i in range(n)])
    bound = float(p0 @ p0)
    assert same <= bound + 3 * np.sqrt(bound / n)


def test_successive_rollouts_uncorrelated(default_samples):
    s = default_samples[0]
    params = init_policy(s.context.size, seed=0)
    n = 10_000
    ctx = np.repeat(s.context[None], 2 * n, axis=0)
    tokens, _ = sample_batch(params, ctx, np.random.default_rng(7).random((2 * n, MAX_LEN)))
    stat = (tokens >= 0).sum(axis=1).astype(float)
    r = np.corrcoef(stat[0::2], stat[1::2])[0, 1]
    assert abs(r) < 3 / np.sqrt(n)


def test_sample_response_logprobs_consistent(small_samples):
    s = small_samples[3]
    params = random_params(s.context.size, 5)
    rng = np.random.default_rng(0)
    for _ in range(10):
        r = sample_response(PolicySnapshot.frozen(params), s, rng)
        assert (r.per_token_logprobs <= 0).all()
        assert len(r.tokens) <= MAX_LEN
        assert r.tokens[-1] == EOS or len(r.tokens) == MAX_LEN
        assert logprob(params, s, r.tokens) == pytest.approx(r.logprob, abs=1e-10)


# -- log-probabilities and KL -------------------------------------------------


def test_uniform_single_token_logprob(small_samples):
    s = small_samples[0]
    params = init_policy(s.context.size, prior_strength=0.0, think_close_bonus=0.0)
    assert logprob(params, s, [EOS]) == pytest.approx(np.log(1 / 114), abs=1e-12)
    assert np.log(1 / 114) == pytest.approx(-4.7362, abs=1e-4)


def test_length_one_sequences_sum_to_one(small_samples):
    s = small_samples[0]
    params = random_params(s.context.size, 6)
    total = sum(np.exp(logprob(params, s, [t])) for t in range(VOCAB_SIZE))
    assert total == pytest.approx(1.0, abs=1e-12)


def test_logprob_matches_reference(small_samples):
    rng = np.random.default_rng(0)
    for i, s in enumerate(small_samples[:10]):
        params = random_params(s.context.size, 10 + i).with_temperature(float(rng.uniform(0.5, 2.0)))
        toks = list(rng.integers(0, VOCAB_SIZE, size=int(rng.integers(1, MAX_LEN))))
        assert logprob(params, s, toks) == pytest.approx(ref_logprob(params, s.context, toks), rel=1e-12, abs=1e-10)


def test_kl_matches_reference_and_vanishes_on_identity(small_samples):
    rng = np.random.default_rng(1)
    for i, s in enumerate(small_samples[:10]):
        p = random_params(s.context.size, 30 + i)
        q = random_params(s.context.size, 60 + i)
        toks = list(rng.integers(0, VOCAB_SIZE, size=8))
        assert kl_to_ref(p, q, s, toks) == pytest.approx(ref_kl(p, q, s.context, toks), rel=1e-10)
        assert kl_to_ref(p, p, s, toks) == 0.0


def test_kl_nonnegative_over_many_pairs(small_samples):
    rng = np.random.default_rng(2)
    ctx = np.stack([s.context for s in small_samples])
    worst = np.inf
    for i in range(420):
        p = random_params(ctx.shape[1], 1000 + i, scale=float(rng.uniform(0.1, 3.0)))
        q = random_params(ctx.shape[1], 5000 + i, scale=float(rng.uniform(0.1, 3.0)))
        toks = rng.integers(0, VOCAB_SIZE, size=(len(small_samples), 6))
        kl, _ = batch_kl_and_grad(p, q, ctx, toks)
        worst = min(worst, kl.min())
    assert worst >= 0.0


# -- gradients ----------------------------------------------------------------


def test_grad_logprob_finite_differences(small_samples):
    rng = np.random.default_rng(3)
    for i in range(20):
        s = small_samples[i % len(small_samples)]
        params = random_params(s.context.size, 100 + i).with_temperature(float(rng.uniform(0.7, 1.5)))
        toks = list(rng.integers(0, VOCAB_SIZE, size=int(rng.integers(1, 12))))
        err = _directional_check(lambda p: logprob(p, s, toks), params, grad_logprob(params, s, toks), rng)
        assert err < 1e-5


def test_grad_kl_finite_differences(small_samples):
    rng = np.random.default_rng(4)
    for i in range(20):
        s = small_samples[i % len(small_samples)]
        params = random_params(s.context.size, 200 + i)
        ref = random_params(s.context.size, 300 + i)
        toks = list(rng.integers(0, VOCAB_SIZE, size=6))
        err = _directional_check(lambda p: kl_to_ref(p, ref, s, toks), params, grad_kl_to_ref(params, ref, s, toks), rng)
        assert err < 1e-5


def test_saturated_position_has_zero_gradient(small_samples):
    s = small_samples[0]
    params = init_policy(s.context.size, prior_strength=0.0, think_close_bonus=0.0)
    b = params.b.copy()
    b[THINK_OPEN] = 1e3
    params = PolicyParams(params.U, params.V, b)
    g = grad_logprob(params, s, [THINK_OPEN])
    assert np.abs(g.flat()).max() == 0.0


def test_expected_score_of_length_one_sequences_is_zero(small_samples):
    s = small_samples[4]
    params = random_params(s.context.size, 7)
    total = sum(np.exp(logprob(params, s, [t])) * grad_logprob(params, s, [t]).flat() for t in range(VOCAB_SIZE))
    assert np.abs(total).max() < 1e-12


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path, small_samples):
    params = random_params(small_samples[0].context.size, 8).with_temperature(0.7)
    path = tmp_path / "p.ckpt"
    save_checkpoint(path, params)
    back = load_checkpoint(path)
    assert back.equals(quantize(params))
    assert np.abs(back.flat() - params.flat()).max() <= 1e-8 * np.abs(params.flat()).max()
    save_checkpoint(tmp_path / "q.ckpt", back)
    assert (tmp_path / "q.ckpt").read_text() == path.read_text()
    assert load_checkpoint(tmp_path / "q.ckpt").equals(back)


def test_checkpoint_header_checked(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_text('{"version": 9, "vocab": 114}\n')
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_params_validation():
    p = init_policy(6)
    with pytest.raises(ValueError):
        PolicyParams(p.U, p.V, p.b, temperature=0.0)
    with pytest.raises(ValueError):
        PolicyParams(p.U[:, :5], p.V, p.b)
