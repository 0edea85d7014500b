"""Linear-softmax autoregressive policy over a 114-token response vocabulary.

Logits at step t::

    z_t = (U[:, phase_t] @ [ctx, 1] + V[:, prev_t] + b) / temperature

``ctx`` is the sample's similarity profile concatenated with its query
embedding. ``prev_t`` is the previous token (EOS stands in before the first
token). ``phase_t`` counts the timestamp tokens already emitted (capped at 2),
so the start slot, the end slot and the closing tag each read the context
through their own block of ``U``. All quantities (log-probs, per-state KL and
their gradients) are exact.
"""

from __future__ import annotations

import json
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from urpa.core import GroundingSample, TimeInterval, clamp_interval

# -- vocabulary ---------------------------------------------------------------

THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, ANSWER_CLOSE, EOS = range(5)
N_FILLER = 8
FILLER0 = 5
N_TIMESTAMPS = 101
T0 = FILLER0 + N_FILLER
VOCAB_SIZE = T0 + N_TIMESTAMPS
MAX_LEN = 24
N_PHASES = 3

assert VOCAB_SIZE == 114

_STRUCT_TEXT = {THINK_OPEN: "<think>", THINK_CLOSE: "</think>", ANSWER_OPEN: "<answer>", ANSWER_CLOSE: "</answer>", EOS: ""}

FORMAT_RE = re.compile(r"^<think>([A-Za-z0-9]*)</think><answer>([01]\.\d{2}) ([01]\.\d{2})</answer>$")


def token_name(tok: int) -> str:
    if tok < FILLER0:
        return ("THINK_OPEN", "THINK_CLOSE", "ANSWER_OPEN", "ANSWER_CLOSE", "EOS")[tok]
    if tok < T0:
        return f"F{tok - FILLER0}"
    return f"T{tok - T0:03d}"


def timestamp_token(value: float) -> int:
    """Nearest timestamp token for a fraction in [0, 1]."""
    k = int(round(min(1.0, max(0.0, value)) * 100))
    return T0 + k


def is_timestamp(tokens: np.ndarray) -> np.ndarray:
    return tokens >= T0


def render(tokens: Sequence[int]) -> str:
    parts = []
    prev_ts = False
    for tok in tokens:
        tok = int(tok)
        if tok >= T0:
            if prev_ts:
                parts.append(" ")
            parts.append(f"{(tok - T0) / 100:.2f}")
            prev_ts = True
            continue
        prev_ts = False
        if tok >= FILLER0:
            parts.append(f"F{tok - FILLER0}")
        else:
            parts.append(_STRUCT_TEXT[tok])
    return "".join(parts)


def parse_answer(rendered: str) -> Optional[TimeInterval]:
    """Interval encoded in a well-formed response, or ``None``.

    Reversed answers come back swapped with ``swapped=True``.
    """
    m = FORMAT_RE.match(rendered)
    if m is None:
        return None
    return clamp_interval(float(m.group(2)), float(m.group(3)))


def template_tokens(interval: TimeInterval, n_think: int = 2) -> list[int]:
    """Well-formed token sequence answering ``interval``."""
    think = [FILLER0 + (i % N_FILLER) for i in range(n_think)]
    return (
        [THINK_OPEN] + think + [THINK_CLOSE, ANSWER_OPEN]
        + [timestamp_token(interval.start), timestamp_token(interval.end), ANSWER_CLOSE, EOS]
    )


# -- parameters ---------------------------------------------------------------


@dataclass
class PolicyParams:
    """``U``: (|V|, 3 * (context_dim + 1)), ``V``: (|V|, |V|), ``b``: (|V|,)."""

    U: np.ndarray
    V: np.ndarray
    b: np.ndarray
    temperature: float = 1.0

    def __post_init__(self) -> None:
        self.U = np.asarray(self.U, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.U.shape[0] != VOCAB_SIZE or self.U.shape[1] % N_PHASES:
            raise ValueError(f"bad U shape {self.U.shape}")
        if self.V.shape != (VOCAB_SIZE, VOCAB_SIZE) or self.b.shape != (VOCAB_SIZE,):
            raise ValueError("bad V/b shape")

    @property
    def context_dim(self) -> int:
        return self.U.shape[1] // N_PHASES - 1

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.U.copy(), self.V.copy(), self.b.copy(), self.temperature)

    def with_temperature(self, temperature: float) -> "PolicyParams":
        return PolicyParams(self.U, self.V, self.b, temperature)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.U).all() and np.isfinite(self.V).all() and np.isfinite(self.b).all())

    def flat(self) -> np.ndarray:
        return np.concatenate([self.U.ravel(), self.V.ravel(), self.b])

    def from_flat(self, x: np.ndarray) -> "PolicyParams":
        nu, nv = self.U.size, self.V.size
        return PolicyParams(
            x[:nu].reshape(self.U.shape), x[nu:nu + nv].reshape(self.V.shape), x[nu + nv:], self.temperature
        )

    def step(self, grad: "ParamGrad", lr: float) -> "PolicyParams":
        """Gradient ascent step; returns new params."""
        return PolicyParams(self.U + lr * grad.U, self.V + lr * grad.V, self.b + lr * grad.b, self.temperature)

    def distance(self, other: "PolicyParams") -> float:
        return float(np.linalg.norm(self.flat() - other.flat()))

    def equals(self, other: "PolicyParams") -> bool:
        return (
            self.temperature == other.temperature
            and np.array_equal(self.U, other.U)
            and np.array_equal(self.V, other.V)
            and np.array_equal(self.b, other.b)
        )


@dataclass
class ParamGrad:
    U: np.ndarray
    V: np.ndarray
    b: np.ndarray

    @classmethod
    def zeros_like(cls, params: PolicyParams) -> "ParamGrad":
        return cls(np.zeros_like(params.U), np.zeros_like(params.V), np.zeros_like(params.b))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.U.ravel(), self.V.ravel(), self.b])

    def __add__(self, other: "ParamGrad") -> "ParamGrad":
        return ParamGrad(self.U + other.U, self.V + other.V, self.b + other.b)

    def __sub__(self, other: "ParamGrad") -> "ParamGrad":
        return ParamGrad(self.U - other.U, self.V - other.V, self.b - other.b)

    def scale(self, c: float) -> "ParamGrad":
        return ParamGrad(self.U * c, self.V * c, self.b * c)


@dataclass
class PolicySnapshot:
    current: PolicyParams
    old: PolicyParams
    ref: PolicyParams

    def __post_init__(self) -> None:
        shapes = {(p.U.shape, p.V.shape, p.b.shape) for p in (self.current, self.old, self.ref)}
        if len(shapes) != 1:
            raise ValueError("snapshot parameter shapes differ")

    @classmethod
    def frozen(cls, params: PolicyParams) -> "PolicySnapshot":
        return cls(params.copy(), params.copy(), params.copy())


def init_policy(
    context_dim: int,
    seed: int = 0,
    init_scale: float = 0.0,
    prior_strength: float = 8.0,
    think_close_bonus: float = 1.5,
    temperature: float = 1.0,
) -> PolicyParams:
    """Fresh policy with a response-grammar prior and uniform timestamp preferences.

    The prior stands in for a pretrained model that already follows the
    <think>/<answer> template most of the time but knows nothing about where
    events are. Context weights start at ``init_scale`` Gaussian noise.
    """
    D = context_dim + 1
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, 0x1A17])
    U = init_scale * rng.standard_normal((VOCAB_SIZE, N_PHASES * D))
    V = np.zeros((VOCAB_SIZE, VOCAB_SIZE))
    b = np.zeros(VOCAB_SIZE)
    P = prior_strength
    fillers = slice(FILLER0, T0)
    ts = slice(T0, VOCAB_SIZE)
    V[THINK_OPEN, EOS] = P
    V[fillers, THINK_OPEN] = P
    V[THINK_CLOSE, THINK_OPEN] = P + think_close_bonus
    V[fillers, fillers] = P
    V[THINK_CLOSE, fillers] = P + think_close_bonus
    V[ANSWER_OPEN, THINK_CLOSE] = P
    V[ts, ANSWER_OPEN] = P
    V[EOS, ANSWER_CLOSE] = P
    V[ANSWER_CLOSE, ANSWER_CLOSE] = -P
    # constant-feature columns act as per-phase biases
    U[ts, 1 * D + D - 1] += P
    U[ANSWER_CLOSE, 2 * D + D - 1] += P
    return PolicyParams(U, V, b, temperature)


# -- batched internals --------------------------------------------------------


def _ctx_aug(contexts: np.ndarray) -> np.ndarray:
    contexts = np.atleast_2d(np.asarray(contexts, dtype=np.float64))
    return np.hstack([contexts, np.ones((contexts.shape[0], 1))])


def _phase_tables(params: PolicyParams, ctx_aug: np.ndarray) -> np.ndarray:
    """Context contribution per (sample, phase): shape (N, 3, |V|)."""
    D = ctx_aug.shape[1]
    if params.U.shape[1] != N_PHASES * D:
        raise ValueError(f"context dim {D - 1} does not match policy ({params.context_dim})")
    U3 = params.U.reshape(VOCAB_SIZE, N_PHASES, D)
    return np.einsum("nd,vpd->npv", ctx_aug, U3)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def _states(tokens: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Flatten the valid positions of a padded (N, T) token array (pad = -1).

    Returns row index, previous token, phase and emitted token per visited state.
    """
    tokens = np.asarray(tokens)
    mask = tokens >= 0
    prev = np.full_like(tokens, EOS)
    prev[:, 1:] = np.where(mask[:, :-1], tokens[:, :-1], EOS)
    phase = np.zeros_like(tokens)
    phase[:, 1:] = np.minimum(np.cumsum((tokens >= T0) & mask, axis=1)[:, :-1], N_PHASES - 1)
    rows = np.broadcast_to(np.arange(tokens.shape[0])[:, None], tokens.shape)
    return rows[mask], prev[mask], phase[mask], tokens[mask]


def _state_logits(params: PolicyParams, C: np.ndarray, rows: np.ndarray, prev: np.ndarray, phase: np.ndarray) -> np.ndarray:
    z = C[rows, phase] + params.V.T[prev] + params.b
    return z / params.temperature


def _backprop(
    params: PolicyParams, gz: np.ndarray, ctx_aug: np.ndarray, rows: np.ndarray, prev: np.ndarray, phase: np.ndarray
) -> ParamGrad:
    """Pull gradients w.r.t. scaled logits ``gz`` (M, |V|) of visited states back to parameters."""
    gz = gz / params.temperature
    Vn = VOCAB_SIZE
    D = ctx_aug.shape[1]
    gb = gz.sum(axis=0)
    idx = (prev[:, None] * Vn + np.arange(Vn)[None, :]).ravel()
    gV = np.bincount(idx, weights=gz.ravel(), minlength=Vn * Vn).reshape(Vn, Vn).T
    gU = np.zeros((Vn, N_PHASES, D))
    for p in range(N_PHASES):
        sel = phase == p
        if sel.any():
            gU[:, p, :] = gz[sel].T @ ctx_aug[rows[sel]]
    return ParamGrad(gU.reshape(Vn, N_PHASES * D), gV, gb)


def pad_tokens(seqs: Sequence[Sequence[int]], length: Optional[int] = None) -> np.ndarray:
    length = length or max(1, max((len(s) for s in seqs), default=1))
    out = np.full((len(seqs), length), -1, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


def _forward(params: PolicyParams, contexts: np.ndarray, tokens: np.ndarray):
    ctx = _ctx_aug(contexts)
    rows, prev, phase, tok = _states(tokens)
    logp = _log_softmax(_state_logits(params, _phase_tables(params, ctx), rows, prev, phase))
    return ctx, rows, prev, phase, tok, logp


def sequence_logprobs(params: PolicyParams, contexts: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """Per-token log-probabilities (N, T); padded positions are 0."""
    tokens = np.asarray(tokens)
    _, rows, _, _, tok, logp = _forward(params, contexts, tokens)
    out = np.zeros(tokens.shape)
    out[tokens >= 0] = logp[np.arange(len(tok)), tok]
    return out


def batch_logprob_and_grad(
    params: PolicyParams, contexts: np.ndarray, tokens: np.ndarray, weights: Optional[np.ndarray] = None
) -> tuple[np.ndarray, Optional[ParamGrad]]:
    """Sequence log-probs (N,) and the gradient of ``sum_n weights[n] * logprob[n]``."""
    n = np.asarray(tokens).shape[0]
    ctx, rows, prev, phase, tok, logp = _forward(params, contexts, tokens)
    m = np.arange(len(tok))
    lp = np.bincount(rows, weights=logp[m, tok], minlength=n)
    if weights is None:
        return lp, None
    gz = -np.exp(logp)
    gz[m, tok] += 1.0
    gz *= np.asarray(weights, dtype=np.float64)[rows][:, None]
    return lp, _backprop(params, gz, ctx, rows, prev, phase)


def batch_kl_and_grad(
    params: PolicyParams,
    params_ref: PolicyParams,
    contexts: np.ndarray,
    tokens: np.ndarray,
    weights: Optional[np.ndarray] = None,
) -> tuple[np.ndarray, Optional[ParamGrad]]:
    """Exact per-state KL(pi || pi_ref) summed along each sequence, plus weighted gradient."""
    n = np.asarray(tokens).shape[0]
    ctx, rows, prev, phase, tok, logp = _forward(params, contexts, tokens)
    logq = _log_softmax(_state_logits(params_ref, _phase_tables(params_ref, ctx), rows, prev, phase))
    p = np.exp(logp)
    diff = logp - logq
    kl_t = (p * diff).sum(axis=-1)
    kl = np.bincount(rows, weights=np.maximum(kl_t, 0.0), minlength=n)
    if weights is None:
        return kl, None
    gz = p * (diff - kl_t[:, None])
    gz *= np.asarray(weights, dtype=np.float64)[rows][:, None]
    return kl, _backprop(params, gz, ctx, rows, prev, phase)


def surrogate_terms(
    params: PolicyParams,
    params_ref: PolicyParams,
    contexts: np.ndarray,
    tokens: np.ndarray,
    lp_weights: np.ndarray,
    kl_weights: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, ParamGrad]:
    """Log-probs, KLs and the gradient of ``sum lp_weights*logprob - sum kl_weights*KL`` in one pass.

    The GRPO update needs both terms on the same visited states; fusing them
    halves the forward cost.
    """
    n = np.asarray(tokens).shape[0]
    ctx, rows, prev, phase, tok, logp = _forward(params, contexts, tokens)
    logq = _log_softmax(_state_logits(params_ref, _phase_tables(params_ref, ctx), rows, prev, phase))
    m = np.arange(len(tok))
    p = np.exp(logp)
    lp = np.bincount(rows, weights=logp[m, tok], minlength=n)
    diff = logp - logq
    kl_t = (p * diff).sum(axis=-1)
    kl = np.bincount(rows, weights=np.maximum(kl_t, 0.0), minlength=n)
    wl = np.asarray(lp_weights, dtype=np.float64)[rows][:, None]
    wk = np.asarray(kl_weights, dtype=np.float64)[rows][:, None]
    gz = -wl * p - wk * (p * (diff - kl_t[:, None]))
    gz[m, tok] += wl[:, 0]
    return lp, kl, _backprop(params, gz, ctx, rows, prev, phase)


def sample_batch(
    params: PolicyParams, contexts: np.ndarray, uniforms: Optional[np.ndarray], greedy: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Sample (or greedily decode) one response per context row.

    ``uniforms`` (N, MAX_LEN) drive inverse-CDF sampling so that every row's
    randomness is fixed in advance. Returns padded tokens and per-token log-probs.
    """
    ctx = _ctx_aug(contexts)
    N = ctx.shape[0]
    C = _phase_tables(params, ctx)
    VT = params.V.T
    rows = np.arange(N)
    tokens = np.full((N, MAX_LEN), -1, dtype=np.int64)
    lps = np.zeros((N, MAX_LEN))
    prev = np.full(N, EOS, dtype=np.int64)
    phase = np.zeros(N, dtype=np.int64)
    alive = np.ones(N, dtype=bool)
    for t in range(MAX_LEN):
        z = (C[rows, phase] + VT[prev] + params.b) / params.temperature
        logp = _log_softmax(z)
        if greedy:
            tok = logp.argmax(axis=1)
        else:
            cdf = np.cumsum(np.exp(logp), axis=1)
            u = uniforms[:, t] * cdf[:, -1]
            tok = np.minimum((cdf <= u[:, None]).sum(axis=1), VOCAB_SIZE - 1)
            # never pick a zero-probability token through rounding at the CDF edge
            bad = np.isneginf(logp[rows, tok])
            if bad.any():
                tok[bad] = logp[bad].argmax(axis=1)
        tokens[alive, t] = tok[alive]
        lps[alive, t] = logp[rows, tok][alive]
        phase = np.minimum(phase + (tok >= T0), N_PHASES - 1)
        prev = tok
        alive = alive & (tok != EOS)
        if not alive.any():
            break
    return tokens, lps


# -- per-sample API -----------------------------------------------------------


@dataclass
class TokenResponse:
    tokens: tuple
    per_token_logprobs: np.ndarray
    rendered: str = field(default="")

    def __post_init__(self) -> None:
        self.tokens = tuple(int(t) for t in self.tokens)
        self.per_token_logprobs = np.asarray(self.per_token_logprobs, dtype=np.float64)
        if len(self.per_token_logprobs) != len(self.tokens):
            raise ValueError("logprob/token length mismatch")
        if not self.rendered:
            self.rendered = render(self.tokens)

    @property
    def logprob(self) -> float:
        return float(self.per_token_logprobs.sum())

    def interval(self) -> Optional[TimeInterval]:
        return parse_answer(self.rendered)


def responses_from_batch(tokens: np.ndarray, lps: np.ndarray) -> list[TokenResponse]:
    out = []
    for row, lp in zip(tokens, lps):
        n = int((row >= 0).sum())
        out.append(TokenResponse(row[:n], lp[:n]))
    return out


def sample_response(
    snapshot: PolicySnapshot | PolicyParams, sample: GroundingSample, rng: np.random.Generator
) -> TokenResponse:
    """Draw one response from the current policy using fresh draws from ``rng``."""
    params = snapshot.current if isinstance(snapshot, PolicySnapshot) else snapshot
    u = rng.random((1, MAX_LEN))
    tokens, lps = sample_batch(params, sample.context[None, :], u)
    return responses_from_batch(tokens, lps)[0]


def greedy_response(params: PolicyParams, sample: GroundingSample) -> TokenResponse:
    tokens, lps = sample_batch(params, sample.context[None, :], None, greedy=True)
    return responses_from_batch(tokens, lps)[0]


def logprob(params: PolicyParams, sample: GroundingSample, tokens: Sequence[int]) -> float:
    lp, _ = batch_logprob_and_grad(params, sample.context[None, :], pad_tokens([list(tokens)]))
    return float(lp[0])


def grad_logprob(params: PolicyParams, sample: GroundingSample, tokens: Sequence[int]) -> ParamGrad:
    _, g = batch_logprob_and_grad(params, sample.context[None, :], pad_tokens([list(tokens)]), np.ones(1))
    return g


def kl_to_ref(params: PolicyParams, params_ref: PolicyParams, sample: GroundingSample, tokens: Sequence[int]) -> float:
    kl, _ = batch_kl_and_grad(params, params_ref, sample.context[None, :], pad_tokens([list(tokens)]))
    return float(kl[0])


def grad_kl_to_ref(
    params: PolicyParams, params_ref: PolicyParams, sample: GroundingSample, tokens: Sequence[int]
) -> ParamGrad:
    _, g = batch_kl_and_grad(params, params_ref, sample.context[None, :], pad_tokens([list(tokens)]), np.ones(1))
    return g


def next_token_distribution(params: PolicyParams, sample: GroundingSample, prefix: Sequence[int] = ()) -> np.ndarray:
    """Exact distribution of the token following ``prefix``."""
    _, _, _, _, _, logp = _forward(params, sample.context[None, :], pad_tokens([list(prefix) + [0]]))
    return np.exp(logp[-1])


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: PolicyParams) -> None:
    path = Path(path)
    header = {
        "version": CHECKPOINT_VERSION,
        "context_dim": params.context_dim,
        "vocab": VOCAB_SIZE,
        "phases": N_PHASES,
        "temperature": params.temperature,
    }
    lines = [json.dumps(header, sort_keys=True)]
    for name, mat in (("U", params.U), ("V", params.V), ("b", params.b[None, :])):
        lines.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
        lines.extend(" ".join(f"{v:.9g}" for v in row) for row in mat)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> PolicyParams:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    if header.get("version") != CHECKPOINT_VERSION or header.get("vocab") != VOCAB_SIZE:
        raise ValueError(f"{path}: unsupported checkpoint header {header}")
    mats = {}
    i = 1
    while i < len(lines):
        name, r, c = lines[i].split()
        r, c = int(r), int(c)
        rows = lines[i + 1: i + 1 + r]
        if len(rows) != r:
            raise ValueError(f"{path}: truncated matrix {name}")
        mats[name] = np.array([[float(x) for x in row.split()] for row in rows]).reshape(r, c)
        i += 1 + r
    return PolicyParams(mats["U"], mats["V"], mats["b"][0], float(header["temperature"]))


def quantize(params: PolicyParams) -> PolicyParams:
    """Round parameters to checkpoint precision (9 significant digits)."""
    def q(a):
        return np.array([float(f"{v:.9g}") for v in a.ravel()]).reshape(a.shape)
    return PolicyParams(q(params.U), q(params.V), q(params.b), params.temperature)
