"""Causal attention over accumulated per-degree feature states.

The hidden state for each degree ``p`` is a denominator vector ``Z_p``
(length ``m_p``) and a numerator matrix ``S_p`` (``m_p x d_V``). All degrees
are stored stacked in one array so a token update is a single rank-one add;
``AttentionState.degree_numerator(p)`` gives the per-degree view.

Taylor coefficients and multiplicities are folded into the key features when
they are accumulated, so reading the state at a query is a plain dot product.
Accumulators are always float64.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, NamedTuple, Sequence

import numpy as np

from .basis import DEFAULT_ELEMENT_BUDGET, BasisFamily, hidden_state_elements
from .exceptions import (
    DegenerateDenominatorError,
    DomainError,
    ElementBudgetError,
    EmptyContextError,
)
from .featuremap import (
    extended_transpose,
    fill_group_features_t,
    lower_features_t,
    packed_features_t,
)

GUARD_RTOL = 1e-12
PRECISIONS = {"double": np.float64, "single": np.float32}
ON_DEGENERATE = ("raise", "flag", "fallback")

# Feature rows per block in batched updates; keeps temporaries cache-sized.
_UPDATE_ROWS = 512
_STREAM_BLOCK = 256


@dataclass(frozen=True)
class TokenTriple:
    query: np.ndarray
    key: np.ndarray
    value: np.ndarray


class Tokens(NamedTuple):
    """A token sequence as three row-aligned arrays."""

    queries: np.ndarray  # (n, d_K)
    keys: np.ndarray  # (n, d_K)
    values: np.ndarray  # (n, d_V)

    def __len__(self):
        return self.queries.shape[0]

    @property
    def key_width(self):
        return self.queries.shape[1]

    @property
    def value_width(self):
        return self.values.shape[1]

    def triple(self, t: int) -> TokenTriple:
        return TokenTriple(self.queries[t], self.keys[t], self.values[t])


def as_tokens(tokens, dtype=np.float64) -> Tokens:
    """Normalize arrays or a sequence of :class:`TokenTriple` into :class:`Tokens`."""
    if isinstance(tokens, Tokens) or (
        isinstance(tokens, tuple) and len(tokens) == 3 and all(np.ndim(a) == 2 for a in tokens)
    ):
        q, k, v = (np.asarray(a, dtype=dtype) for a in tokens)
    else:
        tokens = list(tokens)
        if not tokens:
            raise DomainError("token sequence is empty")
        q = np.array([t.query for t in tokens], dtype=dtype)
        k = np.array([t.key for t in tokens], dtype=dtype)
        v = np.array([t.value for t in tokens], dtype=dtype)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise DomainError("queries, keys and values must be 2-D")
    if q.shape != k.shape or v.shape[0] != q.shape[0]:
        raise DomainError(f"inconsistent token shapes {q.shape}, {k.shape}, {v.shape}")
    if q.shape[0] == 0:
        raise DomainError("token sequence is empty")
    return Tokens(q, k, v)


@dataclass
class AttentionState:
    numerator: np.ndarray  # stacked S_p, (m_total, d_V)
    denominator: np.ndarray  # stacked Z_p, (m_total,)
    token_count: int
    offsets: tuple[int, ...]

    @property
    def value_width(self) -> int:
        return self.numerator.shape[1]

    @property
    def element_count(self) -> int:
        return self.numerator.size + self.denominator.size

    @property
    def nbytes(self) -> int:
        return self.numerator.nbytes + self.denominator.nbytes

    def degree_numerator(self, p: int) -> np.ndarray:
        return self.numerator[self.offsets[p]:self.offsets[p + 1]]

    def degree_denominator(self, p: int) -> np.ndarray:
        return self.denominator[self.offsets[p]:self.offsets[p + 1]]

    def copy(self) -> "AttentionState":
        return AttentionState(
            self.numerator.copy(), self.denominator.copy(), self.token_count, self.offsets
        )


@dataclass(frozen=True)
class AttentionOutput:
    output: np.ndarray
    denominator: float
    numerator: np.ndarray


@dataclass(frozen=True)
class AttentionOutputs:
    """Per-token results of a whole sequence.

    ``flagged`` marks tokens whose denominator failed the guard; their
    ``outputs`` rows are NaN or the degree-zero fallback. ``log_shift`` is set
    by the softmax oracle, whose numerators and denominators are scaled by
    ``exp(-log_shift)``.
    """

    outputs: np.ndarray
    denominators: np.ndarray
    numerators: np.ndarray
    flagged: np.ndarray
    log_shift: np.ndarray | None = None

    def __len__(self):
        return self.outputs.shape[0]

    def __getitem__(self, t: int) -> AttentionOutput:
        return AttentionOutput(self.outputs[t], float(self.denominators[t]), self.numerators[t])


def init_state(family: BasisFamily, value_width: int, *,
               max_elements: int = DEFAULT_ELEMENT_BUDGET) -> AttentionState:
    if value_width < 1:
        raise DomainError(f"value_width must be >= 1, got {value_width}")
    elements = hidden_state_elements(family.key_width, value_width, family.truncation_order)
    if elements > max_elements:
        raise ElementBudgetError(elements, max_elements)
    m = family.total_size
    return AttentionState(np.zeros((m, value_width)), np.zeros(m), 0, family.offsets)


def combine_states(a: AttentionState, b: AttentionState) -> AttentionState:
    """Associative combine: elementwise sum of accumulators."""
    if a.numerator.shape != b.numerator.shape:
        raise DomainError("cannot combine states of different shapes")
    return AttentionState(
        a.numerator + b.numerator,
        a.denominator + b.denominator,
        a.token_count + b.token_count,
        a.offsets,
    )


def _check_state(state: AttentionState, family: BasisFamily):
    if state.offsets != family.offsets:
        raise DomainError("state layout does not match basis family")


def _weighted_key_features(keys, family, dtype=np.float64):
    # (m, n) in float64, alpha_p * C_p folded in
    f = packed_features_t(extended_transpose(keys, family.key_width, dtype), family)
    return f.astype(np.float64, copy=False) * family.packed_weights[:, None]


def update_state(state: AttentionState, key, value, family: BasisFamily, *,
                 precision: str = "double") -> AttentionState:
    """Accumulate one token (1-D ``key``/``value``) or a block of tokens (2-D).

    Mutates and returns ``state``.
    """
    _check_state(state, family)
    dtype = PRECISIONS[precision]
    key = np.asarray(key)
    value = np.asarray(value, dtype=np.float64)
    if key.ndim == 1:
        if key.shape[0] != family.key_width or value.shape != (state.value_width,):
            raise DomainError(f"token widths {key.shape}, {value.shape} do not match state")
        fk = _weighted_key_features(key[None, :], family, dtype)[:, 0]
        state.denominator += fk
        state.numerator += fk[:, None] * value
        state.token_count += 1
        return state
    if key.ndim != 2 or key.shape[1] != family.key_width or value.shape != (key.shape[0], state.value_width):
        raise DomainError(f"token block shapes {key.shape}, {value.shape} do not match state")
    ext = extended_transpose(key, family.key_width, dtype)
    # trailing ones row makes the same product also produce the Z increment
    vxt = np.empty((state.value_width + 1, key.shape[0]))
    vxt[:-1] = value.T
    vxt[-1] = 1.0
    low = lower_features_t(ext, family)
    for r in range(0, low.shape[0], _UPDATE_ROWS):
        _accumulate(state, r, low[r:r + _UPDATE_ROWS], vxt, family.packed_weights)
    if family.truncation_order > 1:
        # the top degree dominates the row count; fill it block by block
        groups = family.row_groups[-1]
        starts = groups[2]
        count = len(starts) - 1
        buf = np.empty((_UPDATE_ROWS + family.key_width, key.shape[0]), dtype=ext.dtype)
        g = 0
        while g < count:
            g1 = int(np.searchsorted(starts, starts[g] + _UPDATE_ROWS, side="right")) - 1
            g1 = min(max(g1, g + 1), count)
            f = fill_group_features_t(ext, low, groups, g, g1, buf)
            _accumulate(state, int(starts[g]), f, vxt, family.packed_weights)
            g = g1
    state.token_count += key.shape[0]
    return state


def _accumulate(state, r0, f, vxt, weights):
    """Add weighted ``f^T [V | 1]`` into rows ``r0:r0 + len(f)`` of the state."""
    r1 = r0 + f.shape[0]
    acc = vxt @ f.astype(np.float64, copy=False).T
    acc *= weights[r0:r1]
    state.numerator[r0:r1] += acc[:-1].T
    state.denominator[r0:r1] += acc[-1]


def denominator_guard(token_count: int, alpha0: float = 1.0) -> float:
    return GUARD_RTOL * (1.0 + token_count * alpha0)


def read_output(state: AttentionState, query, family: BasisFamily, *,
                precision: str = "double") -> AttentionOutput:
    _check_state(state, family)
    if state.token_count < 1:
        raise EmptyContextError("cannot read attention from an empty state")
    query = np.asarray(query)
    if query.shape != (family.key_width,):
        raise DomainError(f"query shape {query.shape} does not match key width {family.key_width}")
    fq = packed_features_t(
        extended_transpose(query[None, :], family.key_width, PRECISIONS[precision]), family
    )[:, 0]
    numerator = fq @ state.numerator
    denominator = float(fq @ state.denominator)
    guard = denominator_guard(state.token_count, family.taylor_coefficients[0])
    if abs(denominator) < guard:
        raise DegenerateDenominatorError(numerator, denominator, threshold=guard)
    return AttentionOutput(numerator / denominator, denominator, numerator)


def _run_tokens(state: AttentionState, tokens: Tokens, family: BasisFamily,
                dtype, on_degenerate: str, first_index: int = 0):
    """Sequential recurrence: update with token t, then read at query t.

    Features are computed per block of tokens; the per-token arithmetic is the
    same regardless of block boundaries.
    """
    n, dv = len(tokens), tokens.value_width
    num = np.empty((n, dv))
    den = np.empty(n)
    flagged = np.zeros(n, dtype=bool)
    fallback = {}
    S, Z = state.numerator, state.denominator
    alpha0 = float(family.taylor_coefficients[0])
    V = tokens.values
    for b0 in range(0, n, _STREAM_BLOCK):
        b1 = min(b0 + _STREAM_BLOCK, n)
        fk_block = _weighted_key_features(tokens.keys[b0:b1], family, dtype).T.copy()
        fq_block = packed_features_t(
            extended_transpose(tokens.queries[b0:b1], family.key_width, dtype), family
        ).T.copy()
        for i in range(b1 - b0):
            t = b0 + i
            fk = fk_block[i]
            Z += fk
            S += fk[:, None] * V[t]
            fq = fq_block[i]
            num[t] = fq @ S
            d = float(fq @ Z)
            den[t] = d
            count = state.token_count + t + 1
            if abs(d) < GUARD_RTOL * (1.0 + count * alpha0):
                if on_degenerate == "raise":
                    state.token_count += t + 1
                    err = DegenerateDenominatorError(
                        num[t].copy(), d, token_index=first_index + t,
                        threshold=denominator_guard(count, alpha0),
                    )
                    raise err
                flagged[t] = True
                if on_degenerate == "fallback":
                    fallback[t] = S[0] / Z[0]
    state.token_count += n
    with np.errstate(divide="ignore", invalid="ignore"):
        out = num / den[:, None]
    if flagged.any():
        out[flagged] = np.nan
        for t, y in fallback.items():
            out[t] = y
    return AttentionOutputs(out, den, num, flagged)


def _check_options(family, tokens, on_degenerate, precision):
    if on_degenerate not in ON_DEGENERATE:
        raise DomainError(f"on_degenerate must be one of {ON_DEGENERATE}")
    if precision not in PRECISIONS:
        raise DomainError(f"precision must be one of {tuple(PRECISIONS)}")
    if tokens.key_width != family.key_width:
        raise DomainError(
            f"token key width {tokens.key_width} does not match family {family.key_width}"
        )


def attend_stream(tokens, family: BasisFamily, *, on_degenerate: str = "raise",
                  precision: str = "double", state: AttentionState | None = None) -> AttentionOutputs:
    """Causal attention by the sequential recurrence.

    Output ``t`` reads the state after tokens ``0..t``. If ``state`` is given,
    it is the context prefix and is advanced in place.
    """
    tokens = as_tokens(tokens, PRECISIONS.get(precision, np.float64))
    _check_options(family, tokens, on_degenerate, precision)
    if state is None:
        state = init_state(family, tokens.value_width)
    _check_state(state, family)
    return _run_tokens(state, tokens, family, PRECISIONS[precision], on_degenerate)


def iter_attend(tokens: Iterable[TokenTriple], family: BasisFamily,
                state: AttentionState | None = None) -> Iterator[AttentionOutput]:
    """Token-at-a-time attention; memory is one state plus one token."""
    for t, tok in enumerate(tokens):
        if state is None:
            state = init_state(family, np.asarray(tok.value).shape[0])
        update_state(state, tok.key, tok.value, family)
        try:
            yield read_output(state, tok.query, family)
        except DegenerateDenominatorError as err:
            err.token_index = t
            raise


def exclusive_scan(items: Sequence, combine: Callable, identity: Callable[[], object]) -> list:
    """Work-efficient (up-sweep/down-sweep) exclusive prefix scan.

    ``combine`` must be associative. The tree shape depends only on
    ``len(items)``, so results are reproducible.
    """
    n = len(items)
    size = 1
    while size < n:
        size *= 2
    a = list(items) + [identity() for _ in range(size - n)]
    step = 1
    while step < size:
        for i in range(2 * step - 1, size, 2 * step):
            a[i] = combine(a[i - step], a[i])
        step *= 2
    a[size - 1] = identity()
    step = size // 2
    while step >= 1:
        for i in range(2 * step - 1, size, 2 * step):
            left = a[i - step]
            a[i - step] = a[i]
            a[i] = combine(a[i], left)
        step //= 2
    return a[:n]


def _with_prefix(state, family, carries):
    if state is None:
        return carries
    _check_state(state, family)
    return [combine_states(state, c) for c in carries]


def attend_scan(tokens, family: BasisFamily, chunk_size: int, *, on_degenerate: str = "raise",
                precision: str = "double", workers: int | None = None,
                state: AttentionState | None = None) -> AttentionOutputs:
    """Causal attention by chunked prefix scan.

    1. Each chunk's total state is accumulated independently.
    2. An exclusive scan of chunk totals gives every chunk its incoming state.
    3. Each chunk runs the sequential recurrence from its incoming state.

    Steps 1 and 3 are independent across chunks and run on ``workers``
    threads when given. With one chunk this is exactly :func:`attend_stream`.
    A given ``state`` is the context prefix and is advanced in place.
    """
    if not isinstance(chunk_size, (int, np.integer)) or chunk_size < 1:
        raise DomainError(f"chunk_size must be an integer >= 1, got {chunk_size!r}")
    dtype = PRECISIONS.get(precision, np.float64)
    tokens = as_tokens(tokens, dtype)
    _check_options(family, tokens, on_degenerate, precision)
    n, dv = len(tokens), tokens.value_width
    bounds = [(s, min(s + chunk_size, n)) for s in range(0, n, chunk_size)]

    def chunk_tokens(b):
        return Tokens(*(a[b[0]:b[1]] for a in tokens))

    def chunk_total(b):
        st = init_state(family, dv)
        return update_state(st, tokens.keys[b[0]:b[1]], tokens.values[b[0]:b[1]], family,
                            precision=precision)

    def run_chunk(job):
        b, carry = job
        return _run_tokens(carry.copy(), chunk_tokens(b), family, dtype, on_degenerate, b[0])

    if workers and workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            totals = list(pool.map(chunk_total, bounds))
            carries = exclusive_scan(totals, combine_states, lambda: init_state(family, dv))
            carries = _with_prefix(state, family, carries)
            parts = list(pool.map(run_chunk, zip(bounds, carries)))
    else:
        totals = [chunk_total(b) for b in bounds]
        carries = exclusive_scan(totals, combine_states, lambda: init_state(family, dv))
        carries = _with_prefix(state, family, carries)
        parts = [run_chunk(job) for job in zip(bounds, carries)]
    if state is not None:
        final = combine_states(carries[-1], totals[-1])
        state.numerator[...] = final.numerator
        state.denominator[...] = final.denominator
        state.token_count = final.token_count
    return AttentionOutputs(
        np.concatenate([p.outputs for p in parts]),
        np.concatenate([p.denominators for p in parts]),
        np.concatenate([p.numerators for p in parts]),
        np.concatenate([p.flagged for p in parts]),
    )


def conventional_attention(tokens, scale: float, *, block_size: int = 256,
                           first_query: int = 0) -> AttentionOutputs:
    """Exact causal softmax attention in float64, blocked over queries.

    Each query row is stabilized by subtracting its largest visible logit.
    Rows before ``first_query`` only serve as context; outputs start there.
    """
    tokens = as_tokens(tokens)
    if not scale > 0:
        raise DomainError("scale must be positive")
    Q, K, V = tokens
    n = len(tokens)
    if not 0 <= first_query < n:
        raise DomainError(f"first_query must lie in [0, {n})")
    rows_out = n - first_query
    out = np.empty((rows_out, tokens.value_width))
    num = np.empty_like(out)
    den = np.empty(rows_out)
    shift = np.empty(rows_out)
    for s in range(first_query, n, block_size):
        e = min(s + block_size, n)
        o = slice(s - first_query, e - first_query)
        logits = Q[s:e] @ K[:e].T
        logits /= scale
        logits[np.arange(e)[None, :] > np.arange(s, e)[:, None]] = -np.inf
        m = logits.max(axis=1)
        w = np.exp(logits - m[:, None])
        den[o] = w.sum(axis=1)
        num[o] = w @ V[:e]
        out[o] = num[o] / den[o, None]
        shift[o] = m
    return AttentionOutputs(out, den, num, np.zeros(rows_out, dtype=bool), shift)
