"""Exact inference over latent generation orders.

The joint probability of an output and one ordering factorizes into
per-step side, token, and continue/stop terms. Summing over all 2^n
orderings is done with a triangular table ``f[i, j]``: the log joint
probability of having produced the first ``i`` tokens as prefix and the
last ``j`` as suffix. Cells on antidiagonal ``d = i + j`` depend only on
antidiagonal ``d - 1``, so the table fills in O(n^2) with two vectorized
cases per diagonal. The same recurrence with max instead of sum yields
the single best ordering via backtracking.

``forward_over_diagonals`` is the shared recurrence core: it is generic
over numpy arrays and autodiff variables, so training losses
differentiate through exactly the code path that inference uses.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .scoring import DecodeState, Scorer
from .vocab import Example

NEG_INF = float("-inf")
BRUTE_FORCE_MAX_LEN = 12


def state_at(example: Example, i: int, j: int) -> DecodeState:
    """The decode state holding the first i and last j gold tokens."""
    y = example.form_tokens
    return DecodeState(
        prefix=tuple(y[:i]),
        suffix=tuple(y[len(y) - j:]) if j else (),
        source=example.source_tokens(),
    )


def states_by_diagonal(example: Example) -> list:
    """All lattice states grouped by i+j, cells ordered by prefix length."""
    n = len(example.form_tokens)
    return [[state_at(example, i, d - i) for i in range(d + 1)] for d in range(n + 1)]


def _is_var(x) -> bool:
    return isinstance(x, ad.Var)


def _concat(parts):
    if any(_is_var(p) for p in parts):
        return ad.concat([ad.as_var(p) for p in parts], axis=0)
    return np.concatenate(parts)


def _logaddexp(a, b):
    if _is_var(a) or _is_var(b):
        return ad.logaddexp(a, b)
    return np.logaddexp(a, b)


def _logsumexp_vec(v):
    if _is_var(v):
        return ad.logsumexp(v, axis=0)
    m = np.max(v)
    if np.isneginf(m):
        return NEG_INF
    return float(np.log(np.sum(np.exp(v - m))) + m)


def _neg_inf_like(template):
    dtype = template.data.dtype if _is_var(template) else np.asarray(template).dtype
    return np.full(1, NEG_INF, dtype=dtype)


def forward_over_diagonals(left_terms, right_terms, q_terms, return_diagonals=False):
    """Run the log-space sum recurrence over antidiagonals.

    ``left_terms[d]`` / ``right_terms[d]`` are length d+1 vectors for
    d in 0..n-1: the side-plus-token log score of extending each state
    on diagonal d to the left or right. ``q_terms[d]`` (d in 0..n-1,
    entry d covering diagonal d+1) are length d+2 vectors with the
    continue/stop log term of each target cell. Returns the log marginal
    (sum over the final diagonal); with ``return_diagonals`` also the
    list of per-diagonal table vectors.
    """
    n = len(left_terms)
    if n == 0:
        raise ValueError("output must have at least one token")
    pad = _neg_inf_like(left_terms[0])
    f = np.zeros(1, dtype=np.asarray(pad).dtype)
    diagonals = [f]
    for d in range(n):
        case_left = _concat([pad, f + left_terms[d]])
        case_right = _concat([f + right_terms[d], pad])
        f = _logaddexp(case_left, case_right) + q_terms[d]
        diagonals.append(f)
    total = _logsumexp_vec(f)
    if return_diagonals:
        return total, diagonals
    return total


@dataclass
class DPTable:
    """Filled lattice: ``diagonals[d][i]`` is f[i, d - i]."""

    n: int
    diagonals: list

    def cell(self, i: int, j: int) -> float:
        return float(self.diagonals[i + j][i])


def _gather_terms(scorer: Scorer, example: Example):
    """Score every lattice state once and lay the per-state side+token
    and continue/stop terms out by antidiagonal."""
    y = example.form_tokens
    n = len(y)
    diag_states = states_by_diagonal(example)
    flat = [s for diag in diag_states for s in diag]
    scored = scorer.score_batch(flat)
    by_diag = []
    pos = 0
    for diag in diag_states:
        by_diag.append(scored[pos: pos + len(diag)])
        pos += len(diag)

    left_terms, right_terms, q_terms = [], [], []
    for d in range(n):
        lt = np.empty(d + 1)
        rt = np.empty(d + 1)
        for i, s in enumerate(by_diag[d]):
            j = d - i
            lt[i] = s.order_left_logp + s.left_token_logp[y[i]]
            rt[i] = s.order_right_logp + s.right_token_logp[y[n - j - 1]]
        left_terms.append(lt)
        right_terms.append(rt)
        q = np.empty(d + 2)
        for i, s in enumerate(by_diag[d + 1]):
            q[i] = s.join_logp if d + 1 == n else s.not_join_logp
        q_terms.append(q)
    return left_terms, right_terms, q_terms


def fill_table(scorer: Scorer, example: Example) -> DPTable:
    n = len(example.form_tokens)
    lt, rt, qt = _gather_terms(scorer, example)
    _, diagonals = forward_over_diagonals(lt, rt, qt, return_diagonals=True)
    return DPTable(n=n, diagonals=[np.asarray(d, dtype=float) for d in diagonals])


def marginal_log_likelihood(scorer: Scorer, example: Example) -> float:
    """Exact log P(y | x), marginalized over all generation orders."""
    lt, rt, qt = _gather_terms(scorer, example)
    return float(forward_over_diagonals(lt, rt, qt))


def map_ordering(scorer: Scorer, example: Example) -> tuple:
    """Best single ordering and its log joint probability.

    Ties prefer the left case, both inside the recurrence and when
    choosing the final cell (larger final prefix wins).
    """
    n = len(example.form_tokens)
    lt, rt, qt = _gather_terms(scorer, example)
    f = np.zeros(1)
    came_left = []
    diagonals = [f]
    for d in range(n):
        case_left = np.concatenate([[NEG_INF], f + lt[d]])
        case_right = np.concatenate([f + rt[d], [NEG_INF]])
        with np.errstate(invalid="ignore"):
            take_left = case_left >= case_right
        f = np.where(take_left, case_left, case_right) + qt[d]
        came_left.append(take_left)
        diagonals.append(f)
    final = diagonals[n]
    best = np.max(final)
    i = int(max(np.flatnonzero(final == best)))
    decisions = []
    for d in range(n, 0, -1):
        if came_left[d - 1][i]:
            decisions.append("L")
            i -= 1
        else:
            decisions.append("R")
    return "".join(reversed(decisions)), float(best)


def joint_log_prob(scorer: Scorer, example: Example, ordering: str) -> float:
    """Log P(y, o | x) by replaying one ordering step by step."""
    y = example.form_tokens
    n = len(y)
    if len(ordering) != n:
        raise ValueError(f"ordering length {len(ordering)} != output length {n}")
    i = j = 0
    total = 0.0
    current = scorer.score(state_at(example, 0, 0))
    for t, side in enumerate(ordering, start=1):
        if side == "L":
            total += float(current.order_left_logp) + float(current.left_token_logp[y[i]])
            i += 1
        elif side == "R":
            total += float(current.order_right_logp) + float(current.right_token_logp[y[n - j - 1]])
            j += 1
        else:
            raise ValueError(f"ordering must contain only L/R, got {side!r}")
        current = scorer.score(state_at(example, i, j))
        total += float(current.join_logp) if t == n else float(current.not_join_logp)
    return total


class _GoldStateCache(Scorer):
    """Memoizes scores of on-lattice states during ordering enumeration."""

    def __init__(self, inner: Scorer, example: Example):
        self.inner = inner
        self.vocab_size = inner.vocab_size
        self.max_state_len = inner.max_state_len
        self._memo = {}
        self._example = example

    def score(self, state: DecodeState):
        key = (len(state.prefix), len(state.suffix))
        hit = self._memo.get(key)
        if hit is None:
            hit = self.inner.score(state)
            self._memo[key] = hit
        return hit


def brute_force_log_likelihood(scorer: Scorer, example: Example) -> float:
    """Reference marginal: enumerate every ordering and sum the joints.

    Exponential in the output length, so it refuses anything longer than
    12 tokens; this is the oracle the dynamic program is checked against.
    """
    n = len(example.form_tokens)
    if n > BRUTE_FORCE_MAX_LEN:
        raise ValueError(f"brute force limited to {BRUTE_FORCE_MAX_LEN} tokens, got {n}")
    cached = _GoldStateCache(scorer, example)
    joints = [
        joint_log_prob(cached, example, "".join(o))
        for o in itertools.product("LR", repeat=n)
    ]
    m = max(joints)
    if math.isinf(m) and m < 0:
        return NEG_INF
    return m + math.log(sum(math.exp(v - m) for v in joints))
