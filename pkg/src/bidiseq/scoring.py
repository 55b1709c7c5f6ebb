"""Local scorer interface: the contract every model plugged into the
dynamic program, losses, or beam search must satisfy.

A scorer maps a decode state (source, prefix, suffix) to four log
distributions: next-token-on-the-left, next-token-on-the-right, the
side choice, and the join decision. The essential contract is purity:
the output is a deterministic function of the state alone, never of the
call history. That independence is what licenses dynamic programming
over generation orders.

Conventions:
  * the suffix is stored in surface (left-to-right) order; generation
    appends at its front, so the most recently generated right-side
    token is ``suffix[0]`` and joining is plain concatenation;
  * everything is log-domain; probability zero is ``-inf`` and every
    consumer treats it absorbingly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

NEG_INF = float("-inf")


@dataclass(frozen=True)
class DecodeState:
    """A prefix/suffix pair plus the source it conditions on."""

    prefix: tuple
    suffix: tuple
    source: tuple = ()

    def __len__(self):
        return len(self.prefix) + len(self.suffix)


@dataclass(frozen=True)
class LocalScores:
    """The four local log-distributions emitted for one state.

    ``left_token_logp`` / ``right_token_logp`` are vectors over the
    vocabulary; the order and join entries are scalars. Fields may hold
    floats/ndarrays (inference) or autodiff variables (training).
    """

    left_token_logp: object
    right_token_logp: object
    order_left_logp: object
    order_right_logp: object
    join_logp: object
    not_join_logp: object

    def check_normalized(self, token_tol=1e-6, pair_tol=1e-9):
        """Raise if any distribution fails to sum to one."""
        for vec in (self.left_token_logp, self.right_token_logp):
            total = float(np.sum(np.exp(np.asarray(vec, dtype=np.float64))))
            if abs(total - 1.0) > token_tol:
                raise ValueError(f"token distribution sums to {total}")
        for a, b, name in (
            (self.order_left_logp, self.order_right_logp, "order"),
            (self.join_logp, self.not_join_logp, "join"),
        ):
            total = float(np.exp(a) + np.exp(b))
            if abs(total - 1.0) > pair_tol:
                raise ValueError(f"{name} probabilities sum to {total}")


def scores_from_probs(token_probs_left, token_probs_right, p_left, p_join) -> LocalScores:
    """Build LocalScores from linear-domain probabilities (test fixtures)."""
    with np.errstate(divide="ignore"):
        return LocalScores(
            left_token_logp=np.log(np.asarray(token_probs_left, dtype=np.float64)),
            right_token_logp=np.log(np.asarray(token_probs_right, dtype=np.float64)),
            order_left_logp=float(np.log(p_left)) if p_left > 0 else NEG_INF,
            order_right_logp=float(np.log1p(-p_left)) if p_left < 1 else NEG_INF,
            join_logp=float(np.log(p_join)) if p_join > 0 else NEG_INF,
            not_join_logp=float(np.log1p(-p_join)) if p_join < 1 else NEG_INF,
        )


class Scorer:
    """Base class; subclasses implement ``score`` as a pure function."""

    vocab_size: int
    max_state_len: Optional[int] = None

    def score(self, state: DecodeState) -> LocalScores:
        raise NotImplementedError

    def score_batch(self, states: Sequence[DecodeState]) -> list:
        return [self.score(s) for s in states]

    def _check_len(self, state: DecodeState):
        if self.max_state_len is not None and len(state) > self.max_state_len:
            raise ValueError(
                f"state of length {len(state)} exceeds scorer maximum "
                f"{self.max_state_len}"
            )


class UniformScorer(Scorer):
    """Every distribution uniform; handy as a neutral fixture."""

    def __init__(self, vocab_size: int, max_state_len: Optional[int] = None):
        self.vocab_size = vocab_size
        self.max_state_len = max_state_len
        self._scores = scores_from_probs(
            np.full(vocab_size, 1.0 / vocab_size),
            np.full(vocab_size, 1.0 / vocab_size),
            0.5,
            0.5,
        )

    def score(self, state: DecodeState) -> LocalScores:
        self._check_len(state)
        return self._scores


class TabularScorer(Scorer):
    """Explicit (prefix, suffix) -> LocalScores map with optional fallback."""

    def __init__(self, vocab_size: int, table: dict, default: Optional[LocalScores] = None,
                 max_state_len: Optional[int] = None):
        self.vocab_size = vocab_size
        self.table = dict(table)
        self.default = default
        self.max_state_len = max_state_len

    def score(self, state: DecodeState) -> LocalScores:
        self._check_len(state)
        key = (tuple(state.prefix), tuple(state.suffix))
        hit = self.table.get(key)
        if hit is not None:
            return hit
        if self.default is not None:
            return self.default
        raise KeyError(f"no scores stored for state {key}")


class RandomScorer(Scorer):
    """Deterministic pseudo-random scorer: distributions are a pure hash
    of (seed, source, prefix, suffix), so purity holds by construction."""

    def __init__(self, vocab_size: int, seed: int, max_state_len: Optional[int] = None,
                 concentration: float = 1.0):
        self.vocab_size = vocab_size
        self.seed = seed
        self.max_state_len = max_state_len
        self.concentration = concentration
        self._memo = {}

    def _state_rng(self, state: DecodeState) -> np.random.Generator:
        h = hashlib.blake2b(digest_size=8)
        h.update(str(self.seed).encode())
        for part in (state.source, state.prefix, state.suffix):
            h.update(b"|")
            h.update(",".join(str(t) for t in part).encode())
        return np.random.Generator(np.random.PCG64(int.from_bytes(h.digest(), "little")))

    def score(self, state: DecodeState) -> LocalScores:
        self._check_len(state)
        key = (state.source, state.prefix, state.suffix)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        rng = self._state_rng(state)
        alpha = np.full(self.vocab_size, self.concentration)
        out = scores_from_probs(
            rng.dirichlet(alpha),
            rng.dirichlet(alpha),
            float(rng.beta(2.0, 2.0)),
            float(rng.beta(2.0, 2.0)),
        )
        self._memo[key] = out
        return out


class CountingScorer(Scorer):
    """Wrapper that counts how many states were scored (complexity tests)."""

    def __init__(self, inner: Scorer):
        self.inner = inner
        self.vocab_size = inner.vocab_size
        self.max_state_len = inner.max_state_len
        self.count = 0

    def score(self, state: DecodeState) -> LocalScores:
        self.count += 1
        return self.inner.score(state)

    def score_batch(self, states):
        self.count += len(states)
        return self.inner.score_batch(states)


class _OrderOverrideScorer(Scorer):
    def __init__(self, inner: Scorer, left_logp: float, right_logp: float):
        self.inner = inner
        self.vocab_size = inner.vocab_size
        self.max_state_len = inner.max_state_len
        self._left = left_logp
        self._right = right_logp

    def score(self, state: DecodeState) -> LocalScores:
        s = self.inner.score(state)
        return LocalScores(
            left_token_logp=s.left_token_logp,
            right_token_logp=s.right_token_logp,
            order_left_logp=self._left,
            order_right_logp=self._right,
            join_logp=s.join_logp,
            not_join_logp=s.not_join_logp,
        )

    def score_batch(self, states):
        return [
            LocalScores(
                left_token_logp=s.left_token_logp,
                right_token_logp=s.right_token_logp,
                order_left_logp=self._left,
                order_right_logp=self._right,
                join_logp=s.join_logp,
                not_join_logp=s.not_join_logp,
            )
            for s in self.inner.score_batch(states)
        ]


def forced_order(inner: Scorer, direction: str) -> Scorer:
    """Clamp the side choice to emulate a unidirectional decoder.

    ``l2r`` forces probability 1 on the left side, ``r2l`` on the right;
    token and join heads pass through untouched.
    """
    if direction == "l2r":
        return _OrderOverrideScorer(inner, 0.0, NEG_INF)
    if direction == "r2l":
        return _OrderOverrideScorer(inner, NEG_INF, 0.0)
    raise ValueError(f"direction must be 'l2r' or 'r2l', got {direction!r}")


def uniform_order(inner: Scorer) -> Scorer:
    """Fix the side choice at one half on both sides.

    Models trained with the context cross-entropy objective never train
    their order head, so joint probabilities at decode time treat both
    sides as equally likely.
    """
    half = float(np.log(0.5))
    return _OrderOverrideScorer(inner, half, half)


class TemperedScorer(Scorer):
    """Divide order log-odds by a temperature and renormalize."""

    def __init__(self, inner: Scorer, tau: float):
        if tau < 1.0:
            raise ValueError("temperature must be >= 1")
        self.inner = inner
        self.vocab_size = inner.vocab_size
        self.max_state_len = inner.max_state_len
        self.tau = tau

    def _temper(self, s: LocalScores) -> LocalScores:
        a = s.order_left_logp / self.tau
        b = s.order_right_logp / self.tau
        z = np.logaddexp(a, b)
        return LocalScores(
            left_token_logp=s.left_token_logp,
            right_token_logp=s.right_token_logp,
            order_left_logp=float(a - z),
            order_right_logp=float(b - z),
            join_logp=s.join_logp,
            not_join_logp=s.not_join_logp,
        )

    def score(self, state: DecodeState) -> LocalScores:
        return self._temper(self.inner.score(state))

    def score_batch(self, states):
        return [self._temper(s) for s in self.inner.score_batch(states)]
