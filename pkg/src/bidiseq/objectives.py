"""Training objectives over a local scorer.

Two families: context cross-entropy, which supervises the token and
join heads across prefix/suffix contexts while pinning the side choice
at one half, and maximum marginal likelihood, which trains the side
choice implicitly by differentiating through the order-marginalized
likelihood. The linear-time cross-entropy variant samples one context
per antidiagonal instead of enumerating them all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import lattice
from .scoring import Scorer, TemperedScorer
from .vocab import Example

OBJECTIVES = ("xh", "xh_rand", "mml")


@dataclass(frozen=True)
class ContextSet:
    """Supervised context-length pairs for one target length.

    ``token_pairs`` are (prefix_len, suffix_len) contexts at which the
    next token on each side is supervised; ``join_pairs`` are completed
    (i, j) length pairs at which the continue/stop decision is
    supervised.
    """

    n: int
    token_pairs: tuple
    join_pairs: tuple

    def __post_init__(self):
        for p, s in self.token_pairs:
            if p < 0 or s < 0 or p + s > self.n - 1:
                raise ValueError(f"token context {(p, s)} invalid for length {self.n}")
        for i, j in self.join_pairs:
            if i < 0 or j < 0 or i + j > self.n:
                raise ValueError(f"join context {(i, j)} invalid for length {self.n}")


def full_context_set(n: int) -> ContextSet:
    """Every reachable context: token pairs cover p+s <= n-1, join pairs
    cover i+j <= n. This is the default training set; it extends the
    interior-only set so that states with an empty side (the ones pure
    unidirectional decodes pass through) are supervised as well."""
    if n < 1:
        raise ValueError("target length must be >= 1")
    token_pairs = tuple((p, s) for t in range(n) for p, s in _diag(t))
    join_pairs = tuple((i, j) for t in range(n + 1) for i, j in _diag(t))
    return ContextSet(n, token_pairs, join_pairs)


def strict_context_set(n: int) -> ContextSet:
    """Interior-only supervision: index pairs (i, j) with i, j >= 1 and
    i+j <= n, read as next-token positions for the token terms (context
    lengths i-1, j-1) and as completed lengths for the join terms."""
    if n < 1:
        raise ValueError("target length must be >= 1")
    pairs = [(i, j) for i in range(1, n + 1) for j in range(1, n + 1) if i + j <= n]
    token_pairs = tuple(sorted((i - 1, j - 1) for i, j in pairs))
    join_pairs = tuple(sorted(pairs))
    return ContextSet(n, token_pairs, join_pairs)


def xh_rand_context_set(n: int, rng: np.random.Generator) -> ContextSet:
    """Linear-size sample: one token context per antidiagonal of the
    context lattice and one join pair per completed-length diagonal,
    plus the empty-state join pair."""
    if n < 1:
        raise ValueError("target length must be >= 1")
    token_pairs = []
    for k in range(1, n + 1):
        p = int(rng.integers(0, k))
        token_pairs.append((p, k - 1 - p))
    join_pairs = [(0, 0)]
    for k in range(1, n + 1):
        i = int(rng.integers(0, k + 1))
        join_pairs.append((i, k - i))
    return ContextSet(n, tuple(token_pairs), tuple(join_pairs))


def _diag(t: int):
    return [(i, t - i) for i in range(t + 1)]


def xh_loss(scorer: Scorer, example: Example, contexts: ContextSet) -> float:
    """Average cross-entropy over the supervised contexts.

    One third each: next-left-token terms, next-right-token terms, and
    join terms. The order head takes no part in this loss; under this
    objective any joint-probability computation treats both sides as
    probability one half.
    """
    y = example.form_tokens
    n = len(y)
    if contexts.n != n:
        raise ValueError(f"context set built for length {contexts.n}, example has {n}")
    needed = sorted(set(contexts.token_pairs) | set(contexts.join_pairs))
    states = [lattice.state_at(example, p, s) for p, s in needed]
    scored = dict(zip(needed, scorer.score_batch(states)))

    left = right = 0.0
    for p, s in contexts.token_pairs:
        sc = scored[(p, s)]
        left -= float(sc.left_token_logp[y[p]])
        right -= float(sc.right_token_logp[y[n - s - 1]])
    left /= len(contexts.token_pairs)
    right /= len(contexts.token_pairs)

    join = 0.0
    for i, j in contexts.join_pairs:
        sc = scored[(i, j)]
        join -= float(sc.join_logp) if i + j == n else float(sc.not_join_logp)
    join /= len(contexts.join_pairs)
    return (left + right + join) / 3.0


def mml_loss(scorer: Scorer, example: Example, tau: float = 1.0) -> float:
    """Negative log marginal likelihood, optionally with tempered order
    probabilities (used during early training to keep both sides alive)."""
    if tau > 1.0:
        scorer = TemperedScorer(scorer, tau)
    return -lattice.marginal_log_likelihood(scorer, example)


@dataclass(frozen=True)
class TemperSchedule:
    """Polynomially decaying temperature for the order distribution."""

    warmup: int = 4000
    tau0: float = 50.0
    exponent: float = 2.0

    def __post_init__(self):
        if self.warmup < 1:
            raise ValueError("warmup must be >= 1")
        if self.tau0 < 1.0:
            raise ValueError("initial temperature must be >= 1")
        if self.exponent <= 0:
            raise ValueError("decay exponent must be > 0")

    def tau_at(self, step: int) -> float:
        """Temperature at a training step; 1 from the end of warmup on."""
        if step >= self.warmup:
            return 1.0
        return (self.tau0 - 1.0) / self.warmup ** self.exponent * (
            self.warmup - step
        ) ** self.exponent + 1.0


def temper_order_logits(tau: float, order_logits) -> np.ndarray:
    """Soften a pair of order logits into a distribution at temperature tau."""
    if tau < 1.0:
        raise ValueError("temperature must be >= 1")
    z = np.asarray(order_logits, dtype=np.float64) / tau
    e = np.exp(z - np.max(z))
    return e / e.sum()
