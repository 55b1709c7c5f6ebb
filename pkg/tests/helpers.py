"""Shared fixture builders and independent oracles for the test suite.

The oracles here recompute quantities from first principles (explicit
factor products over enumerated orderings) so that the library's
dynamic program and beam search are checked against code that shares
nothing with them.
"""

import itertools
import math

import numpy as np

from bidiseq.scoring import DecodeState, LocalScores, TabularScorer, scores_from_probs
from bidiseq.vocab import Example


def make_example(form, lemma=(0,), tags=()):
    """Example straight from token ids; raw strings are placeholders."""
    return Example(
        lemma_tokens=tuple(lemma),
        tag_tokens=tuple(tags),
        form_tokens=tuple(form),
        raw_lemma="?",
        raw_form="?",
    )


def random_gold_tabular(y, vocab_size, rng, join_at_end_only=False):
    """TabularScorer covering every on-lattice state of target ``y``."""
    n = len(y)
    table = {}
    for i in range(n + 1):
        for j in range(n + 1 - i):
            key = (tuple(y[:i]), tuple(y[n - j:]) if j else ())
            if join_at_end_only:
                p_join = 1.0 if i + j == n else 0.0
            else:
                p_join = float(rng.uniform(0.05, 0.95))
            table[key] = scores_from_probs(
                rng.dirichlet(np.ones(vocab_size)),
                rng.dirichlet(np.ones(vocab_size)),
                float(rng.uniform(0.05, 0.95)),
                p_join,
            )
    return TabularScorer(vocab_size, table)


def enumerate_joint(table, y, ordering):
    """Joint log probability of (y, ordering) from raw table factors.

    Independent re-derivation: multiplies the side, token, and
    continue/stop factors directly out of the stored distributions.
    """
    n = len(y)
    i = j = 0
    total = 0.0
    for t, side in enumerate(ordering, start=1):
        scores = table[(tuple(y[:i]), tuple(y[n - j:]) if j else ())]
        if side == "L":
            total += float(scores.order_left_logp) + float(scores.left_token_logp[y[i]])
            i += 1
        else:
            total += float(scores.order_right_logp) + float(scores.right_token_logp[y[n - j - 1]])
            j += 1
        after = table[(tuple(y[:i]), tuple(y[n - j:]) if j else ())]
        total += float(after.join_logp) if t == n else float(after.not_join_logp)
    return total


def enumerate_marginal(table, y):
    vals = [
        enumerate_joint(table, y, o)
        for o in itertools.product("LR", repeat=len(y))
    ]
    m = max(vals)
    if math.isinf(m) and m < 0:
        return float("-inf")
    return m + math.log(sum(math.exp(v - m) for v in vals))


def enumerate_best(table, y):
    best_val = -math.inf
    best_ord = None
    for o in itertools.product("LR", repeat=len(y)):
        v = enumerate_joint(table, y, o)
        if v > best_val:
            best_val = v
            best_ord = "".join(o)
    return best_ord, best_val
