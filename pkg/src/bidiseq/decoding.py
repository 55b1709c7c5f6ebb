"""Beam search over prefix-suffix hypotheses, marginal reranking, and the
two-way unidirectional selection strategies.

Each live hypothesis is a prefix-suffix pair with its accumulated log
joint probability. One step expands every live hypothesis on both sides
over the (optionally truncated) token set; every child immediately
contributes a completed candidate (child score plus its join term) to
the finished pool and, when its continue term is finite, a live child.
The search keeps the top-k live hypotheses and stops when the pool's
k-th best strictly beats every live score (future factors only shrink
scores), the live set empties, or everything hits the length cap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import math

from . import lattice
from .scoring import DecodeState, Scorer
from .vocab import Example


class DecodeError(RuntimeError):
    """No hypothesis completed; carries the best partial state."""

    def __init__(self, message, best_partial=None):
        super().__init__(message)
        self.best_partial = best_partial


@dataclass(frozen=True)
class Candidate:
    tokens: tuple
    ordering: str
    log_joint: float
    log_marginal: Optional[float] = None


@dataclass(frozen=True)
class DecodeResult:
    candidates: tuple

    def best(self) -> Candidate:
        return self.candidates[0]


@dataclass
class _Hyp:
    state: DecodeState
    log_joint: float
    ordering: str
    tie: tuple
    scores: object  # LocalScores at this state


def _example_for(source: tuple, tokens: tuple) -> Example:
    """Wrap a candidate output so the lattice can score it."""
    return Example(
        lemma_tokens=tuple(source),
        tag_tokens=(),
        form_tokens=tuple(tokens),
        raw_lemma="",
        raw_form="",
    )


def _top_tokens(vec, limit: Optional[int]):
    order = sorted(range(len(vec)), key=lambda t: (-float(vec[t]), t))
    return order if limit is None else order[:limit]


def beam_search(scorer: Scorer, source: tuple, width: int = 5,
                max_len: int = 32, expand_per_side: Optional[int] = None) -> DecodeResult:
    """Maximize joint probability of (output, ordering) by beam search.

    ``expand_per_side`` truncates each hypothesis's token fan-out per
    side (speed knob for evaluation loops); leave None for the full
    expansion.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    root_state = DecodeState((), (), tuple(source))
    live = [_Hyp(root_state, 0.0, "", (), scorer.score(root_state))]
    finished: list = []

    while live:
        specs = []
        for h in live:
            if len(h.state) >= max_len:
                continue
            for side_rank, (side, order_lp, vec) in enumerate(
                (
                    ("L", h.scores.order_left_logp, h.scores.left_token_logp),
                    ("R", h.scores.order_right_logp, h.scores.right_token_logp),
                )
            ):
                order_lp = float(order_lp)
                if order_lp == -math.inf:
                    continue
                for tok in _top_tokens(vec, expand_per_side):
                    base = h.log_joint + order_lp + float(vec[tok])
                    if base == -math.inf:
                        continue
                    if side == "L":
                        child = DecodeState(h.state.prefix + (tok,), h.state.suffix, h.state.source)
                    else:
                        child = DecodeState(h.state.prefix, (tok,) + h.state.suffix, h.state.source)
                    specs.append(
                        (base, h.tie + (side_rank, tok), h.ordering + side, child)
                    )
        if not specs:
            break

        distinct = list(dict.fromkeys(spec[3] for spec in specs))
        scored = dict(zip(distinct, scorer.score_batch(distinct)))

        next_live = []
        for base, tie, ordering, child in specs:
            child_scores = scored[child]
            done = base + float(child_scores.join_logp)
            if done > -math.inf:
                finished.append(
                    Candidate(
                        tokens=child.prefix + child.suffix,
                        ordering=ordering,
                        log_joint=done,
                    )
                )
            cont = base + float(child_scores.not_join_logp)
            if cont > -math.inf:
                next_live.append(_Hyp(child, cont, ordering, tie, child_scores))

        finished.sort(key=lambda c: (-c.log_joint, c.ordering, c.tokens))
        del finished[max(width, 1):]
        next_live.sort(key=lambda h: (-h.log_joint, h.tie))
        live = next_live[:width]

        if len(finished) >= width and live:
            kth = finished[width - 1].log_joint
            if kth > live[0].log_joint:
                break

    if not finished:
        best = max(live, key=lambda h: h.log_joint, default=None)
        partial = best.state if best else root_state
        raise DecodeError(
            f"no hypothesis completed within max_len={max_len}; "
            f"best partial prefix={partial.prefix} suffix={partial.suffix}",
            best_partial=partial,
        )
    return DecodeResult(candidates=tuple(finished))


def rerank_marginal(scorer: Scorer, source: tuple, result: DecodeResult) -> DecodeResult:
    """Re-sort candidates by their order-marginalized likelihood.

    Identical surface outputs collapse to their best-joint
    representative before scoring; ties keep the original joint order.
    """
    if not result.candidates:
        raise ValueError("nothing to rerank")
    reps = []
    seen = set()
    for rank, cand in enumerate(result.candidates):
        if cand.tokens in seen:
            continue
        seen.add(cand.tokens)
        reps.append((rank, cand))
    scored = []
    for rank, cand in reps:
        marginal = lattice.marginal_log_likelihood(
            scorer, _example_for(source, cand.tokens)
        )
        scored.append((rank, replace(cand, log_marginal=marginal)))
    scored.sort(key=lambda rc: (-rc[1].log_marginal, rc[0]))
    return DecodeResult(candidates=tuple(c for _, c in scored))


def bl2_select(l2r: DecodeResult, r2l: DecodeResult) -> tuple:
    """Pick the better of the two unidirectional best hypotheses by their
    own joint probability; ties go left-to-right."""
    if not l2r.candidates or not r2l.candidates:
        raise ValueError("both decode results must be non-empty")
    a, b = l2r.best(), r2l.best()
    return (a, "l2r") if a.log_joint >= b.log_joint else (b, "r2l")


def bl2_discriminate(scorer: Scorer, source: tuple, l2r_best: Candidate,
                     r2l_best: Candidate) -> tuple:
    """Pick between the two unidirectional candidates by marginal
    probability under a bidirectional scorer; ties go left-to-right."""
    if l2r_best.tokens == r2l_best.tokens:
        marginal = lattice.marginal_log_likelihood(
            scorer, _example_for(source, l2r_best.tokens)
        )
        return replace(l2r_best, log_marginal=marginal), "l2r"
    ml = lattice.marginal_log_likelihood(scorer, _example_for(source, l2r_best.tokens))
    mr = lattice.marginal_log_likelihood(scorer, _example_for(source, r2l_best.tokens))
    if ml >= mr:
        return replace(l2r_best, log_marginal=ml), "l2r"
    return replace(r2l_best, log_marginal=mr), "r2l"
