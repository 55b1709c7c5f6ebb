"""Optimizer, learning-rate schedule, batched loss construction, and the
training loop with dev-accuracy early stopping.

The cross-entropy objectives gather every supervised context of a batch
into one decoder pass and reduce with per-example weights, so the graph
stays small regardless of how many contexts an example contributes. The
marginal-likelihood objective scores every lattice state the same way
and then runs the shared antidiagonal recurrence on graph variables, so
its gradients flow through exactly the inference-time code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import lattice
from .decoding import DecodeError, beam_search
from .model import Model, ModelConfig, NeuralScorer
from .objectives import (
    OBJECTIVES,
    TemperSchedule,
    full_context_set,
    strict_context_set,
    xh_rand_context_set,
)
from .scoring import uniform_order
from .vocab import Example, Vocabulary, resolve_unk_in_output


def learning_rate_at(step: int, peak: float, warmup: int = 4000,
                     init: float = 1e-7) -> float:
    """Linear warmup from ``init`` to ``peak``, then inverse-square-root decay."""
    if step < 1:
        raise ValueError("steps are 1-based")
    if warmup <= 1:
        return peak / math.sqrt(max(step, 1) / max(warmup, 1))
    if step <= warmup:
        return init + (peak - init) * (step - 1) / (warmup - 1)
    return peak * math.sqrt(warmup / step)


class Adam:
    """Adam with bias correction; moments keyed by parameter name."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.98,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float, max_grad_norm: Optional[float] = None):
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if max_grad_norm is not None:
            total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if total > max_grad_norm:
                scale = max_grad_norm / (total + 1e-12)
                grads = {k: g * scale for k, g in grads.items()}
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k]
            v = self.v[k]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p = self.params[k]
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def export_state(self) -> dict:
        out = {"t": np.array([float(self.t)])}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out


# -- batched losses ------------------------------------------------------------------


def _context_sets(objective: str, batch: Sequence[Example], mode: str,
                  rng: np.random.Generator):
    sets = []
    for ex in batch:
        n = len(ex.form_tokens)
        if objective == "xh_rand":
            sets.append(xh_rand_context_set(n, rng))
        elif mode == "strict":
            sets.append(strict_context_set(n))
        else:
            sets.append(full_context_set(n))
    return sets


def xh_batch_loss(model: Model, batch: Sequence[Example], contexts,
                  rng: Optional[np.random.Generator] = None, train: bool = True):
    """Mean per-example cross-entropy over token and join contexts.

    Returns (loss Var, per-example numpy losses).
    """
    states = []
    tok_rows, tok_left_gold, tok_right_gold, tok_w = [], [], [], []
    join_rows, join_cols, join_w = [], [], []
    per_ex_tok = []
    per_ex_join = []
    b = len(batch)
    for ex, cs in zip(batch, contexts):
        y = ex.form_tokens
        n = len(y)
        row_of = {}
        for pair in sorted(set(cs.token_pairs) | set(cs.join_pairs)):
            row_of[pair] = len(states)
            states.append(lattice.state_at(ex, pair[0], pair[1]))
        wt = 1.0 / (3.0 * len(cs.token_pairs) * b)
        for p, s in cs.token_pairs:
            tok_rows.append(row_of[(p, s)])
            tok_left_gold.append(y[p])
            tok_right_gold.append(y[n - s - 1])
            tok_w.append(wt)
        wj = 1.0 / (3.0 * len(cs.join_pairs) * b)
        for i, j in cs.join_pairs:
            join_rows.append(row_of[(i, j)])
            join_cols.append(0 if i + j == n else 1)
            join_w.append(wj)
        per_ex_tok.append(len(cs.token_pairs))
        per_ex_join.append(len(cs.join_pairs))

    scores = model.score_states(states, train=train, rng=rng)
    tok_rows = np.asarray(tok_rows)
    left_vals = scores.left_logp[tok_rows, np.asarray(tok_left_gold)]
    right_vals = scores.right_logp[tok_rows, np.asarray(tok_right_gold)]
    join_vals = scores.join_logp[np.asarray(join_rows), np.asarray(join_cols)]
    tok_w = np.asarray(tok_w)
    loss = -(
        (left_vals * tok_w).sum()
        + (right_vals * tok_w).sum()
        + (join_vals * np.asarray(join_w)).sum()
    )

    per_ex = np.zeros(b)
    lv, rv, jv = left_vals.data, right_vals.data, join_vals.data
    tpos = jpos = 0
    for k in range(b):
        t, j = per_ex_tok[k], per_ex_join[k]
        per_ex[k] = -(
            lv[tpos: tpos + t].sum() / t
            + rv[tpos: tpos + t].sum() / t
            + jv[jpos: jpos + j].sum() / j
        ) / 3.0
        tpos += t
        jpos += j
    return loss, per_ex


def mml_batch_loss(model: Model, batch: Sequence[Example], tau: float = 1.0,
                   rng: Optional[np.random.Generator] = None, train: bool = True):
    """Mean negative log marginal likelihood over the batch.

    Scores are gathered in one decoder pass; the order logits are
    divided by the temperature before normalization; the shared
    antidiagonal recurrence then marginalizes per example on the graph.
    """
    states = []
    spans = []
    for ex in batch:
        flat = [s for diag in lattice.states_by_diagonal(ex) for s in diag]
        spans.append((len(states), len(states) + len(flat)))
        states.extend(flat)

    scores = model.score_states(states, train=train, rng=rng)
    order_logp = ad.log_softmax(scores.order_logits * (1.0 / tau))

    n_states = len(states)
    gold_left = np.zeros(n_states, dtype=np.int64)
    gold_right = np.zeros(n_states, dtype=np.int64)
    for (start, _), ex in zip(spans, batch):
        y = ex.form_tokens
        n = len(y)
        pos = start
        for d in range(n + 1):
            for i in range(d + 1):
                if d < n:
                    gold_left[pos] = y[i]
                    gold_right[pos] = y[n - (d - i) - 1]
                pos += 1

    rows = np.arange(n_states)
    a_all = order_logp[rows, np.zeros(n_states, dtype=np.int64)] + scores.left_logp[rows, gold_left]
    b_all = order_logp[rows, np.ones(n_states, dtype=np.int64)] + scores.right_logp[rows, gold_right]
    q_join = scores.join_logp[rows, np.zeros(n_states, dtype=np.int64)]
    q_not = scores.join_logp[rows, np.ones(n_states, dtype=np.int64)]

    neg_lls = []
    for (start, _), ex in zip(spans, batch):
        n = len(ex.form_tokens)
        offs = [start]
        for d in range(n + 1):
            offs.append(offs[-1] + d + 1)
        a_diags = [a_all[offs[d]: offs[d + 1]] for d in range(n)]
        b_diags = [b_all[offs[d]: offs[d + 1]] for d in range(n)]
        q_src = [q_not] * n + [q_join]
        q_diags = [q_src[d + 1][offs[d + 1]: offs[d + 2]] for d in range(n)]
        neg_lls.append(-lattice.forward_over_diagonals(a_diags, b_diags, q_diags))
    total = ad.mean(ad.stack(neg_lls))
    return total, np.array([float(v.data) for v in neg_lls])


def batch_loss(model: Model, batch: Sequence[Example], objective: str,
               tau: float = 1.0, context_mode: str = "full",
               rng: Optional[np.random.Generator] = None, train: bool = True):
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}, got {objective!r}")
    if not batch:
        raise ValueError("batch must be non-empty")
    if objective == "mml":
        return mml_batch_loss(model, batch, tau=tau, rng=rng, train=train)
    ctx_rng = rng if rng is not None else np.random.default_rng(0)
    contexts = _context_sets(objective, batch, context_mode, ctx_rng)
    return xh_batch_loss(model, batch, contexts, rng=rng, train=train)


def loss_and_gradients(model: Model, batch: Sequence[Example], objective: str,
                       step: int = 1, temper: Optional[TemperSchedule] = None,
                       context_mode: str = "full",
                       rng: Optional[np.random.Generator] = None):
    """Evaluate one batch and backpropagate; returns (loss, grads dict).

    Raises on a non-finite loss, naming the first offending example.
    """
    tau = temper.tau_at(step - 1) if (temper and objective == "mml") else 1.0
    for p in model.params.values():
        p.grad = None
    loss, per_ex = batch_loss(
        model, batch, objective, tau=tau, context_mode=context_mode, rng=rng
    )
    if not np.isfinite(per_ex).all():
        bad = int(np.flatnonzero(~np.isfinite(per_ex))[0])
        raise FloatingPointError(
            f"non-finite loss at step {step} for batch example index {bad} "
            f"(lemma {batch[bad].raw_lemma!r})"
        )
    loss.backward()
    grads = {k: p.grad for k, p in model.params.items()}
    return float(loss.data), grads


# -- evaluation ----------------------------------------------------------------------


def decode_example(scorer, ex: Example, width: int, expand_per_side=None,
                   extra_len: int = 10):
    max_len = len(ex.lemma_tokens) + extra_len
    return beam_search(
        scorer, ex.source_tokens(), width=width, max_len=max_len,
        expand_per_side=expand_per_side,
    )


def exact_match(model: Model, examples: Sequence[Example], objective: str,
                width: int = 5, expand_per_side: Optional[int] = None) -> tuple:
    """Exact-match accuracy of beam decodes against the raw gold forms."""
    scorer = NeuralScorer(model)
    if objective in ("xh", "xh_rand"):
        scorer = uniform_order(scorer)
    hits = 0
    outputs = []
    for ex in examples:
        try:
            result = decode_example(scorer, ex, width, expand_per_side)
            best = result.best()
            text = resolve_unk_in_output(best.tokens, model.vocab, ex.raw_lemma, ex.unk_map)
            outputs.append((text, best.ordering))
        except DecodeError:
            outputs.append(("", ""))
            continue
        if text == ex.raw_form:
            hits += 1
    return hits / max(len(examples), 1), outputs


# -- training loop -------------------------------------------------------------------


@dataclass
class TrainSettings:
    objective: str = "xh"
    batch_size: int = 800
    max_steps: int = 100_000
    eval_every: int = 250
    patience: int = 7500
    warmup: int = 4000
    init_lr: float = 1e-7
    context_mode: str = "full"
    temper: Optional[TemperSchedule] = None
    temper_default_for_mml: bool = True
    dev_beam_width: int = 5
    dev_expand_per_side: Optional[int] = 2
    stop_at_dev_acc: Optional[float] = None
    max_grad_norm: Optional[float] = None
    log: Optional[Callable[[dict], None]] = None

    def resolved_temper(self) -> Optional[TemperSchedule]:
        if self.objective != "mml":
            return None
        if self.temper is not None:
            return self.temper
        return TemperSchedule() if self.temper_default_for_mml else None


@dataclass
class TrainResult:
    model: Model
    history: list
    best_step: int
    best_dev_acc: float
    steps_run: int


def train(config: ModelConfig, vocab: Vocabulary, train_set: Sequence[Example],
          dev_set: Sequence[Example], settings: TrainSettings, seed: int = 0) -> TrainResult:
    """Train to best dev exact match with step-based early stopping.

    Deterministic for a fixed seed when run single-threaded: batch
    order, dropout, and context sampling all derive from one generator.
    """
    if not train_set:
        raise ValueError("training set is empty")
    if settings.objective not in OBJECTIVES:
        raise ValueError(f"unknown objective {settings.objective!r}")
    model = Model(config, vocab, seed=seed)
    opt = Adam(model.params)
    rng = np.random.default_rng(seed)
    temper = settings.resolved_temper()

    history = []
    best_acc = -1.0
    best_step = 0
    best_params = model.export_params()
    order = []
    running_loss = 0.0
    since_eval = 0
    for step in range(1, settings.max_steps + 1):
        while len(order) < settings.batch_size:
            order.extend(rng.permutation(len(train_set)).tolist())
        idx, order = order[: settings.batch_size], order[settings.batch_size:]
        batch = [train_set[i] for i in idx]

        tau = temper.tau_at(step - 1) if temper else 1.0
        for p in model.params.values():
            p.grad = None
        loss, per_ex = batch_loss(
            model, batch, settings.objective, tau=tau,
            context_mode=settings.context_mode, rng=rng,
        )
        if not np.isfinite(per_ex).all():
            bad = int(np.flatnonzero(~np.isfinite(per_ex))[0])
            raise FloatingPointError(
                f"non-finite loss at step {step} (example {batch[bad].raw_lemma!r})"
            )
        loss.backward()
        lr = learning_rate_at(step, config.learning_rate, settings.warmup, settings.init_lr)
        opt.step(lr, settings.max_grad_norm)
        running_loss += float(loss.data)
        since_eval += 1

        if step % settings.eval_every == 0 or step == settings.max_steps:
            acc, _ = exact_match(
                model, dev_set, settings.objective,
                width=settings.dev_beam_width,
                expand_per_side=settings.dev_expand_per_side,
            )
            entry = {
                "step": step,
                "loss": running_loss / max(since_eval, 1),
                "dev_acc": acc,
                "lr": lr,
                "tau": tau,
            }
            history.append(entry)
            if settings.log:
                settings.log(entry)
            running_loss = 0.0
            since_eval = 0
            if acc > best_acc:
                best_acc = acc
                best_step = step
                best_params = model.export_params()
            if settings.stop_at_dev_acc is not None and acc >= settings.stop_at_dev_acc:
                break
            if step - best_step >= settings.patience:
                break

    model.load_param_arrays(best_params)
    return TrainResult(
        model=model,
        history=history,
        best_step=best_step,
        best_dev_acc=max(best_acc, 0.0),
        steps_run=step,
    )
