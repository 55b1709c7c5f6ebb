"""Character-level encoder-decoder scorer with four classification heads.

The encoder is a standard transformer over the source (lemma characters,
separator, tag tokens). The decoder takes one prefix-suffix state as

    <cls:join> <cls:order> <bos> prefix... <cls:left> <cls:right> suffix... <eos>

runs full (unmasked) self-attention plus cross-attention over the source
memory, and reads four heads off designated positions: the join decision
from the first classification token, the side decision from the second,
the next-left-token distribution from the token before the suffix block,
and the next-right-token distribution from the token after it. Nothing
is cached between states: every state is scored by a fresh decoder pass,
which is what makes the scorer a pure function of (source, prefix,
suffix) and licenses the dynamic program.

Positions are sinusoidal with two index streams: the left block counts
up from zero, while the suffix block counts down toward the end marker
inside a disjoint index range, so a suffix token keeps its positional
code as the prefix grows and right-side patterns are translation
invariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NEG_BIG, Var
from .scoring import DecodeState, LocalScores, Scorer
from .vocab import Vocabulary

# Right-stream position indices start here; keeps the two streams' codes
# disjoint for any supported max_len.
RIGHT_STREAM_BASE = 512

PRESETS = {
    "S": dict(embed_dim=64, ffn_dim=256, n_layers=2, n_heads=2, learning_rate=0.005),
    "M": dict(embed_dim=128, ffn_dim=512, n_layers=3, n_heads=4, learning_rate=0.001),
    "L": dict(embed_dim=256, ffn_dim=1024, n_layers=4, n_heads=8, learning_rate=0.001),
}


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    ffn_dim: int = 256
    n_layers: int = 2
    n_heads: int = 2
    learning_rate: float = 0.005
    dropout: float = 0.3
    max_len: int = 64
    size_preset: str = "custom"
    dtype: str = "float32"

    def __post_init__(self):
        if self.embed_dim % self.n_heads != 0:
            raise ValueError("embed_dim must be divisible by n_heads")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.max_len < 1 or self.max_len > RIGHT_STREAM_BASE - 12:
            raise ValueError(f"max_len must be in [1, {RIGHT_STREAM_BASE - 12}]")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.size_preset in PRESETS:
            for k, v in PRESETS[self.size_preset].items():
                if getattr(self, k) != v:
                    raise ValueError(f"preset {self.size_preset} requires {k}={v}")

    def to_dict(self) -> dict:
        return {
            "embed_dim": self.embed_dim,
            "ffn_dim": self.ffn_dim,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "learning_rate": self.learning_rate,
            "dropout": self.dropout,
            "max_len": self.max_len,
            "size_preset": self.size_preset,
            "dtype": self.dtype,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def preset_config(name: str, **overrides) -> ModelConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return ModelConfig(size_preset=name, **PRESETS[name], **overrides)


def sinusoid_table(n_positions: int, dim: int, dtype) -> np.ndarray:
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    i = np.arange(dim, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2 * (i // 2) / dim)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return table.astype(dtype)


@dataclass
class StateScores:
    """Batched head outputs for a list of states (graph-carrying in train
    mode). ``order_logits`` is left raw so callers can temper it."""

    left_logp: Var
    right_logp: Var
    order_logits: Var
    join_logp: Var


class Model:
    """Transformer scorer; parameters live in a flat name->Var dict."""

    def __init__(self, config: ModelConfig, vocab: Vocabulary, seed: int = 0):
        self.config = config
        self.vocab = vocab
        self.seed = seed
        self.dtype = np.dtype(config.dtype)
        self.params: dict = {}
        self._init_params(np.random.default_rng(seed))
        self._pos_table = sinusoid_table(
            RIGHT_STREAM_BASE + config.max_len + 8, config.embed_dim, self.dtype
        )
        self._cls_base = len(vocab)

    # -- parameter construction -------------------------------------------------
    def _add(self, name: str, arr: np.ndarray):
        self.params[name] = Var.param(arr.astype(self.dtype))

    def _glorot(self, rng, fan_in, fan_out):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    def _init_attn(self, rng, prefix: str):
        d = self.config.embed_dim
        for w in ("wq", "wk", "wv", "wo"):
            self._add(f"{prefix}.{w}", self._glorot(rng, d, d))
            self._add(f"{prefix}.{w[1]}b", np.zeros(d))

    def _init_block(self, rng, prefix: str, cross: bool):
        d, f = self.config.embed_dim, self.config.ffn_dim
        self._init_attn(rng, f"{prefix}.attn")
        self._add(f"{prefix}.ln1.g", np.ones(d))
        self._add(f"{prefix}.ln1.b", np.zeros(d))
        if cross:
            self._init_attn(rng, f"{prefix}.cross")
            self._add(f"{prefix}.ln2.g", np.ones(d))
            self._add(f"{prefix}.ln2.b", np.zeros(d))
        self._add(f"{prefix}.ffn.w1", self._glorot(rng, d, f))
        self._add(f"{prefix}.ffn.b1", np.zeros(f))
        self._add(f"{prefix}.ffn.w2", self._glorot(rng, f, d))
        self._add(f"{prefix}.ffn.b2", np.zeros(d))
        self._add(f"{prefix}.ln3.g", np.ones(d))
        self._add(f"{prefix}.ln3.b", np.zeros(d))

    def _init_params(self, rng):
        cfg = self.config
        d, v = cfg.embed_dim, len(self.vocab)
        self._add("embed.tok", rng.normal(0.0, d ** -0.5, size=(v, d)))
        self._add("embed.cls", rng.normal(0.0, d ** -0.5, size=(4, d)))
        for side in ("encoder", "decoder"):
            for layer in range(cfg.n_layers):
                self._init_block(rng, f"{side}.{layer}", cross=side == "decoder")
            self._add(f"{side}.ln_out.g", np.ones(d))
            self._add(f"{side}.ln_out.b", np.zeros(d))
        for head, width in (("left", v), ("right", v), ("join", 2), ("order", 2)):
            self._add(f"head.{head}.w", self._glorot(rng, d, width))
            self._add(f"head.{head}.b", np.zeros(width))

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def export_params(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_param_arrays(self, arrays: dict):
        for k, v in self.params.items():
            if k not in arrays:
                raise ValueError(f"missing tensor {k!r}")
            if arrays[k].shape != v.data.shape:
                raise ValueError(
                    f"tensor {k!r} has shape {arrays[k].shape}, expected {v.data.shape}"
                )
            v.data = arrays[k].astype(self.dtype)

    # -- forward pieces -----------------------------------------------------------
    def _p(self, name: str) -> Var:
        return self.params[name]

    def _attention(self, prefix, q_in, kv_in, key_mask):
        """Multi-head scaled dot-product attention.

        ``key_mask`` is an additive (B, 1, 1, Tk) bias with NEG_BIG at
        padded key positions.
        """
        cfg = self.config
        h, d = cfg.n_heads, cfg.embed_dim
        dk = d // h
        bq, tq = q_in.shape[0], q_in.shape[1]
        tk = kv_in.shape[1]

        def split(x, t):
            return ad.transpose(ad.reshape(x, (bq, t, h, dk)), (0, 2, 1, 3))

        q = split(q_in @ self._p(f"{prefix}.wq") + self._p(f"{prefix}.qb"), tq)
        k = split(kv_in @ self._p(f"{prefix}.wk") + self._p(f"{prefix}.kb"), tk)
        v = split(kv_in @ self._p(f"{prefix}.wv") + self._p(f"{prefix}.vb"), tk)
        scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (dk ** -0.5)
        scores = scores + key_mask
        ctx = ad.matmul(ad.softmax(scores, axis=-1), v)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (bq, tq, d))
        return merged @ self._p(f"{prefix}.wo") + self._p(f"{prefix}.ob")

    def _block(self, prefix, x, self_mask, memory=None, mem_mask=None,
               drop_rate=0.0, rng=None):
        ln = lambda tag, h: ad.layer_norm(
            h, self._p(f"{prefix}.{tag}.g"), self._p(f"{prefix}.{tag}.b")
        )
        normed = ln("ln1", x)
        a = self._attention(f"{prefix}.attn", normed, normed, self_mask)
        x = x + ad.dropout(a, drop_rate, rng)
        if memory is not None:
            c = self._attention(f"{prefix}.cross", ln("ln2", x), memory, mem_mask)
            x = x + ad.dropout(c, drop_rate, rng)
        hidden = ad.relu(ln("ln3", x) @ self._p(f"{prefix}.ffn.w1") + self._p(f"{prefix}.ffn.b1"))
        f = hidden @ self._p(f"{prefix}.ffn.w2") + self._p(f"{prefix}.ffn.b2")
        return x + ad.dropout(f, drop_rate, rng)

    def _embed(self, ids: np.ndarray, positions: np.ndarray, drop_rate, rng) -> Var:
        table = ad.concat([self._p("embed.tok"), self._p("embed.cls")], axis=0)
        emb = table[ids] * float(np.sqrt(self.config.embed_dim))
        emb = emb + self._pos_table[positions]
        return ad.dropout(emb, drop_rate, rng)

    @staticmethod
    def _key_bias(mask: np.ndarray, dtype) -> np.ndarray:
        bias = np.where(mask, 0.0, NEG_BIG).astype(dtype)
        return bias[:, None, None, :]

    def encode(self, sources: Sequence[tuple], train: bool = False,
               rng: Optional[np.random.Generator] = None):
        """Encode source token sequences; returns (memory, key_mask)."""
        for src in sources:
            if len(src) > self.config.max_len:
                raise ValueError(
                    f"source of length {len(src)} exceeds max_len {self.config.max_len}"
                )
        drop = self.config.dropout if train else 0.0
        smax = max(len(s) for s in sources)
        ids = np.full((len(sources), smax), self.vocab.pad_id, dtype=np.int64)
        mask = np.zeros((len(sources), smax), dtype=bool)
        for r, src in enumerate(sources):
            ids[r, : len(src)] = src
            mask[r, : len(src)] = True
        positions = np.broadcast_to(np.arange(smax), ids.shape)
        x = self._embed(ids, positions, drop, rng)
        bias = self._key_bias(mask, self.dtype)
        for layer in range(self.config.n_layers):
            x = self._block(f"encoder.{layer}", x, bias, drop_rate=drop, rng=rng)
        memory = ad.layer_norm(x, self._p("encoder.ln_out.g"), self._p("encoder.ln_out.b"))
        return memory, mask

    def _decoder_layout(self, state: DecodeState):
        """Token ids and position indices for one state row."""
        v = self._cls_base
        p, s = list(state.prefix), list(state.suffix)
        ids = [v, v + 1, self.vocab.bos_id] + p + [v + 2, v + 3] + s + [self.vocab.eos_id]
        left_positions = list(range(3 + len(p))) + [3 + len(p)]
        right_positions = [RIGHT_STREAM_BASE + len(s) + 1] + [
            RIGHT_STREAM_BASE + len(s) - k for k in range(len(s))
        ] + [RIGHT_STREAM_BASE]
        return ids, left_positions + right_positions

    def score_states(self, states: Sequence[DecodeState], train: bool = False,
                     rng: Optional[np.random.Generator] = None) -> StateScores:
        """Run the decoder over a batch of states (one row each).

        Also encodes each distinct source once and routes rows to their
        memory. Row order matches the input order.
        """
        if not states:
            raise ValueError("no states to score")
        for st in states:
            if len(st) > self.config.max_len:
                raise ValueError(
                    f"state of length {len(st)} exceeds max_len {self.config.max_len}"
                )
        drop = self.config.dropout if train else 0.0
        sources = list(dict.fromkeys(st.source for st in states))
        src_row = {src: r for r, src in enumerate(sources)}
        memory, src_mask = self.encode(sources, train=train, rng=rng)

        layouts = [self._decoder_layout(st) for st in states]
        tmax = max(len(ids) for ids, _ in layouts)
        n = len(states)
        ids = np.full((n, tmax), self.vocab.pad_id, dtype=np.int64)
        positions = np.zeros((n, tmax), dtype=np.int64)
        mask = np.zeros((n, tmax), dtype=bool)
        src_idx = np.empty(n, dtype=np.int64)
        left_pos = np.empty(n, dtype=np.int64)
        for r, (st, (row_ids, row_pos)) in enumerate(zip(states, layouts)):
            ids[r, : len(row_ids)] = row_ids
            positions[r, : len(row_ids)] = row_pos
            mask[r, : len(row_ids)] = True
            src_idx[r] = src_row[st.source]
            left_pos[r] = 3 + len(st.prefix)

        x = self._embed(ids, positions, drop, rng)
        self_bias = self._key_bias(mask, self.dtype)
        mem_rows = memory[src_idx]
        mem_bias = self._key_bias(src_mask, self.dtype)[src_idx]
        for layer in range(self.config.n_layers):
            x = self._block(
                f"decoder.{layer}", x, self_bias,
                memory=mem_rows, mem_mask=mem_bias, drop_rate=drop, rng=rng,
            )
        hs = ad.layer_norm(x, self._p("decoder.ln_out.g"), self._p("decoder.ln_out.b"))

        rows = np.arange(n)
        h_join = hs[rows, np.zeros(n, dtype=np.int64)]
        h_order = hs[rows, np.ones(n, dtype=np.int64)]
        h_left = hs[rows, left_pos]
        h_right = hs[rows, left_pos + 1]

        def head(name, h):
            return h @ self._p(f"head.{name}.w") + self._p(f"head.{name}.b")

        return StateScores(
            left_logp=ad.log_softmax(head("left", h_left)),
            right_logp=ad.log_softmax(head("right", h_right)),
            order_logits=head("order", h_order),
            join_logp=ad.log_softmax(head("join", h_join)),
        )

    # -- inference ------------------------------------------------------------------
    def decode_scores(self, state: DecodeState) -> LocalScores:
        return self.scorer().score(state)

    def scorer(self) -> "NeuralScorer":
        return NeuralScorer(self)


class NeuralScorer(Scorer):
    """Inference adapter: pure (source, prefix, suffix) -> LocalScores."""

    def __init__(self, model: Model):
        self.model = model
        self.vocab_size = len(model.vocab)
        self.max_state_len = model.config.max_len

    def score(self, state: DecodeState) -> LocalScores:
        return self.score_batch([state])[0]

    def score_batch(self, states: Sequence[DecodeState]) -> list:
        for st in states:
            self._check_len(st)
        with ad.no_grad():
            out = self.model.score_states(list(states), train=False)
            order_logp = ad.log_softmax(out.order_logits)
        left = np.asarray(out.left_logp.data)
        right = np.asarray(out.right_logp.data)
        order = np.asarray(order_logp.data)
        join = np.asarray(out.join_logp.data)
        return [
            LocalScores(
                left_token_logp=left[r],
                right_token_logp=right[r],
                order_left_logp=float(order[r, 0]),
                order_right_logp=float(order[r, 1]),
                join_logp=float(join[r, 0]),
                not_join_logp=float(join[r, 1]),
            )
            for r in range(len(states))
        ]
