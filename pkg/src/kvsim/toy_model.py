"""Tiny deterministic decoder-only transformer for closed-loop experiments.

Pre-norm residual blocks, group-query attention, rotary positions, greedy
decoding, all in float64 numpy. Small enough that full-sequence recompute
is cheap, which keeps the three decoding paths (full, compressed, masked)
trivially comparable: they share the exact same per-token arithmetic and
differ only in which keys each query may attend to.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import EvictionConfig, EvictionEngine
from .trace import DecodeTrace, TraceHeader


@dataclass(frozen=True)
class ToyModelConfig:
    n_layers: int = 2
    d_model: int = 64
    n_q_heads: int = 4
    n_kv_heads: int = 2
    head_dim: int = 16
    vocab_size: int = 256
    rotary_base: float = 10000.0
    seed: int = 0

    def validate(self) -> None:
        if self.d_model != self.n_q_heads * self.head_dim:
            raise ValueError(
                f"d_model must equal n_q_heads * head_dim "
                f"({self.d_model} != {self.n_q_heads} * {self.head_dim})"
            )
        if self.n_q_heads % self.n_kv_heads != 0:
            raise ValueError("n_q_heads must be a multiple of n_kv_heads")
        if min(self.n_layers, self.vocab_size, self.head_dim, self.n_kv_heads) < 1:
            raise ValueError("all dimensions must be positive")
        if self.head_dim % 2 != 0:
            raise ValueError("head_dim must be even for rotary pairs")


class ToyModel:
    """Weights are drawn once from a seeded generator and never mutated."""

    def __init__(self, cfg: ToyModelConfig):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        dm = cfg.d_model
        dh = cfg.head_dim
        ff = 2 * dm
        scale = 1.0 / np.sqrt(dm)

        def mat(rows, cols):
            return rng.standard_normal((rows, cols)) * scale

        self.embed = rng.standard_normal((cfg.vocab_size, dm)) * 0.5
        self.layers = []
        for _ in range(cfg.n_layers):
            self.layers.append(
                {
                    "ln1": 1.0 + 0.1 * rng.standard_normal(dm),
                    "wq": mat(dm, cfg.n_q_heads * dh),
                    "wk": mat(dm, cfg.n_kv_heads * dh),
                    "wv": mat(dm, cfg.n_kv_heads * dh),
                    "wo": mat(cfg.n_q_heads * dh, dm),
                    "ln2": 1.0 + 0.1 * rng.standard_normal(dm),
                    "w1": mat(dm, ff),
                    "w2": mat(ff, dm),
                }
            )
        self.ln_f = 1.0 + 0.1 * rng.standard_normal(dm)
        self.unembed = mat(dm, cfg.vocab_size)
        half = dh // 2
        self.inv_freq = cfg.rotary_base ** (-np.arange(half) / half)

    # -- primitives ---------------------------------------------------------

    @staticmethod
    def _rms_norm(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
        rms = np.sqrt((x * x).mean(axis=-1, keepdims=True) + 1e-6)
        return x / rms * weight

    def _rotate(self, x: np.ndarray, positions: np.ndarray) -> np.ndarray:
        """Apply rotary embedding at absolute positions; x is (..., T, dh)."""
        angles = positions[:, None] * self.inv_freq[None, :]  # (T, dh/2)
        cos, sin = np.cos(angles), np.sin(angles)
        half = x.shape[-1] // 2
        x1, x2 = x[..., :half], x[..., half:]
        return np.concatenate([x1 * cos - x2 * sin, x2 * cos + x1 * sin], axis=-1)

    def _qkv(self, h_normed: np.ndarray, layer: dict, positions: np.ndarray):
        """Project one layer's hidden states to post-rotary Q/K and V.

        h_normed: (T, d_model) -> q (h_q, T, dh), k/v (h_kv, T, dh).
        """
        cfg = self.cfg
        T = h_normed.shape[0]
        q = (h_normed @ layer["wq"]).reshape(T, cfg.n_q_heads, cfg.head_dim).transpose(1, 0, 2)
        k = (h_normed @ layer["wk"]).reshape(T, cfg.n_kv_heads, cfg.head_dim).transpose(1, 0, 2)
        v = (h_normed @ layer["wv"]).reshape(T, cfg.n_kv_heads, cfg.head_dim).transpose(1, 0, 2)
        return self._rotate(q, positions), self._rotate(k, positions), v

    # -- full-sequence forward ------------------------------------------------

    def forward_full(
        self,
        token_ids: np.ndarray,
        masks=None,
        collect_qk: bool = False,
    ):
        """Causal forward pass over the whole sequence.

        masks, when given, supplies per (layer, kv-head) visibility: an
        object with dense(layer, head) -> (T, T) bool array indexed
        [query, key]. Returns (logits, trace_q, trace_k); the trace arrays
        are None unless collect_qk.
        """
        cfg = self.cfg
        ids = np.asarray(token_ids, dtype=np.int64)
        if ids.min(initial=0) < 0 or ids.max(initial=0) >= cfg.vocab_size:
            raise ValueError("token id out of vocabulary range")
        T = len(ids)
        positions = np.arange(T)
        group = cfg.n_q_heads // cfg.n_kv_heads
        h = self.embed[ids]
        trace_q = (
            np.empty((T, cfg.n_layers, cfg.n_q_heads, cfg.head_dim)) if collect_qk else None
        )
        trace_k = (
            np.empty((T, cfg.n_layers, cfg.n_kv_heads, cfg.head_dim)) if collect_qk else None
        )
        causal = np.tril(np.ones((T, T), dtype=bool))
        for li, layer in enumerate(self.layers):
            q, k, v = self._qkv(self._rms_norm(h, layer["ln1"]), layer, positions)
            if collect_qk:
                trace_q[:, li] = q.transpose(1, 0, 2)
                trace_k[:, li] = k.transpose(1, 0, 2)
            attn_out = np.empty((cfg.n_q_heads, T, cfg.head_dim))
            for qi in range(cfg.n_q_heads):
                kv = qi // group
                allowed = causal if masks is None else masks.dense(li, kv)
                if allowed.shape != (T, T):
                    raise ValueError("mask shape mismatch")
                if np.any(allowed & ~causal):
                    raise ValueError("non-causal mask: a query attends to a later key")
                logits = q[qi] @ k[kv].T / np.sqrt(cfg.head_dim)
                logits = np.where(allowed, logits, -np.inf)
                logits -= logits.max(axis=-1, keepdims=True)
                weights = np.exp(logits)
                weights /= weights.sum(axis=-1, keepdims=True)
                attn_out[qi] = weights @ v[kv]
            h = h + attn_out.transpose(1, 0, 2).reshape(T, cfg.d_model) @ layer["wo"]
            ffn_in = self._rms_norm(h, layer["ln2"])
            h = h + np.maximum(ffn_in @ layer["w1"], 0.0) @ layer["w2"]
        logits = self._rms_norm(h, self.ln_f) @ self.unembed
        return logits, trace_q, trace_k


def init(cfg: ToyModelConfig) -> ToyModel:
    return ToyModel(cfg)


def decode_full(model: ToyModel, prompt_ids, n_generate: int):
    """Greedy decoding with full attention.

    Returns (token_ids, DecodeTrace, per-step logits (T, vocab)).
    """
    prompt_ids = list(int(t) for t in prompt_ids)
    if not prompt_ids:
        raise ValueError("prompt must be non-empty")
    cfg = model.cfg
    ids = list(prompt_ids)
    for _ in range(n_generate):
        logits, _, _ = model.forward_full(np.asarray(ids))
        ids.append(int(np.argmax(logits[-1])))
    logits, trace_q, trace_k = model.forward_full(np.asarray(ids), collect_qk=True)
    header = TraceHeader(
        n_layers=cfg.n_layers,
        n_q_heads=cfg.n_q_heads,
        n_kv_heads=cfg.n_kv_heads,
        head_dim=cfg.head_dim,
        n_prompt=len(prompt_ids),
        n_steps=len(ids),
        has_token_ids=True,
        has_token_text=True,
    )
    trace = DecodeTrace(
        header=header,
        q_states=trace_q.astype(np.float32),
        k_states=trace_k.astype(np.float32),
        token_ids=np.asarray(ids, dtype=np.uint32),
        token_text=[f"t{t}" for t in ids],
    )
    trace.validate()
    return ids, trace, logits


def decode_compressed(model: ToyModel, prompt_ids, n_generate: int, cfg: EvictionConfig):
    """Greedy decoding where each head attends only to its retained cache.

    Eviction decisions come from the same engine the trace simulator uses.
    Returns (token_ids, per-step logits, EvictionLog).
    """
    prompt_ids = list(int(t) for t in prompt_ids)
    if not prompt_ids:
        raise ValueError("prompt must be non-empty")
    mc = model.cfg
    engine = EvictionEngine(cfg, mc.n_layers, mc.n_q_heads, mc.n_kv_heads, mc.head_dim)
    group = mc.n_q_heads // mc.n_kv_heads

    # per (layer, kv head): retained positions + K/V rows, kept in sync with
    # the engine after every eviction event
    k_cache = [[[] for _ in range(mc.n_kv_heads)] for _ in range(mc.n_layers)]
    v_cache = [[[] for _ in range(mc.n_kv_heads)] for _ in range(mc.n_layers)]
    pos_cache = [[[] for _ in range(mc.n_kv_heads)] for _ in range(mc.n_layers)]

    ids: list[int] = []
    logits_rows: list[np.ndarray] = []

    def apply_events(events):
        for ev in events:
            keep = set(ev.retained)
            pc = pos_cache[ev.layer][ev.head]
            keep_idx = [i for i, p in enumerate(pc) if p in keep]
            pos_cache[ev.layer][ev.head] = [pc[i] for i in keep_idx]
            k_cache[ev.layer][ev.head] = [k_cache[ev.layer][ev.head][i] for i in keep_idx]
            v_cache[ev.layer][ev.head] = [v_cache[ev.layer][ev.head][i] for i in keep_idx]

    def forward_token(token_id: int, position: int):
        """One incremental step; returns (logits_row, q_tok, k_tok)."""
        h = model.embed[token_id].copy()
        q_tok = np.empty((mc.n_layers, mc.n_q_heads, mc.head_dim))
        k_tok = np.empty((mc.n_layers, mc.n_kv_heads, mc.head_dim))
        pos_arr = np.asarray([position])
        for li, layer in enumerate(model.layers):
            q, k, v = model._qkv(model._rms_norm(h[None, :], layer["ln1"]), layer, pos_arr)
            q_tok[li] = q[:, 0]
            k_tok[li] = k[:, 0]
            for kv in range(mc.n_kv_heads):
                k_cache[li][kv].append(k[kv, 0])
                v_cache[li][kv].append(v[kv, 0])
                pos_cache[li][kv].append(position)
            attn_out = np.empty((mc.n_q_heads, mc.head_dim))
            for qi in range(mc.n_q_heads):
                kv = qi // group
                keys = np.stack(k_cache[li][kv])
                vals = np.stack(v_cache[li][kv])
                logit = keys @ q[qi, 0] / np.sqrt(mc.head_dim)
                logit -= logit.max()
                wts = np.exp(logit)
                wts /= wts.sum()
                attn_out[qi] = wts @ vals
            h = h + attn_out.reshape(mc.d_model) @ layer["wo"]
            ffn_in = model._rms_norm(h[None, :], layer["ln2"])[0]
            h = h + np.maximum(ffn_in @ layer["w1"], 0.0) @ layer["w2"]
        row = model._rms_norm(h[None, :], model.ln_f)[0] @ model.unembed
        return row, q_tok, k_tok

    # prefill: prompt tokens run through the same incremental path
    prompt_q, prompt_k = [], []
    for t, tok in enumerate(prompt_ids):
        row, q_tok, k_tok = forward_token(tok, t)
        ids.append(tok)
        logits_rows.append(row)
        prompt_q.append(q_tok)
        prompt_k.append(k_tok)
    apply_events(engine.prefill(np.stack(prompt_q), np.stack(prompt_k)))

    for _ in range(n_generate):
        next_id = int(np.argmax(logits_rows[-1]))
        row, q_tok, k_tok = forward_token(next_id, len(ids))
        ids.append(next_id)
        logits_rows.append(row)
        apply_events(engine.step(q_tok, k_tok))

    log = engine.log
    log.seq_len = len(ids)
    return ids, np.stack(logits_rows), log


def forward_masked(model: ToyModel, token_ids, masks) -> np.ndarray:
    """Full-sequence forward under a sparse visibility mask set.

    masks must provide dense(layer, kv_head) -> (T, T) bool [query, key].
    """
    logits, _, _ = model.forward_full(np.asarray(token_ids), masks=masks)
    return logits


class FullCausalMasks:
    """Mask set equivalent to ordinary causal attention."""

    def __init__(self, seq_len: int):
        self._mask = np.tril(np.ones((seq_len, seq_len), dtype=bool))

    def dense(self, layer: int, head: int) -> np.ndarray:
        return self._mask
