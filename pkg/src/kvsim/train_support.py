"""Training-side mathematics: sparse attention masks derived from eviction
logs, group-standardized advantages, the clipped policy objective, the
soft-target distillation loss, and closed-form memory estimators.

Masks are stored sparsely as (position, evicted_at_step) records; a dense
(seq_len x seq_len) boolean mask is materialized only on request, because
dense masks dominate memory at even modest sequence lengths.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from .engine import EvictionLog

logger = logging.getLogger(__name__)

_STD_FLOOR = 1e-8


@dataclass(frozen=True)
class EvictionRecord:
    position: int
    evicted_at_step: int


class SparseMaskSet:
    """Per (layer, kv-head) visibility relation between token positions.

    visible(layer, head, i, j) is True iff query position j may attend to
    key position i: requires i <= j (causality) and that token i was not
    evicted at a step <= j. Query heads share the mask of their kv head.
    Read-only after construction; safe for concurrent row queries.
    """

    def __init__(self, seq_len: int, n_layers: int, n_kv_heads: int):
        if seq_len < 0:
            raise ValueError("seq_len must be >= 0")
        self.seq_len = seq_len
        self.n_layers = n_layers
        self.n_kv_heads = n_kv_heads
        self._records: dict[tuple[int, int], list[EvictionRecord]] = {
            (layer, head): [] for layer in range(n_layers) for head in range(n_kv_heads)
        }
        self._evict_step: dict[tuple[int, int], np.ndarray] = {}

    def add_record(self, layer: int, head: int, position: int, evicted_at_step: int) -> None:
        if not 0 <= position < self.seq_len:
            raise ValueError(f"position {position} out of range for seq_len {self.seq_len}")
        self._records[(layer, head)].append(EvictionRecord(position, evicted_at_step))
        self._evict_step.pop((layer, head), None)

    def records(self, layer: int, head: int) -> list[EvictionRecord]:
        return list(self._records[(layer, head)])

    def _steps(self, layer: int, head: int) -> np.ndarray:
        key = (layer, head)
        cached = self._evict_step.get(key)
        if cached is None:
            cached = np.full(self.seq_len, np.iinfo(np.int64).max, dtype=np.int64)
            for rec in self._records[key]:
                cached[rec.position] = min(cached[rec.position], rec.evicted_at_step)
            self._evict_step[key] = cached
        return cached

    def visible(self, layer: int, head: int, i: int, j: int) -> bool:
        """May query j attend to key i in this (layer, kv head)?"""
        if i > j:
            return False
        return bool(self._steps(layer, head)[i] > j)

    def dense(self, layer: int, head: int) -> np.ndarray:
        """(seq_len, seq_len) bool array indexed [query, key]."""
        n = self.seq_len
        causal = np.tril(np.ones((n, n), dtype=bool))
        # key i is hidden from queries at positions >= its eviction step
        shadow = np.arange(n)[:, None] >= self._steps(layer, head)[None, :]
        return causal & ~shadow

    def to_json(self) -> str:
        masks = []
        for (layer, head), recs in sorted(self._records.items()):
            masks.append(
                {
                    "layer": layer,
                    "head": head,
                    "records": [
                        {"position": r.position, "evicted_at_step": r.evicted_at_step}
                        for r in recs
                    ],
                }
            )
        return json.dumps(
            {
                "seq_len": self.seq_len,
                "n_layers": self.n_layers,
                "n_kv_heads": self.n_kv_heads,
                "masks": masks,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "SparseMaskSet":
        d = json.loads(text)
        out = cls(d["seq_len"], d["n_layers"], d["n_kv_heads"])
        for m in d["masks"]:
            for r in m["records"]:
                out.add_record(m["layer"], m["head"], r["position"], r["evicted_at_step"])
        return out


def build_masks(log: EvictionLog, seq_len: int) -> SparseMaskSet:
    """Derive the visibility relation implied by an eviction log."""
    masks = SparseMaskSet(seq_len, log.n_layers, log.n_kv_heads)
    for ev in log.events:
        for pos in ev.evicted:
            if pos >= seq_len:
                raise ValueError(f"evicted position {pos} out of range for seq_len {seq_len}")
            masks.add_record(ev.layer, ev.head, pos, ev.step)
    return masks


@dataclass
class GroupSample:
    """Rewards of one sampled group, with length-truncation flags."""

    rewards: list[float] | np.ndarray
    truncated: list[bool] | None = None

    def __post_init__(self) -> None:
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.truncated is None:
            self.truncated = [False] * len(self.rewards)
        if len(self.truncated) != len(self.rewards):
            raise ValueError("truncated flags must align with rewards")

    @property
    def size(self) -> int:
        return len(self.rewards)


def grpo_advantages(g: GroupSample) -> np.ndarray:
    """Group-standardized advantages: (r_i - mean) / std, population std.

    Truncated samples get advantage 0 after standardization. A degenerate
    group (std below 1e-8) yields all zeros and logs a warning.
    """
    if g.size < 2:
        raise ValueError(f"group size must be >= 2, got {g.size}")
    mean = g.rewards.mean()
    std = g.rewards.std()  # population std
    if std < _STD_FLOOR:
        logger.warning("degenerate reward group (std < %.0e); advantages zeroed", _STD_FLOOR)
        return np.zeros(g.size)
    adv = (g.rewards - mean) / std
    adv[np.asarray(g.truncated, dtype=bool)] = 0.0
    return adv


def clipped_objective(logp_new, logp_old, advantages, epsilon: float) -> float:
    """Clipped surrogate objective, averaged per token then per sample.

    Each argument is a sequence of per-sample arrays aligned token-wise.
    Per token: ratio = exp(logp_new - logp_old), and the contribution is
    min(ratio * A, clip(ratio, 1-eps, 1+eps) * A). Callers drop samples
    whose advantages were zeroed for truncation if they want them out of
    the sample mean.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if not (len(logp_new) == len(logp_old) == len(advantages)):
        raise ValueError("per-sample arrays misaligned")
    if len(logp_new) == 0:
        raise ValueError("need at least one sample")
    sample_means = []
    for lpn, lpo, adv in zip(logp_new, logp_old, advantages):
        lpn = np.asarray(lpn, dtype=np.float64)
        lpo = np.asarray(lpo, dtype=np.float64)
        adv = np.asarray(adv, dtype=np.float64)
        if not (lpn.shape == lpo.shape == adv.shape):
            raise ValueError("token arrays misaligned within a sample")
        ratio = np.exp(lpn - lpo)
        term = np.minimum(ratio * adv, np.clip(ratio, 1.0 - epsilon, 1.0 + epsilon) * adv)
        sample_means.append(term.mean())
    return float(np.mean(sample_means))


def distill_loss(teacher_logits, student_logits, tau: float) -> float:
    """Soft-target loss: tau^2 * KL(teacher || student) at temperature tau.

    Accepts (vocab,) or (positions, vocab) logits; KL is averaged over
    positions. Always >= 0; zero iff the softened distributions coincide.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    t = np.asarray(teacher_logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if t.shape != s.shape:
        raise ValueError(f"logit shape mismatch: {t.shape} vs {s.shape}")
    if t.ndim == 1:
        t = t[None, :]
        s = s[None, :]
    t = t / tau
    s = s / tau
    t_log = t - _logsumexp(t)
    s_log = s - _logsumexp(s)
    kl = (np.exp(t_log) * (t_log - s_log)).sum(axis=-1)
    return float(tau * tau * kl.mean())


def _logsumexp(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return m + np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


# -- memory estimators (exact integer byte arithmetic) -----------------------


def kv_memory_bytes(
    layers: int, head_dim: int, h_kv: int, seq_len: int, bytes_per_el: int, batch: int = 1
) -> int:
    """Bytes of key + value states for a batch of full-length sequences."""
    _positive(layers=layers, head_dim=head_dim, h_kv=h_kv, seq_len=seq_len,
              bytes_per_el=bytes_per_el, batch=batch)
    return layers * head_dim * h_kv * seq_len * 2 * bytes_per_el * batch


def compressed_fraction(budget: int, stride: int, seq_len: int) -> float:
    """Fraction of the full cache a budgeted run holds: (b + s) / seq_len."""
    _positive(budget=budget, stride=stride, seq_len=seq_len)
    return (budget + stride) / seq_len


def compressed_kv_bytes(
    layers: int, head_dim: int, h_kv: int, seq_len: int, bytes_per_el: int,
    budget: int, stride: int, batch: int = 1,
) -> int:
    """Exact compressed-cache bytes (integer multiply before divide)."""
    full = kv_memory_bytes(layers, head_dim, h_kv, seq_len, bytes_per_el, batch)
    return full * (budget + stride) // seq_len


def score_cache_fraction(budget: int, window: int, head_dim: int) -> float:
    """Carried-score bytes as a fraction of KV bytes: (b - w) / (2 b d)."""
    _positive(budget=budget, head_dim=head_dim)
    if not 0 <= window < budget:
        raise ValueError("need 0 <= window < budget")
    return (budget - window) / (budget * head_dim * 2)


def mask_memory_bytes(batch: int, layers: int, h_kv: int, seq_len: int) -> int:
    """Bytes of dense one-byte attention masks for a training batch."""
    _positive(batch=batch, layers=layers, h_kv=h_kv, seq_len=seq_len)
    return batch * layers * h_kv * seq_len * seq_len


def _positive(**kwargs: int) -> None:
    for name, value in kwargs.items():
        if value <= 0:
            raise ValueError(f"{name} must be positive, got {value}")


def gib(n_bytes: int) -> float:
    return n_bytes / 2**30


def gb(n_bytes: int) -> float:
    return n_bytes / 10**9


def memory_report(
    layers: int, head_dim: int, h_kv: int, seq_len: int, bytes_per_el: int,
    budget: int, stride: int, batch: int = 1, window: int = 16,
) -> dict:
    """Full memory accounting for one configuration, in bytes/GiB/GB."""
    full = kv_memory_bytes(layers, head_dim, h_kv, seq_len, bytes_per_el, batch)
    comp = compressed_kv_bytes(layers, head_dim, h_kv, seq_len, bytes_per_el,
                               budget, stride, batch)
    frac = compressed_fraction(budget, stride, seq_len)
    score_frac = score_cache_fraction(budget, window, head_dim)
    mask = mask_memory_bytes(batch, layers, h_kv, seq_len)
    return {
        "kv_bytes": full,
        "kv_gib": gib(full),
        "kv_gb": gb(full),
        "compressed_bytes": comp,
        "compressed_gib": gib(comp),
        "compressed_gb": gb(comp),
        "compressed_fraction": frac,
        "savings_percent": 100.0 * (1.0 - frac),
        "score_cache_bytes": math.ceil(full * score_frac),
        "score_cache_fraction": score_frac,
        "mask_bytes": mask,
        "mask_gib": gib(mask),
        "mask_gb": gb(mask),
    }
