"""Token-importance scoring primitives.

All functions are pure and operate on numpy arrays with shapes

    q_window  (h_q,  w, d)   queries of the observation window
    k_cache   (h_kv, l, d)   cached keys
    scores    (h_kv, l)      per-kv-head, per-token scores

Query head i is served by kv head i // (h_q // h_kv). Scores are computed
in float64 regardless of input dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPSILON = 1e-8

GLOBAL_FORMS = ("max", "mean", "sum")


class DegenerateScoreError(ValueError):
    """A head-row of scores is entirely (near-)zero and cannot be normalized."""


@dataclass
class GlobalScoreState:
    """Carried per-head scores of the tokens that survived the last compression.

    values[h] holds, in retained-position order, the scores recorded for
    kv head h. Bounds by form: max/mean stay in (0, 1]; sum is bounded by
    the geometric series 1/(1-alpha) when alpha < 1.
    """

    values: np.ndarray  # (h_kv, retained_count)
    form: str = "max"
    alpha: float = 0.8

    def __post_init__(self) -> None:
        if self.form not in GLOBAL_FORMS:
            raise ValueError(f"unknown global form {self.form!r}; want one of {GLOBAL_FORMS}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class RedundancyState:
    """Parameters of the key-similarity redundancy score."""

    threshold: float = 0.5
    recent_exempt: int = 16
    epsilon: float = EPSILON

    def __post_init__(self) -> None:
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold must be in [-1, 1], got {self.threshold}")
        if self.recent_exempt < 0:
            raise ValueError("recent_exempt must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    # max subtraction per row: overflow guard, observationally equivalent
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def attention_scores(q_window: np.ndarray, k_cache: np.ndarray) -> np.ndarray:
    """Scaled-dot-product attention of window queries over all cached keys.

    Returns (h_q, w, l); each (head, window-row) slice is a probability
    vector over the l keys. Query head i reads kv head i // group.
    """
    q = np.asarray(q_window, dtype=np.float64)
    k = np.asarray(k_cache, dtype=np.float64)
    if q.ndim != 3 or k.ndim != 3:
        raise ValueError("q_window must be (h_q, w, d) and k_cache (h_kv, l, d)")
    h_q, w, d = q.shape
    h_kv, l, d_k = k.shape
    if d != d_k:
        raise ValueError(f"head_dim mismatch: queries {d}, keys {d_k}")
    if l == 0:
        raise ValueError("cannot score an empty key cache (l = 0)")
    if h_q % h_kv != 0:
        raise ValueError(f"h_q={h_q} not divisible by h_kv={h_kv}")
    group = h_q // h_kv
    logits = np.empty((h_q, w, l), dtype=np.float64)
    for i in range(h_q):
        logits[i] = q[i] @ k[i // group].T / np.sqrt(d)
    return _softmax(logits, axis=-1)


def reduce_heads(a: np.ndarray, group: int) -> np.ndarray:
    """Max-reduce query-head scores onto their kv heads: (h_q,w,l) -> (h_kv,w,l)."""
    a = np.asarray(a, dtype=np.float64)
    h_q, w, l = a.shape
    if group <= 0 or h_q % group != 0:
        raise ValueError(f"h_q={h_q} not divisible by group={group}")
    return a.reshape(h_q // group, group, w, l).max(axis=1)


def local_score(a_reduced: np.ndarray) -> np.ndarray:
    """Mean attention over the observation window: (h_kv,w,l) -> (h_kv,l)."""
    a = np.asarray(a_reduced, dtype=np.float64)
    if a.ndim != 3 or a.shape[1] == 0:
        raise ValueError("need a (h_kv, w, l) array with w >= 1")
    return a.mean(axis=1)


def normalize_max(s: np.ndarray, epsilon: float = EPSILON) -> np.ndarray:
    """Divide each head-row by its maximum so every row peaks at exactly 1."""
    s = np.asarray(s, dtype=np.float64)
    row_max = s.max(axis=-1, keepdims=True)
    if np.any(row_max <= epsilon):
        raise DegenerateScoreError("a head-row of scores is all zero; cannot max-normalize")
    return s / row_max


def global_update(
    f_prev: GlobalScoreState, s_norm: np.ndarray, mapping: np.ndarray
) -> np.ndarray:
    """Fold the previous global scores into the current normalized local scores.

    mapping has shape (l,) or (h_kv, l); entry j >= 0 points to the column
    of f_prev.values holding position j's carried score, -1 marks a token
    with no prior score (it takes s_norm directly). The non-negative
    entries of each row must cover f_prev's columns exactly once.

    Per retained position, by form:
        max   F_t = max(alpha * F_prev, s_norm)
        mean  F_t = alpha * F_prev + (1 - alpha) * s_norm
        sum   F_t = alpha * F_prev + s_norm
    """
    s = np.asarray(s_norm, dtype=np.float64)
    h_kv, l = s.shape
    prev = f_prev.values
    if prev.shape[0] != h_kv:
        raise ValueError(f"f_prev has {prev.shape[0]} heads, scores have {h_kv}")
    mapping = np.asarray(mapping, dtype=np.int64)
    if mapping.ndim == 1:
        mapping = np.broadcast_to(mapping, (h_kv, l))
    if mapping.shape != (h_kv, l):
        raise ValueError(f"mapping shape {mapping.shape} incompatible with scores {(h_kv, l)}")
    n_prev = prev.shape[1]
    for h in range(h_kv):
        mapped = np.sort(mapping[h][mapping[h] >= 0])
        if mapped.size != n_prev or (n_prev and not np.array_equal(mapped, np.arange(n_prev))):
            raise ValueError("mapping does not cover f_prev positions exactly")

    alpha = f_prev.alpha
    out = s.copy()
    for h in range(h_kv):
        cols = np.nonzero(mapping[h] >= 0)[0]
        if cols.size == 0:
            continue
        carried = prev[h, mapping[h, cols]]
        if f_prev.form == "max":
            out[h, cols] = np.maximum(alpha * carried, s[h, cols])
        elif f_prev.form == "mean":
            out[h, cols] = alpha * carried + (1.0 - alpha) * s[h, cols]
        else:  # sum
            out[h, cols] = alpha * carried + s[h, cols]
    return out


def redundancy_score(k_cache: np.ndarray, cfg: RedundancyState) -> np.ndarray:
    """Normalized redundancy of each cached key, per head; output peaks at 1.

    Keys are unit-normalized (epsilon-stabilized), pairwise cosine
    similarities below the threshold are zeroed along with the trailing
    recent_exempt columns, the column sums are softmaxed per head, and the
    result is divided by its per-head maximum.
    """
    k = np.asarray(k_cache, dtype=np.float64)
    if k.ndim != 3:
        raise ValueError("k_cache must be (h_kv, l, d)")
    h_kv, l, _ = k.shape
    if l == 0:
        raise ValueError("cannot score an empty key cache (l = 0)")
    norms = np.linalg.norm(k, axis=-1, keepdims=True)
    k_bar = k / (norms + cfg.epsilon)
    col_sums = np.empty((h_kv, l), dtype=np.float64)
    for h in range(h_kv):
        sim = k_bar[h] @ k_bar[h].T
        sim[sim < cfg.threshold] = 0.0
        if cfg.recent_exempt > 0:
            sim[:, l - min(cfg.recent_exempt, l):] = 0.0
        col_sums[h] = sim.sum(axis=0)
    r = _softmax(col_sums, axis=-1)
    return r / r.max(axis=-1, keepdims=True)


def combine(f: np.ndarray, r_prime: np.ndarray, lam: float) -> np.ndarray:
    """Weighted difference of importance and redundancy: lam*F - (1-lam)*R'."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    f = np.asarray(f, dtype=np.float64)
    r = np.asarray(r_prime, dtype=np.float64)
    if f.shape != r.shape:
        raise ValueError(f"shape mismatch: {f.shape} vs {r.shape}")
    return lam * f - (1.0 - lam) * r


def snapkv_pool(s: np.ndarray, kernel: int = 7) -> np.ndarray:
    """Sliding max along the sequence axis, stride 1, edges clamped."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"pooling kernel must be odd and >= 1, got {kernel}")
    s = np.asarray(s, dtype=np.float64)
    if kernel == 1:
        return s.copy()
    half = kernel // 2
    padded = np.pad(s, [(0, 0)] * (s.ndim - 1) + [(half, half)], constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, kernel, axis=-1)
    return windows.max(axis=-1)


def accumulate(acc_prev: np.ndarray, s: np.ndarray) -> np.ndarray:
    """Running sum of raw scores (the alpha=1 sum form over unnormalized S)."""
    acc = np.asarray(acc_prev, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if acc.shape != s.shape:
        raise ValueError(f"shape mismatch: {acc.shape} vs {s.shape}")
    return acc + s


def window_scores(q_window: np.ndarray, k_cache: np.ndarray) -> np.ndarray:
    """Full local-score pipeline: attention -> head max-reduce -> window mean."""
    h_q = q_window.shape[0]
    h_kv = k_cache.shape[0]
    a = attention_scores(q_window, k_cache)
    return local_score(reduce_heads(a, h_q // h_kv))
