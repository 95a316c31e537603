"""Independent from-scratch reimplementation of every eviction policy.

Deliberately naive: plain dict/list bookkeeping keyed by absolute token
position, per-head loops, python sorting, and per-event recomputation of
scores straight from the trace arrays. Shares nothing with kvsim.engine
beyond numpy primitives. Used as the ground-truth oracle for retained-set
equivalence.
"""

from __future__ import annotations

import math

import numpy as np


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        row = x[i] - x[i].max()
        e = np.exp(row)
        out[i] = e / e.sum()
    return out


def _window_score(q_win: np.ndarray, keys: np.ndarray, q_lo: int, q_hi: int) -> np.ndarray:
    """Mean of max-reduced attention for one kv head; q rows [q_lo, q_hi)."""
    d = keys.shape[1]
    per_q = []
    for qi in range(q_lo, q_hi):
        logits = q_win[qi] @ keys.T / math.sqrt(d)  # (w, l)
        per_q.append(_softmax_rows(logits))
    reduced = per_q[0]
    for a in per_q[1:]:
        reduced = np.maximum(reduced, a)
    return reduced.mean(axis=0)


def _redundancy(keys: np.ndarray, threshold: float, recent_exempt: int, eps: float) -> np.ndarray:
    l = keys.shape[0]
    k_bar = np.empty_like(keys)
    for j in range(l):
        k_bar[j] = keys[j] / (np.linalg.norm(keys[j]) + eps)
    sim = k_bar @ k_bar.T
    sim = np.where(sim < threshold, 0.0, sim)
    if recent_exempt > 0:
        sim[:, max(l - recent_exempt, 0):] = 0.0
    col = sim.sum(axis=0)
    e = np.exp(col - col.max())
    r = e / e.sum()
    return r / r.max()


def naive_run(trace, cfg) -> list[tuple[int, dict]]:
    """Replay a trace; returns (event_step, snapshot) per compression event,
    snapshot mapping (layer, head) -> retained positions (sorted)."""
    h = trace.header
    q = np.asarray(trace.q_states, dtype=np.float64)
    k = np.asarray(trace.k_states, dtype=np.float64)
    group = h.n_q_heads // h.n_kv_heads
    b, w, s = cfg.budget, cfg.window, cfg.stride
    recent_exempt = cfg.window if cfg.redundancy_recent_exempt is None else cfg.redundancy_recent_exempt

    positions: dict[tuple[int, int], list[int]] = {
        (layer, head): [] for layer in range(h.n_layers) for head in range(h.n_kv_heads)
    }
    carried: dict[tuple[int, int], dict[int, float]] = {key: {} for key in positions}
    first_done = False
    events: list[tuple[int, dict]] = []

    def compress(t_last: int):
        nonlocal first_done
        snapshot: dict = {}
        for layer in range(h.n_layers):
            q_win = q[t_last - w + 1 : t_last + 1, layer].transpose(1, 0, 2)  # (h_q, w, d)
            for head in range(h.n_kv_heads):
                pos = positions[(layer, head)]
                l = len(pos)
                keys = np.stack([k[p, layer, head] for p in pos])
                if cfg.policy == "streaming_window":
                    sink = cfg.sink_tokens
                    head_keep = pos[:sink] + pos[l - (b - sink):]
                else:
                    score = _window_score(q_win, keys, head * group, (head + 1) * group)
                    rank, record = _policy_rank(
                        cfg, score, keys, pos, carried[(layer, head)],
                        first_done, recent_exempt,
                    )
                    cand = list(range(l - w))
                    if cfg.tie_break == "prefer_recent":
                        cand.sort(key=lambda c: (-rank[c], -pos[c]))
                    else:
                        cand.sort(key=lambda c: (-rank[c], pos[c]))
                    chosen = sorted(cand[: b - w])
                    if record is not None:
                        carried[(layer, head)] = {pos[c]: float(record[c]) for c in chosen}
                    head_keep = [pos[c] for c in chosen] + pos[l - w:]
                positions[(layer, head)] = sorted(head_keep)
                snapshot[(layer, head)] = sorted(head_keep)
        first_done = True
        events.append((t_last + 1, snapshot))

    generated = 0
    for t in range(h.n_steps):
        for key in positions:
            positions[key].append(t)
        is_prompt = t < h.n_prompt
        if not is_prompt:
            generated += 1
        prefill_end = t == h.n_prompt - 1
        length = len(positions[(0, 0)])
        if prefill_end and cfg.compress_prompt and length > b:
            compress(t)
        elif not is_prompt and generated % s == 0 and length > b:
            compress(t)
    return events


def _policy_rank(cfg, score, keys, pos, carried, first_done, recent_exempt):
    """Returns (rank array over columns, record array or None)."""
    l = len(pos)
    if cfg.policy == "local":
        return score, None
    if cfg.policy == "snapkv":
        half = cfg.pool_kernel // 2
        pooled = np.array(
            [score[max(0, j - half) : j + half + 1].max() for j in range(l)]
        )
        return pooled, None
    if cfg.policy == "rkv":
        s_norm = score / score.max()
        r = _redundancy(keys, cfg.redundancy_threshold, recent_exempt, cfg.epsilon)
        return cfg.lam * s_norm - (1 - cfg.lam) * r, None
    if cfg.policy == "h2o":
        acc = np.array([carried.get(p, 0.0) for p in pos]) + score
        return acc, acc
    # global
    s_base = score / score.max() if cfg.normalize_scores else score
    if not first_done:
        f = s_base.copy()
    else:
        f = np.empty(l)
        for j, p in enumerate(pos):
            if p in carried:
                prev = carried[p]
                if cfg.global_form == "max":
                    f[j] = max(cfg.alpha * prev, s_base[j])
                elif cfg.global_form == "mean":
                    f[j] = cfg.alpha * prev + (1 - cfg.alpha) * s_base[j]
                else:
                    f[j] = cfg.alpha * prev + s_base[j]
            else:
                f[j] = s_base[j]
    if cfg.use_redundancy:
        r = _redundancy(keys, cfg.redundancy_threshold, recent_exempt, cfg.epsilon)
        rank = cfg.lam * f - (1 - cfg.lam) * r
    else:
        rank = f
    return rank, f
