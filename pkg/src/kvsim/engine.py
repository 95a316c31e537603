"""Budgeted KV-cache eviction engine.

The engine replays decoding runs under the unified eviction schedule:
tokens are appended to every (layer, kv-head) cache; after every `stride`
generated tokens, if the cache exceeds the budget, each head scores its
non-window tokens from the observation window (the most recent `window`
tokens), keeps the top-(budget - window) plus the window, and discards the
rest. Heads select independently, so retained sets diverge across heads.

Trace-driven runs are teacher-forced: queries come from the full-cache run
that produced the trace, while attention is computed only over retained
keys. The toy model provides the closed-loop alternative.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .scoring import (
    GlobalScoreState,
    RedundancyState,
    accumulate,
    combine,
    global_update,
    normalize_max,
    redundancy_score,
    snapkv_pool,
    window_scores,
)
from .trace import DecodeTrace

POLICIES = ("streaming_window", "h2o", "snapkv", "local", "rkv", "global")
TIE_BREAKS = ("prefer_recent", "prefer_old")

# policies that carry per-survivor score state across compressions
_STATEFUL = ("h2o", "global")


@dataclass
class EvictionConfig:
    """Eviction parameters; defaults follow the main decoding setup."""

    budget: int = 512
    window: int = 16
    stride: int = 128
    alpha: float = 0.8
    lam: float = 0.7
    policy: str = "global"
    global_form: str = "max"
    use_redundancy: bool = True
    tie_break: str = "prefer_recent"
    sink_tokens: int = 0
    compress_prompt: bool = False
    redundancy_threshold: float = 0.5
    redundancy_recent_exempt: int | None = None  # defaults to window
    epsilon: float = 1e-8
    pool_kernel: int = 7
    normalize_scores: bool = True  # False ranks on raw S (H2O-equivalence mode)

    def validate(self) -> None:
        if not 0 < self.window < self.budget:
            raise ValueError(f"need 0 < window < budget, got w={self.window} b={self.budget}")
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0, 1], got {self.lam}")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}; want one of {POLICIES}")
        if self.policy == "global" and self.global_form not in ("max", "mean", "sum"):
            raise ValueError(f"unknown global form {self.global_form!r}")
        if self.tie_break not in TIE_BREAKS:
            raise ValueError(f"unknown tie_break {self.tie_break!r}")
        if self.sink_tokens < 0 or self.sink_tokens > self.budget - self.window:
            raise ValueError("need 0 <= sink_tokens <= budget - window")
        if self.pool_kernel < 1 or self.pool_kernel % 2 == 0:
            raise ValueError("pool_kernel must be odd and >= 1")
        if self.redundancy_recent_exempt is not None and self.redundancy_recent_exempt < 0:
            raise ValueError("redundancy_recent_exempt must be >= 0")

    @property
    def recent_exempt(self) -> int:
        return self.window if self.redundancy_recent_exempt is None else self.redundancy_recent_exempt

    def redundancy_state(self) -> RedundancyState:
        return RedundancyState(
            threshold=self.redundancy_threshold,
            recent_exempt=self.recent_exempt,
            epsilon=self.epsilon,
        )


@dataclass
class EvictionEvent:
    """One head's compression outcome: who was evicted, who survived."""

    step: int  # first query position that can no longer see the evicted tokens
    layer: int
    head: int
    evicted: list[int]
    retained: list[int]

    def to_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "layer": self.layer,
                "head": self.head,
                "evicted": self.evicted,
                "retained": self.retained,
            },
            sort_keys=True,
            separators=(",", ":"),
        )


@dataclass
class EvictionLog:
    """Ordered record of every compression event of one run."""

    config: dict
    n_layers: int
    n_kv_heads: int
    n_prompt: int = 0
    seq_len: int = 0
    events: list[EvictionEvent] = field(default_factory=list)

    def meta_json(self) -> str:
        return json.dumps(
            {
                "config": self.config,
                "n_layers": self.n_layers,
                "n_kv_heads": self.n_kv_heads,
                "n_prompt": self.n_prompt,
                "seq_len": self.seq_len,
            },
            sort_keys=True,
            separators=(",", ":"),
        )

    def to_jsonl(self, sink) -> None:
        sink.write(self.meta_json() + "\n")
        for ev in self.events:
            sink.write(ev.to_json() + "\n")

    @classmethod
    def from_jsonl(cls, source) -> "EvictionLog":
        lines = [line for line in source.read().splitlines() if line.strip()]
        if not lines:
            raise ValueError("empty eviction log")
        meta = json.loads(lines[0])
        log = cls(
            config=meta["config"],
            n_layers=meta["n_layers"],
            n_kv_heads=meta["n_kv_heads"],
            n_prompt=meta["n_prompt"],
            seq_len=meta["seq_len"],
        )
        for line in lines[1:]:
            d = json.loads(line)
            log.events.append(
                EvictionEvent(d["step"], d["layer"], d["head"], d["evicted"], d["retained"])
            )
        return log

    def to_binary(self, sink) -> None:
        """Compact form for mask building: positions only, no config echo."""
        meta = json.dumps(self.config, sort_keys=True).encode("utf-8")
        sink.write(struct.pack("<4s5I", b"GKVL", self.n_layers, self.n_kv_heads,
                               self.n_prompt, self.seq_len, len(meta)))
        sink.write(meta)
        sink.write(struct.pack("<I", len(self.events)))
        for ev in self.events:
            sink.write(struct.pack("<4I", ev.step, ev.layer, ev.head, len(ev.evicted)))
            sink.write(np.asarray(ev.evicted, dtype="<u4").tobytes())
            sink.write(struct.pack("<I", len(ev.retained)))
            sink.write(np.asarray(ev.retained, dtype="<u4").tobytes())

    @classmethod
    def from_binary(cls, source) -> "EvictionLog":
        head = source.read(struct.calcsize("<4s5I"))
        magic, n_layers, n_kv, n_prompt, seq_len, meta_len = struct.unpack("<4s5I", head)
        if magic != b"GKVL":
            raise ValueError(f"bad eviction-log magic {magic!r}")
        config = json.loads(source.read(meta_len).decode("utf-8"))
        log = cls(config=config, n_layers=n_layers, n_kv_heads=n_kv,
                  n_prompt=n_prompt, seq_len=seq_len)
        (n_events,) = struct.unpack("<I", source.read(4))
        for _ in range(n_events):
            step, layer, head_idx, n_ev = struct.unpack("<4I", source.read(16))
            evicted = np.frombuffer(source.read(4 * n_ev), dtype="<u4").tolist()
            (n_ret,) = struct.unpack("<I", source.read(4))
            retained = np.frombuffer(source.read(4 * n_ret), dtype="<u4").tolist()
            log.events.append(EvictionEvent(step, layer, head_idx, evicted, retained))
        return log

    def evicted_positions(self, layer: int, head: int) -> set[int]:
        out: set[int] = set()
        for ev in self.events:
            if ev.layer == layer and ev.head == head:
                out.update(ev.evicted)
        return out

    def final_retained(self, layer: int, head: int) -> list[int]:
        """Positions never evicted for one head, over the full sequence."""
        gone = self.evicted_positions(layer, head)
        return [p for p in range(self.seq_len) if p not in gone]

    @property
    def n_compressions(self) -> int:
        return len({ev.step for ev in self.events})


@dataclass
class RunMetrics:
    final_cache_len: int
    n_compressions: int
    per_event_ms: list[float]
    retention_ratio: float
    seq_len: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "final_cache_len": self.final_cache_len,
                "n_compressions": self.n_compressions,
                "per_event_ms": self.per_event_ms,
                "mean_event_ms": (
                    sum(self.per_event_ms) / len(self.per_event_ms) if self.per_event_ms else 0.0
                ),
                "retention_ratio": self.retention_ratio,
                "seq_len": self.seq_len,
            },
            sort_keys=True,
        )


class _HeadCache:
    """Retained positions, carried score values, and score presence for one head."""

    __slots__ = ("positions", "state_vals", "has_state")

    def __init__(self) -> None:
        self.positions: list[int] = []
        self.state_vals: list[float] = []
        self.has_state: list[bool] = []

    def append(self, position: int) -> None:
        self.positions.append(position)
        self.state_vals.append(0.0)
        self.has_state.append(False)

    def keep(self, keep_idx: list[int], new_vals: dict[int, float]) -> None:
        """Restrict to keep_idx (sorted column indices); new_vals maps kept
        column index -> recorded score for the next compression."""
        self.positions = [self.positions[i] for i in keep_idx]
        self.state_vals = [new_vals.get(i, 0.0) for i in keep_idx]
        self.has_state = [i in new_vals for i in keep_idx]


class EvictionEngine:
    """Streaming cache state for one sequence; feed tokens, collect the log.

    Confine one engine to one worker; separate sequences may run in
    parallel with independent engines.
    """

    def __init__(self, cfg: EvictionConfig, n_layers: int, n_q_heads: int, n_kv_heads: int,
                 head_dim: int):
        cfg.validate()
        if n_q_heads % n_kv_heads != 0:
            raise ValueError("n_q_heads must be a multiple of n_kv_heads")
        self.cfg = cfg
        self.n_layers = n_layers
        self.n_q_heads = n_q_heads
        self.n_kv_heads = n_kv_heads
        self.head_dim = head_dim
        self.heads: list[list[_HeadCache]] = [
            [_HeadCache() for _ in range(n_kv_heads)] for _ in range(n_layers)
        ]
        # per layer: full key rows by absolute position (trimmed on eviction),
        #<position -> (h_kv, d)>; queries kept for the last `window` tokens only
        self._keys: list[dict[int, np.ndarray]] = [{} for _ in range(n_layers)]
        self._recent_q: list[list[tuple[int, np.ndarray]]] = [[] for _ in range(n_layers)]
        self.generated_count = 0
        self.total_positions = 0
        self._compressed_once = False
        self.log = EvictionLog(
            config=asdict(cfg), n_layers=n_layers, n_kv_heads=n_kv_heads, n_prompt=0
        )
        self.event_times_ms: list[float] = []

    # -- token ingestion ---------------------------------------------------

    def prefill(self, q_prompt: np.ndarray, k_prompt: np.ndarray) -> list[EvictionEvent]:
        """Append all prompt tokens; optionally compress once afterwards.

        q_prompt: (n_prompt, n_layers, h_q, d); k_prompt likewise with h_kv.
        """
        events: list[EvictionEvent] = []
        for t in range(q_prompt.shape[0]):
            self._append(q_prompt[t], k_prompt[t])
        self.log.n_prompt = self.total_positions
        if self.cfg.compress_prompt and self._cache_len() > self.cfg.budget:
            events = self._compress_all()
        return events

    def step(self, q_token: np.ndarray, k_token: np.ndarray) -> list[EvictionEvent]:
        """Ingest one generated token; compress at stride boundaries.

        q_token: (n_layers, h_q, d); k_token: (n_layers, h_kv, d).
        Returns the events fired by this step ([] most of the time).
        """
        self._append(q_token, k_token)
        self.generated_count += 1
        if (
            self.generated_count % self.cfg.stride == 0
            and self._cache_len() > self.cfg.budget
        ):
            return self._compress_all()
        return []

    def _append(self, q_token: np.ndarray, k_token: np.ndarray) -> None:
        q_token = np.asarray(q_token, dtype=np.float64)
        k_token = np.asarray(k_token, dtype=np.float64)
        if q_token.shape != (self.n_layers, self.n_q_heads, self.head_dim):
            raise ValueError(f"bad q shape {q_token.shape}")
        if k_token.shape != (self.n_layers, self.n_kv_heads, self.head_dim):
            raise ValueError(f"bad k shape {k_token.shape}")
        pos = self.total_positions
        for layer in range(self.n_layers):
            self._keys[layer][pos] = k_token[layer]
            buf = self._recent_q[layer]
            buf.append((pos, q_token[layer]))
            if len(buf) > self.cfg.window:
                buf.pop(0)
            for head in self.heads[layer]:
                head.append(pos)
        self.total_positions += 1

    def _cache_len(self) -> int:
        # heads move in lockstep between compressions; any head's length works
        return len(self.heads[0][0].positions)

    # -- compression -------------------------------------------------------

    def _compress_all(self) -> list[EvictionEvent]:
        t0 = time.perf_counter()
        step = self.total_positions  # first query position blind to the evicted
        events: list[EvictionEvent] = []
        for layer in range(self.n_layers):
            events.extend(self._compress_layer(layer, step))
        self._compressed_once = True
        self.event_times_ms.append((time.perf_counter() - t0) * 1e3)
        self.log.events.extend(events)
        return events

    def _compress_layer(self, layer: int, step: int) -> list[EvictionEvent]:
        cfg = self.cfg
        caches = self.heads[layer]
        lengths = {len(c.positions) for c in caches}
        assert len(lengths) == 1, "heads must hold equal cache lengths between events"
        l = lengths.pop()
        w = cfg.window
        n_keep = cfg.budget - w
        # the last w columns hold the same (most recent) positions in every
        # head; earlier columns map to head-specific survivors
        window_cols = list(range(l - w, l))
        candidate_cols = list(range(l - w))

        # k_cache[h] follows head h's own retained positions
        k_cache = np.stack(
            [
                np.stack([self._keys[layer][p][h] for p in cache.positions])
                for h, cache in enumerate(caches)
            ]
        )  # (h_kv, l, d)

        if cfg.policy == "streaming_window":
            rank = None
        else:
            q_rows = [q for (_, q) in self._recent_q[layer]]
            q_window = np.stack(q_rows, axis=1)  # (h_q, w, d)
            s_raw = window_scores(q_window, k_cache)  # (h_kv, l)
            rank = self._policy_scores(s_raw, k_cache, caches)

        events = []
        for h, cache in enumerate(caches):
            positions = cache.positions
            if cfg.policy == "streaming_window":
                sink = min(cfg.sink_tokens, len(candidate_cols))
                tail = cfg.budget - w - sink
                keep_cand = candidate_cols[:sink] + (
                    candidate_cols[-tail:] if tail > 0 else []
                )
                new_vals: dict[int, float] = {}
            else:
                keep_cand = self._select_top(rank[h], candidate_cols, n_keep, positions)
                if cfg.policy in _STATEFUL:
                    record = self._record_scores[h]
                    new_vals = {c: float(record[c]) for c in keep_cand}
                else:
                    new_vals = {}
            keep_idx = sorted(keep_cand) + window_cols
            kept_set = set(keep_idx)
            evicted = [positions[i] for i in range(l) if i not in kept_set]
            retained = [positions[i] for i in keep_idx]
            cache.keep(keep_idx, new_vals)
            events.append(EvictionEvent(step, layer, h, evicted, retained))

        # drop key rows that no head still retains
        still_needed = set()
        for cache in caches:
            still_needed.update(cache.positions)
        self._keys[layer] = {p: k for p, k in self._keys[layer].items() if p in still_needed}
        return events

    def _policy_scores(
        self, s_raw: np.ndarray, k_cache: np.ndarray, caches: list[_HeadCache]
    ) -> np.ndarray:
        """Ranking matrix (h_kv, l) for the configured policy. Also sets
        self._record_scores for stateful policies (values to carry forward)."""
        cfg = self.cfg
        if cfg.policy == "local":
            return s_raw
        if cfg.policy == "snapkv":
            return snapkv_pool(s_raw, cfg.pool_kernel)
        if cfg.policy == "rkv":
            r_prime = redundancy_score(k_cache, cfg.redundancy_state())
            return combine(normalize_max(s_raw), r_prime, cfg.lam)
        if cfg.policy == "h2o":
            acc_prev = self._expand_state(caches, s_raw.shape)
            acc = accumulate(acc_prev, s_raw)
            self._record_scores = acc
            return acc
        # global
        s_base = normalize_max(s_raw) if cfg.normalize_scores else s_raw
        if not self._compressed_once:
            f_t = s_base
        else:
            f_t = np.empty_like(s_base)
            for h, cache in enumerate(caches):
                prev_vals = [v for v, ok in zip(cache.state_vals, cache.has_state) if ok]
                mapping = np.full(s_base.shape[1], -1, dtype=np.int64)
                j = 0
                for col, ok in enumerate(cache.has_state):
                    if ok:
                        mapping[col] = j
                        j += 1
                state = GlobalScoreState(
                    values=np.asarray([prev_vals], dtype=np.float64),
                    form=cfg.global_form,
                    alpha=cfg.alpha,
                )
                f_t[h] = global_update(state, s_base[h : h + 1], mapping[None, :])[0]
        self._record_scores = f_t  # F, not the redundancy-combined ranking
        if cfg.use_redundancy:
            r_prime = redundancy_score(k_cache, cfg.redundancy_state())
            return combine(f_t, r_prime, cfg.lam)
        return f_t

    def _expand_state(self, caches: list[_HeadCache], shape: tuple) -> np.ndarray:
        out = np.zeros(shape, dtype=np.float64)
        for h, cache in enumerate(caches):
            for col, (val, ok) in enumerate(zip(cache.state_vals, cache.has_state)):
                if ok:
                    out[h, col] = val
        return out

    def _select_top(
        self, scores: np.ndarray, candidate_cols: list[int], k: int, positions: list[int]
    ) -> list[int]:
        cand_scores = scores[candidate_cols]
        cand_pos = np.asarray([positions[c] for c in candidate_cols])
        if self.cfg.tie_break == "prefer_recent":
            order = np.lexsort((-cand_pos, -cand_scores))
        else:
            order = np.lexsort((cand_pos, -cand_scores))
        return [candidate_cols[i] for i in order[:k]]

    # -- views ---------------------------------------------------------------

    def retained_positions(self, layer: int, head: int) -> list[int]:
        return list(self.heads[layer][head].positions)


def run(trace: DecodeTrace, cfg: EvictionConfig) -> tuple[EvictionLog, RunMetrics]:
    """Replay a trace through the engine; returns the log and run metrics."""
    trace.validate()
    h = trace.header
    engine = EvictionEngine(cfg, h.n_layers, h.n_q_heads, h.n_kv_heads, h.head_dim)
    q = np.asarray(trace.q_states, dtype=np.float64)
    k = np.asarray(trace.k_states, dtype=np.float64)
    engine.prefill(q[: h.n_prompt], k[: h.n_prompt])
    for t in range(h.n_prompt, h.n_steps):
        engine.step(q[t], k[t])
    log = engine.log
    log.seq_len = h.n_steps
    ratio = retention_ratio(log, h.n_steps) if h.n_steps else 1.0
    metrics = RunMetrics(
        final_cache_len=engine._cache_len(),
        n_compressions=len(engine.event_times_ms),
        per_event_ms=engine.event_times_ms,
        retention_ratio=ratio,
        seq_len=h.n_steps,
    )
    return log, metrics


def retention_ratio(log: EvictionLog, seq_len: int) -> float:
    """Final cache length over sequence length, averaged over heads and layers."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    total = 0.0
    n = 0
    for layer in range(log.n_layers):
        for head in range(log.n_kv_heads):
            final_len = log.seq_len - len(log.evicted_positions(layer, head))
            total += final_len
            n += 1
    if n == 0:
        return 1.0
    return min(total / n / seq_len, 1.0)
