"""Diagnostic analyses over traces and eviction logs.

All analyses are pure reads of immutable inputs. CSV writers emit
deterministic output (fixed column order, fixed float formatting) so that
repeated runs produce byte-identical files.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .engine import EvictionLog
from .trace import DecodeTrace
from .scoring import window_scores

DEFAULT_FRACTIONS = tuple(round(0.05 * i, 2) for i in range(1, 21))  # 0.05 .. 1.00


@dataclass
class OverlapReport:
    """Agreement between the token sets attended by successive windows.

    per_window[layer, m, p] is the overlap of the last window's top-p token
    set with window m's (m indexes the earlier windows); union[layer, p]
    compares against the union of all earlier windows' sets. The candidate
    key set is common to all windows: every token before the windowed tail,
    so a retention fraction of 1.0 yields overlap 1.0 everywhere.
    """

    window_size: int
    n_windows: int
    fractions: tuple[float, ...]
    per_window: np.ndarray  # (n_layers, n_windows - 1, n_fractions)
    union: np.ndarray  # (n_layers, n_fractions)

    def validate(self) -> None:
        if np.any(self.per_window < 0) or np.any(self.per_window > 1):
            raise ValueError("overlaps must lie in [0, 1]")
        if np.any(self.union + 1e-12 < self.per_window.max(axis=1)):
            raise ValueError("union overlap must dominate individual overlaps")


def _top_set(scores: np.ndarray, k: int) -> set[int]:
    # prefer_recent tie-break: higher index wins equal scores
    idx = np.arange(len(scores))
    order = np.lexsort((-idx, -scores))
    return set(order[:k].tolist())


def window_overlap(
    trace: DecodeTrace,
    n_windows: int = 4,
    window_size: int = 128,
    retention_fractions: tuple[float, ...] = DEFAULT_FRACTIONS,
) -> OverlapReport:
    """Score the same preceding-key set from several trailing windows and
    measure how much the last window's top-p token set agrees with the
    earlier windows' sets."""
    h = trace.header
    tail = n_windows * window_size
    tail_start = h.n_steps - tail
    if tail_start < 1:
        raise ValueError(
            f"trace too short: need more than {tail} steps, have {h.n_steps}"
        )
    fractions = tuple(retention_fractions)
    if not fractions or any(not 0 < p <= 1 for p in fractions):
        raise ValueError("retention fractions must lie in (0, 1]")
    l_cand = tail_start
    n_p = len(fractions)
    per_window = np.zeros((h.n_layers, n_windows - 1, n_p))
    union = np.zeros((h.n_layers, n_p))
    q = np.asarray(trace.q_states, dtype=np.float64)
    k = np.asarray(trace.k_states, dtype=np.float64)
    for layer in range(h.n_layers):
        k_cand = k[:tail_start, layer].transpose(1, 0, 2)  # (h_kv, l_cand, d)
        # scores per window: (n_windows, h_kv, l_cand)
        scores = []
        for m in range(n_windows):
            lo = tail_start + m * window_size
            q_win = q[lo : lo + window_size, layer].transpose(1, 0, 2)
            scores.append(window_scores(q_win, k_cand))
        for pi, p in enumerate(fractions):
            kk = math.ceil(p * l_cand)
            per_head_sets = [
                [_top_set(scores[m][head], kk) for m in range(n_windows)]
                for head in range(h.n_kv_heads)
            ]
            for m in range(n_windows - 1):
                vals = []
                for head in range(h.n_kv_heads):
                    last = per_head_sets[head][n_windows - 1]
                    vals.append(len(last & per_head_sets[head][m]) / len(last))
                per_window[layer, m, pi] = float(np.mean(vals))
            vals = []
            for head in range(h.n_kv_heads):
                last = per_head_sets[head][n_windows - 1]
                earlier: set[int] = set()
                for m in range(n_windows - 1):
                    earlier |= per_head_sets[head][m]
                vals.append(len(last & earlier) / len(last))
            union[layer, pi] = float(np.mean(vals))
    report = OverlapReport(window_size, n_windows, fractions, per_window, union)
    report.validate()
    return report


def sparsity(
    trace: DecodeTrace,
    thresholds,
    window: int = 16,
    tail_len: int = 512,
    log: EvictionLog | None = None,
) -> np.ndarray:
    """Fraction of evaluated tokens scoring below p * (max score), per layer.

    Full-cache mode (log is None): the last `window` queries score all
    preceding keys; only the trailing `tail_len` keys before the window are
    evaluated. Compressed mode: keys are the positions the run finally
    retained, all of them evaluated. Returns (n_layers, n_thresholds),
    averaged over kv heads.
    """
    thresholds = list(thresholds)
    if not thresholds or any(not 0 < p < 1 for p in thresholds):
        raise ValueError("thresholds must lie in (0, 1)")
    h = trace.header
    n = h.n_steps
    if n <= window:
        raise ValueError("trace shorter than the query window")
    q = np.asarray(trace.q_states, dtype=np.float64)
    k = np.asarray(trace.k_states, dtype=np.float64)
    out = np.zeros((h.n_layers, len(thresholds)))
    for layer in range(h.n_layers):
        q_win = q[n - window :, layer].transpose(1, 0, 2)
        if log is None:
            stop = n - window
            start = max(stop - tail_len, 0)
            if stop - start < 1:
                raise ValueError("empty evaluation set")
            k_keys = k[:stop, layer].transpose(1, 0, 2)
            scores = window_scores(q_win, k_keys)  # (h_kv, stop)
            eval_scores = [scores[head, start:stop] for head in range(h.n_kv_heads)]
        else:
            eval_scores = []
            for head in range(h.n_kv_heads):
                retained = log.final_retained(layer, head)
                if not retained:
                    raise ValueError("empty evaluation set")
                k_keys = k[retained, layer][:, head, :][None, :, :]
                q_head_rows = q[n - window :, layer].transpose(1, 0, 2)
                group = h.group_size
                q_grp = q_head_rows[head * group : (head + 1) * group]
                eval_scores.append(window_scores(q_grp, k_keys)[0])
        for pi, p in enumerate(thresholds):
            fracs = []
            for s_head in eval_scores:
                s_max = s_head.max()
                fracs.append(float((s_head < p * s_max).mean()))
            out[layer, pi] = float(np.mean(fracs))
    return out


@dataclass
class DensityHistogram:
    """Histogram of retained positions normalized to [0, 1]."""

    edges: np.ndarray
    counts: np.ndarray
    mean: float

    def validate(self, n_retained: int) -> None:
        if int(self.counts.sum()) != n_retained:
            raise ValueError("histogram counts must sum to the retained-token count")
        if not 0.0 <= self.mean <= 1.0:
            raise ValueError("mean must lie in [0, 1]")


def position_density(log: EvictionLog, seq_len: int, n_bins: int = 50) -> DensityHistogram:
    """Distribution of finally-retained positions over the sequence, pooled
    across layers and kv heads (position i normalizes to i / seq_len)."""
    if seq_len <= 0:
        raise ValueError("seq_len must be positive")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    normalized = []
    for layer in range(log.n_layers):
        for head in range(log.n_kv_heads):
            for p in log.final_retained(layer, head):
                normalized.append(p / seq_len)
    if not normalized:
        raise ValueError("no retained positions (empty retained set)")
    arr = np.asarray(normalized)
    counts, edges = np.histogram(arr, bins=n_bins, range=(0.0, 1.0))
    hist = DensityHistogram(edges=edges, counts=counts, mean=float(arr.mean()))
    hist.validate(len(normalized))
    return hist


def token_frequency(
    log: EvictionLog, trace: DecodeTrace, layer: int | None = None, head: int = 0
) -> list[tuple[str, int]]:
    """Counts of finally-retained token texts for one (layer, kv head),
    ranked by count descending with alphabetical tie order."""
    if trace.token_ids is None or trace.token_text is None:
        raise ValueError("trace lacks token identities (ids + text table required)")
    if layer is None:
        layer = log.n_layers - 1
    counts: dict[str, int] = {}
    for p in log.final_retained(layer, head):
        text = trace.token_text[p]
        counts[text] = counts.get(text, 0) + 1
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


# -- CSV writers --------------------------------------------------------------


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def write_overlap_csv(report: OverlapReport, sink) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["layer", "window", "p", "overlap"])
    n_layers = report.per_window.shape[0]
    for layer in range(n_layers):
        for m in range(report.n_windows - 1):
            for pi, p in enumerate(report.fractions):
                writer.writerow([layer, m, _fmt(p), _fmt(report.per_window[layer, m, pi])])
        for pi, p in enumerate(report.fractions):
            writer.writerow([layer, "union", _fmt(p), _fmt(report.union[layer, pi])])


def write_sparsity_csv(values: np.ndarray, thresholds, sink) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["layer", "p", "sparsity"])
    for layer in range(values.shape[0]):
        for pi, p in enumerate(thresholds):
            writer.writerow([layer, _fmt(p), _fmt(values[layer, pi])])


def write_density_csv(hist: DensityHistogram, sink) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["bin_left", "bin_right", "count"])
    for i, count in enumerate(hist.counts):
        writer.writerow([_fmt(hist.edges[i]), _fmt(hist.edges[i + 1]), int(count)])


def write_frequency_csv(pairs: list[tuple[str, int]], sink) -> None:
    writer = csv.writer(sink, lineterminator="\n")
    writer.writerow(["token", "count"])
    for token, count in pairs:
        writer.writerow([token, count])
