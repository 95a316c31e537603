"""Attention-trace data model and the GKVT binary file format.

A trace records, for every token position of one decoding run, the
post-rotary query and key head vectors of every layer. Rotary embeddings
are already applied at each token's absolute position, so scores computed
from a trace are identical to scores computed inside the model that
produced it. Value vectors are not stored: eviction acts on positions,
and no scoring formula reads V.

File layout (all integers and floats little-endian):

    offset 0   magic       4 bytes  b"GKVT"
    offset 4   version     uint32   (= 1)
    offset 8   n_layers    uint32
    offset 12  n_q_heads   uint32
    offset 16  n_kv_heads  uint32
    offset 20  head_dim    uint32
    offset 24  n_prompt    uint32
    offset 28  n_steps     uint32
    offset 32  flags       uint32   bit 0 = token ids, bit 1 = token text
    --- payload ---
    [flags & 1]  token_ids   n_steps * uint32
    [flags & 2]  token_text  n_steps entries of (uint32 byte_len, UTF-8 bytes)
    for step in range(n_steps):
        for layer in range(n_layers):
            Q rows  n_q_heads  * head_dim * float32
            K rows  n_kv_heads * head_dim * float32

The float payload size is fully determined by the header; the text table,
when present, adds data-dependent bytes. Traces are immutable after
construction and safe for concurrent reads.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field, replace
from typing import BinaryIO

import numpy as np

MAGIC = b"GKVT"
VERSION = 1
FLAG_TOKEN_IDS = 1
FLAG_TOKEN_TEXT = 2

_HEADER = struct.Struct("<4s8I")
HEADER_SIZE = _HEADER.size  # 36 bytes


class TraceFormatError(ValueError):
    """Raised for malformed trace files or invariant-violating traces."""


@dataclass(frozen=True)
class TraceHeader:
    """Fixed-size descriptor of a trace; fully determines the float payload."""

    n_layers: int
    n_q_heads: int
    n_kv_heads: int
    head_dim: int
    n_prompt: int
    n_steps: int
    has_token_ids: bool = False
    has_token_text: bool = False
    version: int = VERSION

    def validate(self) -> None:
        if self.version != VERSION:
            raise TraceFormatError(f"unsupported version {self.version} (want {VERSION})")
        for name in ("n_layers", "n_q_heads", "n_kv_heads", "head_dim"):
            if getattr(self, name) <= 0:
                raise TraceFormatError(f"header inconsistency: {name} must be positive")
        if self.n_q_heads % self.n_kv_heads != 0:
            raise TraceFormatError(
                "header inconsistency: n_q_heads must be a multiple of n_kv_heads "
                f"(got {self.n_q_heads} / {self.n_kv_heads})"
            )
        if self.n_prompt < 0 or self.n_steps < 0 or self.n_prompt > self.n_steps:
            raise TraceFormatError("header inconsistency: need 0 <= n_prompt <= n_steps")

    @property
    def group_size(self) -> int:
        """Query heads served by each kv head."""
        return self.n_q_heads // self.n_kv_heads

    @property
    def step_bytes(self) -> int:
        """Float payload bytes contributed by one step."""
        return self.n_layers * (self.n_q_heads + self.n_kv_heads) * self.head_dim * 4

    def numeric_payload_bytes(self) -> int:
        """Bytes of the ids + floats payload (excludes the text table)."""
        ids = 4 * self.n_steps if self.has_token_ids else 0
        return ids + self.n_steps * self.step_bytes

    def to_json(self) -> str:
        return json.dumps(
            {
                "magic": MAGIC.decode("ascii"),
                "version": self.version,
                "n_layers": self.n_layers,
                "n_q_heads": self.n_q_heads,
                "n_kv_heads": self.n_kv_heads,
                "head_dim": self.head_dim,
                "n_prompt": self.n_prompt,
                "n_steps": self.n_steps,
                "has_token_ids": self.has_token_ids,
                "has_token_text": self.has_token_text,
            },
            sort_keys=True,
        )


@dataclass
class DecodeTrace:
    """One decoding run: per-step, per-layer post-rotary Q/K head vectors.

    q_states: (n_steps, n_layers, n_q_heads, head_dim) float32
    k_states: (n_steps, n_layers, n_kv_heads, head_dim) float32
    origin_offset is in-memory metadata only (set by slice_trace); it maps
    step index 0 of this trace back to an absolute position in its parent.
    """

    header: TraceHeader
    q_states: np.ndarray
    k_states: np.ndarray
    token_ids: np.ndarray | None = None
    token_text: list[str] | None = None
    origin_offset: int = field(default=0, compare=False)

    def validate(self) -> None:
        h = self.header
        h.validate()
        q_shape = (h.n_steps, h.n_layers, h.n_q_heads, h.head_dim)
        k_shape = (h.n_steps, h.n_layers, h.n_kv_heads, h.head_dim)
        if self.q_states.shape != q_shape:
            raise TraceFormatError(f"q_states shape {self.q_states.shape} != {q_shape}")
        if self.k_states.shape != k_shape:
            raise TraceFormatError(f"k_states shape {self.k_states.shape} != {k_shape}")
        if not np.isfinite(self.q_states).all() or not np.isfinite(self.k_states).all():
            raise TraceFormatError("non-finite values in Q/K states")
        if h.has_token_ids != (self.token_ids is not None):
            raise TraceFormatError("header token-id flag disagrees with payload")
        if h.has_token_text != (self.token_text is not None):
            raise TraceFormatError("header token-text flag disagrees with payload")
        if self.token_ids is not None and len(self.token_ids) != h.n_steps:
            raise TraceFormatError("token_ids length != n_steps")
        if self.token_text is not None and len(self.token_text) != h.n_steps:
            raise TraceFormatError("token_text length != n_steps")

    @property
    def n_steps(self) -> int:
        return self.header.n_steps


def write_trace(trace: DecodeTrace, sink: BinaryIO) -> int:
    """Serialize a trace; returns the byte count. Validates before writing."""
    trace.validate()
    h = trace.header
    flags = (FLAG_TOKEN_IDS if h.has_token_ids else 0) | (
        FLAG_TOKEN_TEXT if h.has_token_text else 0
    )
    buf = io.BytesIO()
    buf.write(
        _HEADER.pack(
            MAGIC,
            h.version,
            h.n_layers,
            h.n_q_heads,
            h.n_kv_heads,
            h.head_dim,
            h.n_prompt,
            h.n_steps,
            flags,
        )
    )
    if trace.token_ids is not None:
        buf.write(np.ascontiguousarray(trace.token_ids, dtype="<u4").tobytes())
    if trace.token_text is not None:
        for text in trace.token_text:
            raw = text.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)))
            buf.write(raw)
    q = np.ascontiguousarray(trace.q_states, dtype="<f4")
    k = np.ascontiguousarray(trace.k_states, dtype="<f4")
    for t in range(h.n_steps):
        for layer in range(h.n_layers):
            buf.write(q[t, layer].tobytes())
            buf.write(k[t, layer].tobytes())
    data = buf.getvalue()
    sink.write(data)
    return len(data)


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise TraceFormatError(f"truncated payload while reading {what}")
    return data


def read_trace(source: BinaryIO) -> DecodeTrace:
    """Parse a GKVT stream, checking magic, version, shape, and finiteness."""
    head = source.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise TraceFormatError("truncated payload while reading header")
    magic, version, n_layers, n_q, n_kv, d, n_prompt, n_steps, flags = _HEADER.unpack(head)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r} (want {MAGIC!r})")
    header = TraceHeader(
        n_layers=n_layers,
        n_q_heads=n_q,
        n_kv_heads=n_kv,
        head_dim=d,
        n_prompt=n_prompt,
        n_steps=n_steps,
        has_token_ids=bool(flags & FLAG_TOKEN_IDS),
        has_token_text=bool(flags & FLAG_TOKEN_TEXT),
        version=version,
    )
    header.validate()

    token_ids = None
    if header.has_token_ids:
        raw = _read_exact(source, 4 * n_steps, "token ids")
        token_ids = np.frombuffer(raw, dtype="<u4").copy()
    token_text = None
    if header.has_token_text:
        token_text = []
        for t in range(n_steps):
            (length,) = struct.unpack("<I", _read_exact(source, 4, f"text length (step {t})"))
            token_text.append(_read_exact(source, length, f"text bytes (step {t})").decode("utf-8"))

    q_states = np.empty((n_steps, n_layers, n_q, d), dtype=np.float32)
    k_states = np.empty((n_steps, n_layers, n_kv, d), dtype=np.float32)
    q_bytes = n_q * d * 4
    k_bytes = n_kv * d * 4
    for t in range(n_steps):
        for layer in range(n_layers):
            q_states[t, layer] = np.frombuffer(
                _read_exact(source, q_bytes, f"Q states (step {t})"), dtype="<f4"
            ).reshape(n_q, d)
            k_states[t, layer] = np.frombuffer(
                _read_exact(source, k_bytes, f"K states (step {t})"), dtype="<f4"
            ).reshape(n_kv, d)

    trace = DecodeTrace(
        header=header,
        q_states=q_states,
        k_states=k_states,
        token_ids=token_ids,
        token_text=token_text,
    )
    trace.validate()
    return trace


def write_trace_file(trace: DecodeTrace, path) -> int:
    with open(path, "wb") as f:
        return write_trace(trace, f)


def read_trace_file(path) -> DecodeTrace:
    with open(path, "rb") as f:
        return read_trace(f)


def slice_trace(trace: DecodeTrace, start: int, stop: int) -> DecodeTrace:
    """New trace over steps [start, stop); original offsets kept in metadata."""
    n = trace.header.n_steps
    if not (0 <= start <= stop <= n):
        raise IndexError(f"slice [{start}, {stop}) out of bounds for {n} steps")
    new_prompt = min(max(trace.header.n_prompt - start, 0), stop - start)
    header = replace(trace.header, n_steps=stop - start, n_prompt=new_prompt)
    return DecodeTrace(
        header=header,
        q_states=trace.q_states[start:stop].copy(),
        k_states=trace.k_states[start:stop].copy(),
        token_ids=None if trace.token_ids is None else trace.token_ids[start:stop].copy(),
        token_text=None if trace.token_text is None else list(trace.token_text[start:stop]),
        origin_offset=trace.origin_offset + start,
    )


def dump_header_json(path) -> str:
    """JSON header dump for file inspection; reads only the fixed header."""
    with open(path, "rb") as f:
        head = f.read(HEADER_SIZE)
    if len(head) < HEADER_SIZE:
        raise TraceFormatError("truncated payload while reading header")
    magic, version, n_layers, n_q, n_kv, d, n_prompt, n_steps, flags = _HEADER.unpack(head)
    if magic != MAGIC:
        raise TraceFormatError(f"bad magic {magic!r} (want {MAGIC!r})")
    header = TraceHeader(
        n_layers=n_layers,
        n_q_heads=n_q,
        n_kv_heads=n_kv,
        head_dim=d,
        n_prompt=n_prompt,
        n_steps=n_steps,
        has_token_ids=bool(flags & FLAG_TOKEN_IDS),
        has_token_text=bool(flags & FLAG_TOKEN_TEXT),
        version=version,
    )
    return header.to_json()
