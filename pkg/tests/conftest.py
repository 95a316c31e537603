import numpy as np
import pytest

from kvsim.trace import DecodeTrace, TraceHeader


def make_trace(
    rng: np.random.Generator,
    n_layers: int = 2,
    n_q_heads: int = 4,
    n_kv_heads: int = 2,
    head_dim: int = 8,
    n_prompt: int | None = None,
    n_steps: int = 64,
    quantize: bool = False,
    duplicate_keys: bool = False,
    with_tokens: bool = False,
) -> DecodeTrace:
    """Random trace; quantize/duplicate_keys force exact score ties."""
    if n_prompt is None:
        n_prompt = min(4, n_steps)
    q = rng.standard_normal((n_steps, n_layers, n_q_heads, head_dim))
    k = rng.standard_normal((n_steps, n_layers, n_kv_heads, head_dim))
    if quantize:
        q = np.sign(np.round(q))
        k = np.sign(np.round(k))
    if duplicate_keys:
        for t in range(2, n_steps, 3):
            src = int(rng.integers(0, t))
            k[t] = k[src]
            q[t] = q[src]
    header = TraceHeader(
        n_layers=n_layers,
        n_q_heads=n_q_heads,
        n_kv_heads=n_kv_heads,
        head_dim=head_dim,
        n_prompt=n_prompt,
        n_steps=n_steps,
        has_token_ids=with_tokens,
        has_token_text=with_tokens,
    )
    token_ids = None
    token_text = None
    if with_tokens:
        token_ids = rng.integers(0, 16, size=n_steps).astype(np.uint32)
        token_text = [f"w{t}" for t in token_ids]
    trace = DecodeTrace(
        header=header,
        q_states=q.astype(np.float32),
        k_states=k.astype(np.float32),
        token_ids=token_ids,
        token_text=token_text,
    )
    trace.validate()
    return trace


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def small_trace(rng) -> DecodeTrace:
    return make_trace(rng, n_steps=80, n_prompt=6)
