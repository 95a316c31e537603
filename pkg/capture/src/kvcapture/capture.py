"""Hook a decoder-only transformer during generation and emit GKVT traces.

The capture grabs each layer's query/key projections plus the shared
rotary cos/sin through forward hooks, applies the rotation exactly the
way the attention layer does, and stores the post-rotary states. Scores
recomputed from a captured file therefore match the model's own
attention probabilities.

Works with Llama-family architectures: per-layer `self_attn.{q,k}_proj`
modules, a model-level `rotary_emb`, and group-query metadata
(`num_attention_heads` / `num_key_value_heads`) in the config.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from kvsim.trace import DecodeTrace, TraceHeader, write_trace_file


class UnsupportedArchitectureError(ValueError):
    """Model lacks the hooks this capture needs (projections, rotary, GQA)."""


@dataclass
class CaptureConfig:
    """What to capture and how to sample."""

    model: str  # HF model id or local path
    prompt: str | None = None
    prompt_ids: list[int] | None = None
    max_new_tokens: int = 64
    layers: list[int] | None = None  # default: all layers
    output: str = "capture.gkvt"
    temperature: float = 0.6
    top_p: float = 0.95
    seed: int = 0
    greedy: bool = False
    stop_on_eos: bool = False

    def validate(self) -> None:
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be >= 1")
        if self.prompt is None and not self.prompt_ids:
            raise ValueError("need a prompt (text) or prompt_ids")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")


def _rotate_half(x: torch.Tensor) -> torch.Tensor:
    half = x.shape[-1] // 2
    return torch.cat((-x[..., half:], x[..., :half]), dim=-1)


def _apply_rotary(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    # x: (B, heads, T, d); cos/sin: (B, T, d)
    return (x * cos.unsqueeze(1)) + (_rotate_half(x) * sin.unsqueeze(1))


class _Recorder:
    """Forward hooks collecting per-call projections and rotary tables."""

    def __init__(self, model, layer_indices: list[int]):
        self.layer_indices = layer_indices
        self.cos_sin = None
        self.proj: dict[tuple[int, str], torch.Tensor] = {}
        self.handles = []
        self.handles.append(
            model.model.rotary_emb.register_forward_hook(self._rotary_hook)
        )
        for li in layer_indices:
            attn = model.model.layers[li].self_attn
            self.handles.append(
                attn.q_proj.register_forward_hook(self._proj_hook(li, "q"))
            )
            self.handles.append(
                attn.k_proj.register_forward_hook(self._proj_hook(li, "k"))
            )

    def _rotary_hook(self, module, args, output):
        self.cos_sin = output

    def _proj_hook(self, layer_idx: int, which: str):
        def hook(module, args, output):
            self.proj[(layer_idx, which)] = output.detach()

        return hook

    def take_step(self, n_q: int, n_kv: int, head_dim: int):
        """Post-rotary (T, n_q, d) and (T, n_kv, d) float32 arrays for the
        positions processed by the last forward call."""
        cos, sin = self.cos_sin
        q_steps, k_steps = [], []
        for li in self.layer_indices:
            q = self.proj[(li, "q")]
            k = self.proj[(li, "k")]
            B, T, _ = q.shape
            q = q.view(B, T, n_q, head_dim).transpose(1, 2)
            k = k.view(B, T, n_kv, head_dim).transpose(1, 2)
            q_rot = _apply_rotary(q, cos, sin)[0].transpose(0, 1)  # (T, n_q, d)
            k_rot = _apply_rotary(k, cos, sin)[0].transpose(0, 1)
            q_steps.append(q_rot.to(torch.float32).cpu().numpy())
            k_steps.append(k_rot.to(torch.float32).cpu().numpy())
        # (T, n_layers, heads, d)
        return np.stack(q_steps, axis=1), np.stack(k_steps, axis=1)

    def remove(self) -> None:
        for h in self.handles:
            h.remove()


def _check_architecture(model) -> None:
    cfg = model.config
    for attr in ("num_attention_heads", "num_key_value_heads", "num_hidden_layers"):
        if getattr(cfg, attr, None) is None:
            raise UnsupportedArchitectureError(
                f"model config lacks {attr}; group-query metadata is required"
            )
    inner = getattr(model, "model", None)
    if inner is None or not hasattr(inner, "rotary_emb") or not hasattr(inner, "layers"):
        raise UnsupportedArchitectureError(
            "model lacks a rotary embedding or a per-layer structure to hook"
        )
    attn = inner.layers[0].self_attn
    if not hasattr(attn, "q_proj") or not hasattr(attn, "k_proj"):
        raise UnsupportedArchitectureError(
            "attention layers lack separable q_proj/k_proj modules"
        )


def _load_model(path: str):
    from transformers import AutoModelForCausalLM

    model = AutoModelForCausalLM.from_pretrained(
        path, attn_implementation="eager", dtype=torch.float32
    )
    model.eval()
    _check_architecture(model)
    return model


def _load_tokenizer(path: str):
    try:
        from transformers import AutoTokenizer

        return AutoTokenizer.from_pretrained(path)
    except Exception:
        return None


def _sample(logits: torch.Tensor, cfg: CaptureConfig, gen: torch.Generator) -> int:
    if cfg.greedy:
        return int(torch.argmax(logits).item())
    probs = torch.softmax(logits / cfg.temperature, dim=-1)
    sorted_probs, sorted_idx = torch.sort(probs, descending=True)
    cumulative = torch.cumsum(sorted_probs, dim=-1)
    # keep the smallest prefix whose mass reaches top_p
    cut = cumulative - sorted_probs >= cfg.top_p
    sorted_probs[cut] = 0.0
    sorted_probs /= sorted_probs.sum()
    choice = torch.multinomial(sorted_probs, 1, generator=gen)
    return int(sorted_idx[choice].item())


def capture(cfg: CaptureConfig) -> Path:
    """Generate with the model and write one GKVT trace; returns the path."""
    cfg.validate()
    model = _load_model(cfg.model)
    mcfg = model.config
    n_q = mcfg.num_attention_heads
    n_kv = mcfg.num_key_value_heads
    head_dim = getattr(mcfg, "head_dim", None) or mcfg.hidden_size // n_q
    layer_indices = cfg.layers if cfg.layers is not None else list(range(mcfg.num_hidden_layers))
    for li in layer_indices:
        if not 0 <= li < mcfg.num_hidden_layers:
            raise ValueError(f"layer index {li} out of range")

    tokenizer = _load_tokenizer(cfg.model)
    if cfg.prompt_ids:
        prompt_ids = list(cfg.prompt_ids)
    else:
        if tokenizer is None:
            raise ValueError("prompt text given but no tokenizer could be loaded")
        prompt_ids = tokenizer(cfg.prompt)["input_ids"]
    if not prompt_ids:
        raise ValueError("empty prompt after tokenization")

    gen = torch.Generator().manual_seed(cfg.seed)
    recorder = _Recorder(model, layer_indices)
    q_chunks, k_chunks, all_ids = [], [], list(prompt_ids)
    eos_id = getattr(mcfg, "eos_token_id", None)
    try:
        with torch.no_grad():
            out = model(input_ids=torch.tensor([prompt_ids]), use_cache=True)
            q_np, k_np = recorder.take_step(n_q, n_kv, head_dim)
            q_chunks.append(q_np)
            k_chunks.append(k_np)
            past = out.past_key_values
            next_id = _sample(out.logits[0, -1], cfg, gen)
            for _ in range(cfg.max_new_tokens):
                all_ids.append(next_id)
                out = model(input_ids=torch.tensor([[next_id]]),
                            past_key_values=past, use_cache=True)
                q_np, k_np = recorder.take_step(n_q, n_kv, head_dim)
                q_chunks.append(q_np)
                k_chunks.append(k_np)
                past = out.past_key_values
                if cfg.stop_on_eos and eos_id is not None and next_id == eos_id:
                    break
                next_id = _sample(out.logits[0, -1], cfg, gen)
    finally:
        recorder.remove()

    q_states = np.concatenate(q_chunks, axis=0)
    k_states = np.concatenate(k_chunks, axis=0)
    token_text = None
    if tokenizer is not None:
        token_text = [str(t) for t in tokenizer.convert_ids_to_tokens(all_ids)]
    header = TraceHeader(
        n_layers=len(layer_indices),
        n_q_heads=n_q,
        n_kv_heads=n_kv,
        head_dim=head_dim,
        n_prompt=len(prompt_ids),
        n_steps=len(all_ids),
        has_token_ids=True,
        has_token_text=token_text is not None,
    )
    trace = DecodeTrace(
        header=header,
        q_states=q_states.astype(np.float32),
        k_states=k_states.astype(np.float32),
        token_ids=np.asarray(all_ids, dtype=np.uint32),
        token_text=token_text,
    )
    trace.validate()

    out_path = Path(cfg.output)
    tmp_path = out_path.with_suffix(out_path.suffix + ".tmp")
    try:
        write_trace_file(trace, tmp_path)
        os.replace(tmp_path, out_path)
    except BaseException:
        tmp_path.unlink(missing_ok=True)  # no partial files on failure
        raise
    return out_path


def batch_capture(prompts_file: str, cfg: CaptureConfig, out_dir: str) -> Path:
    """One trace per prompt line; per-prompt failures land in the manifest."""
    prompts = [line.strip() for line in Path(prompts_file).read_text().splitlines()
               if line.strip()]
    if not prompts:
        raise ValueError(f"prompts file {prompts_file} is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, prompt in enumerate(prompts):
        path = out / f"trace_{i:04d}.gkvt"
        entry = {
            "index": i,
            "prompt": prompt,
            "path": path.name,
            "sampling": {
                "temperature": cfg.temperature,
                "top_p": cfg.top_p,
                "seed": cfg.seed,
                "greedy": cfg.greedy,
            },
        }
        try:
            one = CaptureConfig(**{**cfg.__dict__, "prompt": prompt,
                                   "prompt_ids": None, "output": str(path)})
            trace_path = capture(one)
            from kvsim.trace import read_trace_file

            header = read_trace_file(trace_path).header
            entry["n_steps"] = header.n_steps
            entry["n_prompt"] = header.n_prompt
        except Exception as exc:
            entry["error"] = f"{type(exc).__name__}: {exc}"
        entries.append(entry)
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"traces": entries}, indent=2, sort_keys=True) + "\n")
    return manifest
