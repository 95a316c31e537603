#!/usr/bin/env python3
"""Regenerate the golden conformance corpus from a seeded tiny model.

Golden files are committed; this script only needs rerunning if the trace
format itself changes.
"""

from pathlib import Path

import torch
from transformers import LlamaConfig, LlamaForCausalLM

from kvcapture import CaptureConfig, capture

HERE = Path(__file__).resolve().parent


def main() -> None:
    model_dir = HERE / "_model"
    cfg = LlamaConfig(
        vocab_size=128, hidden_size=64, intermediate_size=128, num_hidden_layers=2,
        num_attention_heads=4, num_key_value_heads=2, head_dim=16,
        max_position_embeddings=512,
    )
    torch.manual_seed(7)
    LlamaForCausalLM(cfg).save_pretrained(model_dir)

    specs = [
        ("golden_greedy_short.gkvt", dict(prompt_ids=[1, 2, 3], max_new_tokens=8,
                                          greedy=True)),
        ("golden_sampled.gkvt", dict(prompt_ids=[10, 20, 30, 40], max_new_tokens=16,
                                     seed=42)),
        ("golden_layer_subset.gkvt", dict(prompt_ids=[5, 6], max_new_tokens=12,
                                          layers=[0], greedy=True)),
    ]
    for name, kw in specs:
        path = capture(CaptureConfig(model=str(model_dir), output=str(HERE / name), **kw))
        print(f"wrote {path}")

    import shutil

    shutil.rmtree(model_dir)


if __name__ == "__main__":
    main()
