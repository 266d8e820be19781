"""
Head masking in five minutes
============================

A head is silenced by zeroing its column block of the attention output
projection. The same effect can be had at runtime with a gate, and the two
agree bit for bit.
"""

import torch

from retmask.model import HeadMask, ModelConfig, apply_head_mask, forward, init_params

torch.set_num_threads(1)

# a small two-layer model with four heads per layer
cfg = ModelConfig(vocab_size=64, n_layers=2, n_heads=4, d_model=32, d_mlp=64, rng_seed=0)
params = init_params(cfg)
print("W_O shape per layer:", tuple(params.tensors["blocks.0.attn.W_O"].shape))

# head (1, 2) owns columns 16..23 of layer 1's W_O
mask = HeadMask([(1, 2)])
edited = apply_head_mask(params, mask)
block = edited.tensors["blocks.1.attn.W_O"][:, 2 * cfg.d_head:3 * cfg.d_head]
print("masked block is zero:", bool((block == 0).all()))

# the weight edit and the runtime gate give identical logits
tokens = torch.randint(0, 64, (12,), generator=torch.Generator().manual_seed(1))
gated, _ = forward(params, tokens, mask)
direct, _ = forward(edited, tokens)
print("max |gated - edited|:", float((gated - direct).abs().max()))

# masking every head leaves only the embeddings, MLPs and unembedding
everything = HeadMask.all_heads(cfg)
print("heads in the full mask:", len(everything))
