"""Greedy / temperature decoding that records every head's attention."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .model import EMPTY_MASK, HeadMask, ModelError, ModelParams, forward


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"
    temperature: float = 1.0
    max_new_tokens: int = 8
    stop_token: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.mode not in ("greedy", "sample"):
            raise ModelError(f"unknown decode mode {self.mode!r}")
        if self.mode == "sample" and not self.temperature > 0:
            raise ModelError("temperature must be positive when sampling")
        if self.max_new_tokens <= 0:
            raise ModelError("max_new_tokens must be positive")

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "temperature": self.temperature,
            "max_new_tokens": self.max_new_tokens,
            "stop_token": self.stop_token,
            "rng_seed": self.rng_seed,
        }


@dataclass
class AttentionTrace:
    """Per decode step: ``attn[t]`` has shape ``(n_layers, n_heads, prompt_len + t)``.

    Step ``t`` is zero-based here, so ``attn[t]`` covers the ``|x'| + t - 1``
    attendable positions of the one-based convention. ``argmax[t]`` is the
    lowest-index maximiser of each head's distribution.
    """

    prompt_len: int
    tokens: list[int] = field(default_factory=list)
    attn: list[np.ndarray] = field(default_factory=list)
    argmax: list[np.ndarray] = field(default_factory=list)

    def __len__(self):
        return len(self.tokens)

    def append(self, token: int, attn: np.ndarray):
        self.tokens.append(int(token))
        self.attn.append(attn)
        self.argmax.append(first_argmax(attn))


def first_argmax(a: np.ndarray) -> np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(a, axis=-1)


def _pick(logits: torch.Tensor, cfg: DecodeConfig, gen: torch.Generator | None) -> int:
    if cfg.mode == "greedy":
        return int(torch.argmax(logits))
    probs = torch.softmax(logits.to(torch.float64) / cfg.temperature, dim=-1)
    return int(torch.multinomial(probs, 1, generator=gen))


def decode(
    params: ModelParams,
    prompt: Sequence[int],
    cfg: DecodeConfig,
    mask: HeadMask = EMPTY_MASK,
    trace: bool = True,
) -> tuple[list[int], AttentionTrace | None]:
    """Generate up to ``cfg.max_new_tokens`` tokens after ``prompt``.

    The stop token, when emitted, is included in the output and ends decoding.
    Each step re-runs the full prefix; at these sequence lengths that costs
    little and keeps every step's numerics independent of cache state.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ModelError("prompt must be non-empty")
    if len(prompt) + cfg.max_new_tokens > params.config.max_seq_len:
        raise ModelError(
            f"context overflow: prompt {len(prompt)} + {cfg.max_new_tokens} new tokens "
            f"> max_seq_len {params.config.max_seq_len}"
        )
    gen = torch.Generator().manual_seed(cfg.rng_seed) if cfg.mode == "sample" else None
    seq = list(prompt)
    out: list[int] = []
    tr = AttentionTrace(len(prompt)) if trace else None
    with torch.no_grad():
        for _ in range(cfg.max_new_tokens):
            logits, pats = forward(params, torch.tensor(seq), mask, return_attn=trace)
            tok = _pick(logits[-1], cfg, gen)
            if tr is not None:
                tr.append(tok, torch.stack([p[:, -1, :] for p in pats]).numpy().copy())
            out.append(tok)
            seq.append(tok)
            if cfg.stop_token is not None and tok == cfg.stop_token:
                break
    return out, tr


def decode_many(
    params: ModelParams,
    prompts: Sequence[Sequence[int]],
    cfg: DecodeConfig,
    mask: HeadMask = EMPTY_MASK,
    seeds: Sequence[int] | None = None,
    trace: bool = False,
) -> list[tuple[list[int], AttentionTrace | None]]:
    """Decode several prompts, one ``decode`` call per prompt.

    ``seeds`` overrides ``cfg.rng_seed`` per prompt so that each output depends
    only on its own prompt and seed.
    """
    results = []
    for i, prompt in enumerate(prompts):
        c = cfg if seeds is None else DecodeConfig(
            cfg.mode, cfg.temperature, cfg.max_new_tokens, cfg.stop_token, int(seeds[i])
        )
        results.append(decode(params, prompt, c, mask, trace=trace))
    return results


def full_attention(params: ModelParams, tokens: Sequence[int]) -> np.ndarray:
    """All attention matrices for one sequence, shape ``(n_layers, n_heads, T, T)``."""
    with torch.no_grad():
        _, pats = forward(params, torch.tensor(list(tokens)), EMPTY_MASK, return_attn=True)
    return torch.stack(pats).numpy()
