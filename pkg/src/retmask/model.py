"""Toy decoder-only transformer with per-head tracing and head masking.

Weights live in a plain ``dict`` of tensors so that masking, checkpointing and
gradient checks can operate on them directly. Per-head projections follow the
``(n_heads, d_head, d_model)`` layout; ``W_O`` is a ``(d_model, d_model)``
matrix whose column block ``[h * d_head, (h + 1) * d_head)`` belongs to head
``h``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

POSITIONAL_SCHEMES = ("rotary", "learned")


class ModelError(ValueError):
    """Invalid input to a model operation."""


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_mlp: int = 256
    max_seq_len: int = 64
    positional: str = "rotary"
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_mlp", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ModelError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ModelError("d_model must be divisible by n_heads")
        if self.positional not in POSITIONAL_SCHEMES:
            raise ModelError(f"unknown positional scheme {self.positional!r}")
        if self.positional == "rotary" and self.d_head % 2:
            raise ModelError("rotary embeddings need an even d_head")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def total_heads(self) -> int:
        return self.n_layers * self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "d_mlp": self.d_mlp,
            "max_seq_len": self.max_seq_len,
            "positional": self.positional,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass(frozen=True, order=True)
class HeadId:
    layer: int
    head: int

    def __str__(self):
        return f"L{self.layer}H{self.head}"


class HeadMask(frozenset):
    """Set of heads whose output is removed from the residual stream."""

    def __new__(cls, heads: Iterable = ()):
        items = []
        for h in heads:
            if not isinstance(h, HeadId):
                h = HeadId(int(h[0]), int(h[1]))
            items.append(h)
        return super().__new__(cls, items)

    def validate(self, cfg: ModelConfig) -> "HeadMask":
        for h in self:
            if not (0 <= h.layer < cfg.n_layers and 0 <= h.head < cfg.n_heads):
                raise ModelError(f"invalid head {h} for {cfg.n_layers}x{cfg.n_heads} model")
        return self

    def sorted(self) -> list[HeadId]:
        return sorted(self)

    def gates(self, cfg: ModelConfig, dtype=torch.float32) -> torch.Tensor:
        g = torch.ones(cfg.n_layers, cfg.n_heads, dtype=dtype)
        for h in self:
            g[h.layer, h.head] = 0.0
        return g

    @classmethod
    def all_heads(cls, cfg: ModelConfig) -> "HeadMask":
        return cls(HeadId(l, h) for l in range(cfg.n_layers) for h in range(cfg.n_heads))

    def to_list(self) -> list[list[int]]:
        return [[h.layer, h.head] for h in self.sorted()]

    def __repr__(self):
        return "HeadMask({" + ", ".join(str(h) for h in self.sorted()) + "})"


EMPTY_MASK = HeadMask()


def all_head_ids(cfg: ModelConfig) -> list[HeadId]:
    return [HeadId(l, h) for l in range(cfg.n_layers) for h in range(cfg.n_heads)]


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def clone(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().clone() for k, v in self.tensors.items()})

    def to(self, dtype: torch.dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.detach().to(dtype) for k, v in self.tensors.items()})

    @property
    def dtype(self) -> torch.dtype:
        return next(iter(self.tensors.values())).dtype

    def n_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())

    def all_finite(self) -> bool:
        return all(bool(torch.isfinite(t).all()) for t in self.tensors.values())

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of config and every tensor."""
        if self.config != other.config or self.names() != other.names():
            return False
        return all(
            a.dtype == b.dtype and a.shape == b.shape and a.numpy().tobytes() == b.numpy().tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, H, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab_size, d)}
    if cfg.positional == "learned":
        shapes["pos_embed"] = (cfg.max_seq_len, d)
    for l in range(cfg.n_layers):
        p = f"blocks.{l}."
        shapes[p + "ln1.w"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        shapes[p + "attn.W_Q"] = (H, dh, d)
        shapes[p + "attn.W_K"] = (H, dh, d)
        shapes[p + "attn.W_V"] = (H, dh, d)
        shapes[p + "attn.W_O"] = (d, d)
        shapes[p + "ln2.w"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.W_in"] = (cfg.d_mlp, d)
        shapes[p + "mlp.b_in"] = (cfg.d_mlp,)
        shapes[p + "mlp.W_out"] = (d, cfg.d_mlp)
        shapes[p + "mlp.b_out"] = (d,)
    shapes["ln_f.w"] = (d,)
    shapes["ln_f.b"] = (d,)
    shapes["unembed"] = (cfg.vocab_size, d)
    return shapes


def init_params(cfg: ModelConfig, dtype: torch.dtype = torch.float32) -> ModelParams:
    gen = torch.Generator().manual_seed(cfg.rng_seed)
    out_std = 0.02 / math.sqrt(2 * cfg.n_layers)
    tensors = {}
    for name, shape in expected_shapes(cfg).items():
        if name.endswith(".w"):
            t = torch.ones(shape, dtype=torch.float64)
        elif name.endswith(".b") or name.endswith("b_in") or name.endswith("b_out"):
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            std = out_std if name.endswith(("W_O", "W_out")) else 0.02
            t = torch.randn(shape, generator=gen, dtype=torch.float64) * std
        tensors[name] = t.to(dtype)
    return ModelParams(cfg, tensors)


def apply_head_mask(params: ModelParams, mask: HeadMask) -> ModelParams:
    """Return a copy of ``params`` with each masked head's ``W_O`` column block zeroed."""
    cfg = params.config
    HeadMask(mask).validate(cfg)
    out = params.clone()
    dh = cfg.d_head
    for h in mask:
        out.tensors[f"blocks.{h.layer}.attn.W_O"][:, h.head * dh:(h.head + 1) * dh] = 0.0
    return out


def _rotary_tables(T: int, dh: int, dtype: torch.dtype, base: float = 10000.0):
    inv = 1.0 / (base ** (torch.arange(0, dh, 2, dtype=torch.float64) / dh))
    ang = torch.arange(T, dtype=torch.float64)[:, None] * inv[None, :]
    return torch.cos(ang).to(dtype), torch.sin(ang).to(dtype)


def _rotate(x: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    x1, x2 = x[..., 0::2], x[..., 1::2]
    r1 = x1 * cos - x2 * sin
    r2 = x1 * sin + x2 * cos
    return torch.stack((r1, r2), dim=-1).flatten(-2)


def _check_tokens(cfg: ModelConfig, tokens: torch.Tensor):
    if tokens.shape[-1] > cfg.max_seq_len:
        raise ModelError(f"sequence length {tokens.shape[-1]} exceeds max_seq_len {cfg.max_seq_len}")
    if tokens.shape[-1] == 0:
        raise ModelError("empty token sequence")
    if tokens.numel() and (int(tokens.min()) < 0 or int(tokens.max()) >= cfg.vocab_size):
        raise ModelError("token id out of range")


def _as_batch(tokens) -> tuple[torch.Tensor, bool]:
    t = torch.as_tensor(tokens, dtype=torch.long)
    if t.dim() == 1:
        return t[None, :], True
    return t, False


def forward(
    params: ModelParams,
    tokens,
    mask: HeadMask = EMPTY_MASK,
    return_attn: bool = True,
) -> tuple[torch.Tensor, list[torch.Tensor] | None]:
    """Run the model.

    ``tokens`` is ``(T,)`` or ``(B, T)``. Returns logits of shape ``(..., T, V)``
    and, if requested, one ``(..., H, T, T)`` attention tensor per layer.
    Masked heads are gated to zero before the ``W_O`` product; because the
    weight-edited path runs the same ops with a unit gate and a zeroed column
    block, both paths produce identical results.
    """
    cfg = params.config
    toks, squeeze = _as_batch(tokens)
    _check_tokens(cfg, toks)
    mask = HeadMask(mask).validate(cfg)
    p = params.tensors
    dtype = params.dtype
    B, T = toks.shape
    H, dh, d = cfg.n_heads, cfg.d_head, cfg.d_model
    gates = mask.gates(cfg, dtype)

    x = p["embed"][toks]
    if cfg.positional == "learned":
        x = x + p["pos_embed"][:T]
    else:
        cos, sin = _rotary_tables(T, dh, dtype)
    causal = torch.ones(T, T, dtype=torch.bool).triu(1)
    patterns = [] if return_attn else None
    for l in range(cfg.n_layers):
        pre = f"blocks.{l}."
        h = F.layer_norm(x, (d,), p[pre + "ln1.w"], p[pre + "ln1.b"])
        q = torch.einsum("btd,hed->bhte", h, p[pre + "attn.W_Q"])
        k = torch.einsum("btd,hed->bhte", h, p[pre + "attn.W_K"])
        v = torch.einsum("btd,hed->bhte", h, p[pre + "attn.W_V"])
        if cfg.positional == "rotary":
            q = _rotate(q, cos, sin)
            k = _rotate(k, cos, sin)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(dh)
        scores = scores.masked_fill(causal, float("-inf"))
        attn = torch.softmax(scores, dim=-1)
        if patterns is not None:
            patterns.append(attn[0] if squeeze else attn)
        z = attn @ v
        z = z * gates[l][None, :, None, None]
        z = z.transpose(1, 2).reshape(B, T, d)
        x = x + z @ p[pre + "attn.W_O"].T
        h = F.layer_norm(x, (d,), p[pre + "ln2.w"], p[pre + "ln2.b"])
        h = F.gelu(h @ p[pre + "mlp.W_in"].T + p[pre + "mlp.b_in"])
        x = x + h @ p[pre + "mlp.W_out"].T + p[pre + "mlp.b_out"]
    x = F.layer_norm(x, (d,), p["ln_f.w"], p["ln_f.b"])
    logits = x @ p["unembed"].T
    if squeeze:
        logits = logits[0]
    return logits, patterns


def params_requiring_grad(params: ModelParams) -> ModelParams:
    return ModelParams(
        params.config, {k: v.detach().clone().requires_grad_(True) for k, v in params.tensors.items()}
    )


def token_logprobs(logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Log-probability of ``tokens[..., t]`` under ``logits[..., t - 1]``; shape ``(..., T - 1)``."""
    logp = torch.log_softmax(logits[..., :-1, :], dim=-1)
    return logp.gather(-1, tokens[..., 1:].unsqueeze(-1)).squeeze(-1)


OBJECTIVES = ("cross_entropy", "sequence_logprob")


def loss_and_grads(
    params: ModelParams,
    tokens,
    target_mask,
    objective: str = "cross_entropy",
    mask: HeadMask = EMPTY_MASK,
) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss and exact gradients for a batch.

    ``target_mask[b, t]`` marks tokens that are prediction targets (predicted
    from position ``t - 1``; column 0 is ignored). ``cross_entropy`` is the mean
    negative log-likelihood over targets; ``sequence_logprob`` is the batch
    sum of per-sequence summed log-probabilities. A batch with no targets
    yields loss 0 and zero gradients.
    """
    if objective not in OBJECTIVES:
        raise ModelError(f"unknown objective {objective!r}")
    toks, _ = _as_batch(tokens)
    tmask, _ = _as_batch(target_mask)
    if toks.shape[0] == 0:
        raise ModelError("empty batch")
    live = params_requiring_grad(params)
    loss = objective_loss(live, toks, tmask.to(torch.bool), objective, mask)
    if not torch.isfinite(loss):
        raise DivergenceError(f"non-finite loss {float(loss)}")
    names = live.names()
    grads = torch.autograd.grad(loss, [live.tensors[n] for n in names], allow_unused=True)
    out = {}
    for n, g in zip(names, grads):
        out[n] = torch.zeros_like(live.tensors[n]) if g is None else g.detach()
    return float(loss.detach()), out


def objective_loss(params, toks, tmask, objective, mask=EMPTY_MASK) -> torch.Tensor:
    logits, _ = forward(params, toks, mask, return_attn=False)
    lp = token_logprobs(logits, toks)
    w = tmask[:, 1:].to(lp.dtype)
    total = (lp * w).sum()
    if objective == "sequence_logprob":
        return total
    n = w.sum()
    if n == 0:
        return total * 0.0
    return -total / n


def sequence_logprob(
    params: ModelParams,
    prompt: Sequence[int],
    response: Sequence[int],
    mask: HeadMask = EMPTY_MASK,
) -> float:
    """Sum of log-probabilities of ``response`` tokens given ``prompt``."""
    prompt, response = list(prompt), list(response)
    if not prompt:
        raise ModelError("prompt must be non-empty")
    if len(prompt) + len(response) > params.config.max_seq_len:
        raise ModelError("prompt + response exceeds max_seq_len")
    if not response:
        return 0.0
    toks = torch.tensor(prompt + response, dtype=torch.long)
    with torch.no_grad():
        logits, _ = forward(params, toks, mask, return_attn=False)
        lp = token_logprobs(logits, toks)[len(prompt) - 1:]
    return float(lp.sum())


def batch_sequence_logprobs(
    params: ModelParams,
    pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
    mask: HeadMask = EMPTY_MASK,
) -> torch.Tensor:
    """Per-pair summed response log-probabilities as a differentiable tensor.

    Sequences are right-padded; causal attention keeps padding from leaking
    into earlier positions.
    """
    toks, tmask = pack_pairs(pairs)
    logits, _ = forward(params, toks, mask, return_attn=False)
    lp = token_logprobs(logits, toks)
    return (lp * tmask[:, 1:].to(lp.dtype)).sum(-1)


def pack_pairs(pairs, pad_id: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    T = max(len(p) + len(r) for p, r in pairs)
    toks = torch.full((len(pairs), T), pad_id, dtype=torch.long)
    tmask = torch.zeros((len(pairs), T), dtype=torch.bool)
    for i, (p, r) in enumerate(pairs):
        seq = list(p) + list(r)
        toks[i, : len(seq)] = torch.tensor(seq, dtype=torch.long)
        tmask[i, len(p): len(seq)] = True
    return toks, tmask


def with_config(params: ModelParams, **changes) -> ModelParams:
    return ModelParams(replace(params.config, **changes), dict(params.tensors))
