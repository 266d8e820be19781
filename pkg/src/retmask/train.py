"""Pretraining, SFT and DPO loops sharing one AdamW + warmup/cosine schedule."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import params_hash
from .model import (
    DivergenceError,
    ModelError,
    ModelParams,
    batch_sequence_logprobs,
    forward,
    objective_loss,
    pack_pairs,
    params_requiring_grad,
)
from .tasks import (PretrainSequence, TaskVocab, answer_mask, corpus_tensor, gen_pretrain_corpus,
                    gen_repeat_batch)

# Optimizer values for full-size (billion-parameter) runs; kept as a preset.
LARGE_PEAK_LR = 5e-7
LARGE_MIN_LR = 5e-8
LARGE_LR_SWEEP = (2.5e-5, 2.5e-6, 5e-7)
LARGE_BATCH_SIZE = 512


class TrainError(ValueError):
    pass


@dataclass
class OptimConfig:
    peak_lr: float = 1e-3
    min_lr: float = 1e-4
    warmup_frac: float = 0.1
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.95
    batch_size: int = 64
    epochs: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_frac < 1:
            raise TrainError("warmup_frac must lie in [0, 1)")
        if self.batch_size < 1:
            raise TrainError("batch_size must be >= 1")
        if self.peak_lr < 0 or self.min_lr < 0:
            raise TrainError("learning rates must be non-negative")


@dataclass
class DpoConfig(OptimConfig):
    beta: float = 0.1
    peak_lr: float = 2e-4
    min_lr: float = 2e-5
    reference_path: str | None = None

    def __post_init__(self):
        super().__post_init__()
        if not self.beta > 0:
            raise TrainError("beta must be positive")

    @classmethod
    def large_scale_preset(cls, **kw) -> "DpoConfig":
        base = dict(peak_lr=LARGE_PEAK_LR, min_lr=LARGE_MIN_LR, warmup_frac=0.1,
                    weight_decay=0.1, beta1=0.9, beta2=0.95, batch_size=LARGE_BATCH_SIZE)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainReport:
    objective: str
    steps: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    margin: list[float] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    wall_clock: list[float] = field(default_factory=list)
    eval: list[dict] = field(default_factory=list)
    final_hash: str = ""
    extra: dict = field(default_factory=dict)

    def record(self, step, loss, lr, grad_norm, margin=float("nan"), t0=None):
        if self.steps and step <= self.steps[-1]:
            raise TrainError("step index must increase")
        for v in (loss, lr, grad_norm):
            if not math.isfinite(v):
                raise DivergenceError(f"non-finite value recorded at step {step}")
        self.steps.append(step)
        self.loss.append(loss)
        self.lr.append(lr)
        self.grad_norm.append(grad_norm)
        self.margin.append(margin)
        self.wall_clock.append(0.0 if t0 is None else time.perf_counter() - t0)

    def rows(self) -> list[dict]:
        return [{"step": s, "loss": l, "lr": r, "margin": m, "grad_norm": g}
                for s, l, r, m, g in zip(self.steps, self.loss, self.lr, self.margin, self.grad_norm)]

    def summary(self) -> dict:
        """Deterministic summary (wall-clock excluded)."""
        return {"objective": self.objective, "n_steps": len(self.steps),
                "final_loss": self.loss[-1] if self.loss else None,
                "final_hash": self.final_hash, "eval": self.eval, **self.extra}


# ---------------------------------------------------------------------------
# primitives


def dpo_loss(logp_w_policy, logp_l_policy, logp_w_ref, logp_l_ref, beta: float):
    """``-log sigmoid(beta * (Δw - Δl))`` via softplus; tensors are averaged over the batch."""
    if not beta > 0:
        raise TrainError("beta must be positive")
    ts = [torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
          for x in (logp_w_policy, logp_l_policy, logp_w_ref, logp_l_ref)]
    if not all(bool(torch.isfinite(t).all()) for t in ts):
        raise TrainError("dpo_loss inputs must be finite")
    w, l, wr, lr_ = ts
    z = beta * ((w - wr) - (l - lr_))
    return F.softplus(-z).mean()


def implicit_margin(logp_w_policy, logp_l_policy, logp_w_ref, logp_l_ref, beta: float):
    return beta * ((logp_w_policy - logp_w_ref) - (logp_l_policy - logp_l_ref))


def warmup_steps(total_steps: int, warmup_frac: float) -> int:
    return int(round(warmup_frac * total_steps))


def schedule_lr(step: int, total_steps: int, cfg: OptimConfig) -> float:
    """Linear warmup from 0 to ``peak_lr``, then cosine decay to ``min_lr`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise TrainError(f"step {step} outside [0, {total_steps}]")
    we = warmup_steps(total_steps, cfg.warmup_frac)
    if step < we:
        return cfg.peak_lr * step / we
    if total_steps == we:
        return cfg.peak_lr
    frac = (step - we) / (total_steps - we)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


def _optimizer(live: ModelParams, cfg: OptimConfig) -> torch.optim.AdamW:
    decay = [t for n, t in live.tensors.items() if t.dim() >= 2]
    no_decay = [t for n, t in live.tensors.items() if t.dim() < 2]
    return torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay},
         {"params": no_decay, "weight_decay": 0.0}],
        lr=0.0, betas=(cfg.beta1, cfg.beta2), eps=1e-8,
    )


def _frozen(live: ModelParams) -> ModelParams:
    return ModelParams(live.config, {k: v.detach().clone() for k, v in live.tensors.items()})


def _step(live, opt, loss, lr, last_good):
    if not torch.isfinite(loss):
        err = DivergenceError(f"non-finite loss {float(loss)}")
        err.last_good = last_good
        raise err
    opt.zero_grad(set_to_none=True)
    loss.backward()
    gn = float(torch.sqrt(sum((t.grad.detach() ** 2).sum() for t in live.tensors.values()
                              if t.grad is not None)))
    if not math.isfinite(gn):
        err = DivergenceError("non-finite gradient")
        err.last_good = last_good
        raise err
    for g in opt.param_groups:
        g["lr"] = lr
    opt.step()
    return gn


def _batches(n: int, batch_size: int, epochs: int, seed: int) -> list[np.ndarray]:
    out = []
    for e in range(epochs):
        order = np.random.default_rng([seed, e]).permutation(n)
        out += [order[i:i + batch_size] for i in range(0, n, batch_size)]
    return out


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainConfig(OptimConfig):
    peak_lr: float = 2e-3
    min_lr: float = 2e-4
    warmup_frac: float = 0.02
    batch_size: int = 32
    max_steps: int = 3000
    seq_len: int = 64
    eval_every: int = 100
    n_eval: int = 500
    target_acc: float = 0.97
    patience: int = 3
    full_sequence_loss: bool = False
    induction_steps: int = 1200
    induction_mix: float = 0.25

    def __post_init__(self):
        super().__post_init__()
        if not 0 <= self.induction_mix <= 1:
            raise TrainError("induction_mix must lie in [0, 1]")
        if self.induction_steps < 0:
            raise TrainError("induction_steps must be >= 0")


def kv_recall_accuracy(params: ModelParams, corpus: Sequence[PretrainSequence]) -> float:
    """Exact-match rate over queries, scoring answer tokens under teacher forcing.

    With greedy decoding, the answer is reproduced exactly iff every answer
    token is the argmax given the correct prefix, so this equals the greedy
    exact-match rate.
    """
    toks = torch.tensor(corpus_tensor(corpus))
    with torch.no_grad():
        logits, _ = forward(params, toks, return_attn=False)
    pred = logits.argmax(-1).numpy()
    hits = total = 0
    for i, s in enumerate(corpus):
        for start, _, ans in s.queries:
            lo = start + 2
            ok = all(pred[i, lo + j - 1] == ans[j] for j in range(len(ans)))
            hits += ok
            total += 1
    return hits / total


def pretrain(params: ModelParams, vocab: TaskVocab, cfg: PretrainConfig,
             log: Callable[[str], None] | None = None) -> tuple[ModelParams, TrainReport]:
    """Next-token cross-entropy on a freshly generated kv-recall stream.

    Each step draws its own batch from the generator (seeded by step), so no
    corpus is materialised. The loss covers query/answer segments unless
    ``full_sequence_loss`` is set. Training stops early once held-out accuracy
    reaches ``target_acc`` and fails to improve for ``patience`` evaluations.
    """
    if cfg.seq_len > params.config.max_seq_len:
        raise TrainError("seq_len exceeds the model context")
    held = gen_pretrain_corpus(vocab, cfg.n_eval, cfg.seq_len, rng_seed=cfg.rng_seed * 7919 + 1_000_003)
    live = params_requiring_grad(params)
    opt = _optimizer(live, cfg)
    report = TrainReport("pretrain")
    t0 = time.perf_counter()
    last_good = _frozen(live)
    best, stale = -1.0, 0
    total = cfg.max_steps
    for step in range(total):
        toks, tmask = _pretrain_batch(vocab, cfg, step)
        loss = objective_loss(live, torch.tensor(toks), torch.tensor(tmask), "cross_entropy")
        lr = schedule_lr(step + 1, total, cfg)
        gn = _step(live, opt, loss, lr, last_good)
        report.record(step, float(loss.detach()), lr, gn, t0=t0)
        if (step + 1) % cfg.eval_every == 0 or step + 1 == total:
            last_good = _frozen(live)
            acc = kv_recall_accuracy(last_good, held)
            report.eval.append({"step": step + 1, "kv_recall_acc": acc})
            if log:
                log(f"pretrain step {step + 1} loss {float(loss.detach()):.4f} acc {acc:.3f}")
            if acc > best + 1e-9:
                best, stale = acc, 0
            else:
                stale += 1
            if best >= cfg.target_acc and stale >= cfg.patience:
                break
    out = _frozen(live)
    report.final_hash = params_hash(out)
    report.extra["heldout_kv_recall_acc"] = report.eval[-1]["kv_recall_acc"] if report.eval else None
    return out, report


def _pretrain_batch(vocab: TaskVocab, cfg: PretrainConfig, step: int) -> tuple[np.ndarray, np.ndarray]:
    # repeated-segment warm-up, then key-value recall with a fixed share of repeats
    seed = cfg.rng_seed * 1_000_003 + step
    n_rep = cfg.batch_size if step < cfg.induction_steps else int(round(cfg.batch_size * cfg.induction_mix))
    parts = []
    if n_rep < cfg.batch_size:
        batch = gen_pretrain_corpus(vocab, cfg.batch_size - n_rep, cfg.seq_len, rng_seed=seed)
        toks = corpus_tensor(batch)
        if cfg.full_sequence_loss:
            m = np.ones_like(toks, dtype=bool)
            m[:, 0] = False
        else:
            m = answer_mask(batch) | _query_key_mask(batch)
        parts.append((toks, m))
    if n_rep:
        parts.append(gen_repeat_batch(vocab, n_rep, cfg.seq_len, rng_seed=seed + 500_000_029))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _query_key_mask(batch: Sequence[PretrainSequence]) -> np.ndarray:
    # the queried key itself is also a prediction target (it follows QUERY)
    m = np.zeros((len(batch), len(batch[0].tokens)), dtype=bool)
    for i, s in enumerate(batch):
        for start, _, _ in s.queries:
            m[i, start + 1] = True
    return m


# ---------------------------------------------------------------------------
# preference optimisation


def _pairs(tuples, side: str):
    return [(t.instruction, getattr(t, side)) for t in tuples]


def reference_logprobs(reference: ModelParams, tuples, batch_size: int = 64) -> tuple[torch.Tensor, torch.Tensor]:
    """Summed response log-probabilities of chosen and rejected sides under the frozen reference."""
    w, l = [], []
    with torch.no_grad():
        for i in range(0, len(tuples), batch_size):
            chunk = tuples[i:i + batch_size]
            w.append(batch_sequence_logprobs(reference, _pairs(chunk, "chosen")))
            l.append(batch_sequence_logprobs(reference, _pairs(chunk, "rejected")))
    return torch.cat(w), torch.cat(l)


def mean_margin(policy: ModelParams, tuples, ref_w, ref_l, beta: float, batch_size: int = 64) -> float:
    pw, pl = reference_logprobs(policy, tuples, batch_size)
    return float(implicit_margin(pw, pl, ref_w, ref_l, beta).mean())


def dpo_train(target: ModelParams, reference: ModelParams, tuples, cfg: DpoConfig,
              max_steps: int | None = None,
              log: Callable[[str], None] | None = None) -> tuple[ModelParams, TrainReport]:
    """DPO against a frozen reference whose log-probabilities are computed once up front."""
    if len(tuples) == 0:
        raise TrainError("no preference tuples")
    ref_hash = params_hash(reference)
    ref_w, ref_l = reference_logprobs(reference, tuples, cfg.batch_size)
    batches = _batches(len(tuples), cfg.batch_size, cfg.epochs, cfg.rng_seed)
    if max_steps is not None:
        batches = batches[:max_steps]
    report = TrainReport("dpo")
    report.extra["margin_step0"] = mean_margin(target, tuples, ref_w, ref_l, cfg.beta, cfg.batch_size)
    if not batches:
        report.final_hash = params_hash(target)
        report.extra["margin_final"] = report.extra["margin_step0"]
        return target.clone(), report
    live = params_requiring_grad(target)
    opt = _optimizer(live, cfg)
    last_good = _frozen(live)
    t0 = time.perf_counter()
    total = len(batches)
    for step, idx in enumerate(batches):
        chunk = [tuples[i] for i in idx]
        pw = batch_sequence_logprobs(live, _pairs(chunk, "chosen"))
        pl = batch_sequence_logprobs(live, _pairs(chunk, "rejected"))
        rw, rl = ref_w[idx], ref_l[idx]
        loss = dpo_loss(pw, pl, rw, rl, cfg.beta)
        margin = float(implicit_margin(pw.detach(), pl.detach(), rw, rl, cfg.beta).mean())
        gn = _step(live, opt, loss, schedule_lr(step + 1, total, cfg), last_good)
        report.record(step, float(loss.detach()), schedule_lr(step + 1, total, cfg), gn, margin, t0)
        last_good = _frozen(live)
        if log and (step + 1) % 10 == 0:
            log(f"dpo step {step + 1}/{total} loss {float(loss.detach()):.4f} margin {margin:.4f}")
    out = _frozen(live)
    if params_hash(reference) != ref_hash:
        raise TrainError("reference parameters changed during training")
    report.final_hash = params_hash(out)
    report.extra["margin_final"] = mean_margin(out, tuples, ref_w, ref_l, cfg.beta, cfg.batch_size)
    report.extra["reference_hash"] = ref_hash
    return out, report


def sft_loss_on(params: ModelParams, pairs, batch_size: int = 64) -> float:
    """Mean per-token cross-entropy of responses given prompts."""
    tot = n = 0.0
    with torch.no_grad():
        for i in range(0, len(pairs), batch_size):
            chunk = pairs[i:i + batch_size]
            tot -= float(batch_sequence_logprobs(params, chunk).sum())
            n += sum(len(r) for _, r in chunk)
    return tot / n if n else 0.0


def sft_train(target: ModelParams, tuples, cfg: OptimConfig, max_steps: int | None = None,
              log: Callable[[str], None] | None = None) -> tuple[ModelParams, TrainReport]:
    """Cross-entropy on chosen responses only."""
    if len(tuples) == 0:
        raise TrainError("no training pairs")
    pairs = _pairs(tuples, "chosen")
    batches = _batches(len(pairs), cfg.batch_size, cfg.epochs, cfg.rng_seed)
    if max_steps is not None:
        batches = batches[:max_steps]
    report = TrainReport("sft")
    report.extra["loss_initial"] = sft_loss_on(target, pairs, cfg.batch_size)
    if not batches:
        report.final_hash = params_hash(target)
        report.extra["loss_final"] = report.extra["loss_initial"]
        return target.clone(), report
    live = params_requiring_grad(target)
    opt = _optimizer(live, cfg)
    last_good = _frozen(live)
    t0 = time.perf_counter()
    total = len(batches)
    for step, idx in enumerate(batches):
        toks, tmask = pack_pairs([pairs[i] for i in idx])
        loss = objective_loss(live, toks, tmask, "cross_entropy")
        lr = schedule_lr(step + 1, total, cfg)
        gn = _step(live, opt, loss, lr, last_good)
        report.record(step, float(loss.detach()), lr, gn, t0=t0)
        last_good = _frozen(live)
    out = _frozen(live)
    report.final_hash = params_hash(out)
    report.extra["loss_final"] = sft_loss_on(out, pairs, cfg.batch_size)
    return out, report


def config_dict(cfg) -> dict:
    return asdict(cfg)
