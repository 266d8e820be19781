import math

import numpy as np
import pytest
import torch

from conftest import randomize
from retmask.model import (
    EMPTY_MASK,
    HeadId,
    HeadMask,
    ModelConfig,
    ModelError,
    apply_head_mask,
    expected_shapes,
    forward,
    init_params,
    loss_and_grads,
    sequence_logprob,
)


def test_config_validation():
    with pytest.raises(ModelError):
        ModelConfig(d_model=30, n_heads=4)
    with pytest.raises(ModelError):
        ModelConfig(positional="alibi")
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.d_head * cfg.n_heads == cfg.d_model


def test_shapes_and_wo_blocks(tiny):
    shapes = expected_shapes(tiny.config)
    assert {k: tuple(v.shape) for k, v in tiny.tensors.items()} == shapes
    assert shapes["blocks.0.attn.W_O"] == (32, 32)


def test_single_token_attention_is_point_mass(tiny):
    logits, attn = forward(tiny, [5])
    assert logits.shape == (1, 64)
    for a in attn:
        assert torch.equal(a, torch.ones(4, 1, 1))


def test_causality_and_normalisation(tiny):
    p = randomize(tiny, 1)
    toks = torch.randint(4, 64, (3, 20), generator=torch.Generator().manual_seed(0))
    _, attn = forward(p, toks)
    for a in attn:
        upper = torch.ones(20, 20, dtype=torch.bool).triu(1)
        assert float(a[..., upper].abs().max()) == 0.0
        assert float((a.sum(-1) - 1).abs().max()) < 1e-6


def test_runtime_mask_equals_weight_edit_seed7():
    cfg = ModelConfig(vocab_size=64, n_layers=2, n_heads=4, d_model=32, d_mlp=64, rng_seed=7)
    p = randomize(init_params(cfg), 7)
    toks = torch.randint(0, 64, (16,), generator=torch.Generator().manual_seed(7))
    m = HeadMask([(1, 2)])
    a, _ = forward(p, toks, m)
    b, _ = forward(apply_head_mask(p, m), toks, EMPTY_MASK)
    assert torch.equal(a, b)


def test_full_mask_is_mlp_only_path(tiny):
    p = randomize(tiny, 2)
    toks = torch.arange(4, 20)
    a, _ = forward(p, toks, HeadMask.all_heads(p.config))
    zeroed = p.clone()
    for l in range(p.config.n_layers):
        zeroed.tensors[f"blocks.{l}.attn.W_O"].zero_()
    b, _ = forward(zeroed, toks)
    assert torch.equal(a, b)


def test_apply_head_mask_locality_and_idempotence(tiny):
    p = randomize(tiny, 3)
    assert apply_head_mask(p, EMPTY_MASK).equal(p)
    m = HeadMask([HeadId(0, 1)])
    q = apply_head_mask(p, m)
    for k in p.names():
        if k != "blocks.0.attn.W_O":
            assert torch.equal(p[k], q[k])
    changed = (p["blocks.0.attn.W_O"] != q["blocks.0.attn.W_O"]).sum()
    dh, d = p.config.d_head, p.config.d_model
    assert int(changed) == dh * d
    assert int((q["blocks.0.attn.W_O"][:, dh:2 * dh] == 0).sum()) == dh * d
    assert apply_head_mask(q, m).equal(q)
    with pytest.raises(ModelError):
        apply_head_mask(p, HeadMask([(2, 0)]))


def test_uniform_logits_give_log_vocab(tiny):
    p = tiny.clone()
    p.tensors["unembed"].zero_()
    toks = torch.randint(0, 64, (2, 10), generator=torch.Generator().manual_seed(0))
    loss, _ = loss_and_grads(p, toks, torch.ones_like(toks, dtype=torch.bool))
    assert loss == pytest.approx(math.log(64), rel=1e-6)


def test_empty_target_gives_zero_loss_and_grads(tiny):
    toks = torch.arange(4, 14)[None]
    loss, grads = loss_and_grads(tiny, toks, torch.zeros_like(toks, dtype=torch.bool))
    assert loss == 0.0
    assert all(float(g.abs().max()) == 0.0 for g in grads.values())


@pytest.mark.parametrize("objective", ["cross_entropy", "sequence_logprob"])
@pytest.mark.parametrize("positional", ["rotary", "learned"])
def test_finite_difference_gradients(objective, positional):
    cfg = ModelConfig(vocab_size=24, n_layers=2, n_heads=2, d_model=8, d_mlp=16, max_seq_len=8,
                      positional=positional, rng_seed=3)
    p = randomize(init_params(cfg), 4, 0.5).to(torch.float64)
    toks = torch.randint(0, 24, (2, 7), generator=torch.Generator().manual_seed(1))
    tm = torch.ones_like(toks, dtype=torch.bool)
    mask = HeadMask([(0, 1)])
    _, grads = loss_and_grads(p, toks, tm, objective, mask)
    rng = np.random.default_rng(0)
    names = p.names()
    checked = 0
    eps = 1e-5
    # every tensor class at least once, then random entries up to 120 checks
    picks = [(n, int(rng.integers(p[n].numel()))) for n in names]
    while len(picks) < 120:
        n = names[int(rng.integers(len(names)))]
        picks.append((n, int(rng.integers(p[n].numel()))))
    for name, idx in picks:
        plus, minus = p.clone(), p.clone()
        plus.tensors[name].view(-1)[idx] += eps
        minus.tensors[name].view(-1)[idx] -= eps
        lp, _ = loss_and_grads(plus, toks, tm, objective, mask)
        lm, _ = loss_and_grads(minus, toks, tm, objective, mask)
        fd = (lp - lm) / (2 * eps)
        an = float(grads[name].reshape(-1)[idx])
        denom = max(abs(fd), abs(an))
        if max(abs(fd), abs(an)) < 1e-8:
            assert abs(fd - an) < 1e-9
        else:
            assert abs(fd - an) / denom <= 1e-4, (name, idx, fd, an)
        checked += 1
    assert checked >= 100


def test_sequence_logprob_single_token(tiny):
    prompt, resp = [1, 5, 6], [9]
    logits, _ = forward(tiny, prompt)
    p = torch.softmax(logits[-1].double(), -1)[9]
    assert sequence_logprob(tiny, prompt, resp) == pytest.approx(math.log(float(p)), abs=1e-5)
    assert sequence_logprob(tiny, prompt, resp) == sequence_logprob(tiny, prompt, resp)


def test_sequence_logprob_mask_paths_agree(tiny):
    p = randomize(tiny, 5)
    m = HeadMask([(0, 0), (1, 3)])
    a = sequence_logprob(p, [1, 7, 8, 9], [10, 11, 3], m)
    b = sequence_logprob(apply_head_mask(p, m), [1, 7, 8, 9], [10, 11, 3])
    assert a == b


def test_context_overflow(tiny):
    with pytest.raises(ModelError):
        forward(tiny, list(range(4, 64)) + [4] * 10)
    with pytest.raises(ModelError):
        sequence_logprob(tiny, [1] * 60, [4] * 10)


def test_determinism(tiny_cfg):
    a, b = init_params(tiny_cfg), init_params(tiny_cfg)
    assert a.equal(b)
    toks = torch.arange(4, 30)
    assert torch.equal(forward(a, toks)[0], forward(b, toks)[0])
