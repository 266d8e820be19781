import numpy as np
import pytest
import torch

from conftest import randomize
from retmask.decode import DecodeConfig, decode, decode_many, first_argmax, full_attention
from retmask.model import HeadMask, ModelError


def test_greedy_picks_strict_maximum(tiny):
    p = tiny.clone()
    p.tensors["unembed"].zero_()
    # layer-normed features sum to 0, so with bias 1 the row of ones scores d_model
    p.tensors["ln_f.b"].fill_(1.0)
    p.tensors["unembed"][5] = 1.0
    out, _ = decode(p, [1, 9, 10], DecodeConfig(max_new_tokens=1))
    assert out == [5]


def test_argmax_ties_go_low():
    a = np.array([[0.25, 0.5, 0.5, 0.25], [1.0, 1.0, 0.0, 0.0]])
    assert first_argmax(a).tolist() == [1, 0]


def test_stop_token_ends_and_is_kept(tiny):
    p = tiny.clone()
    p.tensors["unembed"].zero_()
    p.tensors["ln_f.b"].fill_(1.0)
    p.tensors["unembed"][3] = 1.0
    out, tr = decode(p, [1, 4], DecodeConfig(max_new_tokens=5, stop_token=3))
    assert out == [3]
    assert len(tr) == 1


def test_trace_shapes_and_consistency(tiny):
    p = randomize(tiny, 0)
    prompt = [1] + list(range(10, 30))
    out, tr = decode(p, prompt, DecodeConfig(max_new_tokens=4))
    assert len(tr.attn) == len(out) == 4
    for t, a in enumerate(tr.attn):
        assert a.shape == (2, 4, len(prompt) + t)
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-6)
    # the last step's rows equal the full-sequence attention matrices
    full = full_attention(p, prompt + out[:-1])
    for t in range(4):
        np.testing.assert_array_equal(tr.attn[t], full[:, :, len(prompt) + t - 1, :len(prompt) + t])


def test_sampling_is_seeded(tiny):
    p = randomize(tiny, 1)
    cfg = DecodeConfig("sample", 1.0, 6, None, 123)
    a = decode(p, [1, 5, 6], cfg)
    b = decode(p, [1, 5, 6], cfg)
    assert a[0] == b[0]
    assert all(np.array_equal(x, y) for x, y in zip(a[1].attn, b[1].attn))
    outs = {tuple(decode(p, [1, 5, 6], DecodeConfig("sample", 1.0, 6, None, s))[0]) for s in range(10)}
    assert len(outs) > 1


def test_decode_many_per_prompt_seeds(tiny):
    p = randomize(tiny, 2)
    cfg = DecodeConfig("sample", 1.0, 4)
    res = decode_many(p, [[1, 4], [1, 5]], cfg, seeds=[7, 8])
    assert res[1][0] == decode(p, [1, 5], DecodeConfig("sample", 1.0, 4, None, 8), trace=False)[0]


def test_masked_decode_matches_weight_edit(tiny):
    from retmask.model import apply_head_mask
    p = randomize(tiny, 3)
    m = HeadMask([(1, 0)])
    a = decode(p, [1, 7, 8, 9], DecodeConfig(max_new_tokens=5), m)
    b = decode(apply_head_mask(p, m), [1, 7, 8, 9], DecodeConfig(max_new_tokens=5))
    assert a[0] == b[0]
    assert all(np.array_equal(x, y) for x, y in zip(a[1].attn, b[1].attn))


def test_errors(tiny):
    with pytest.raises(ModelError):
        decode(tiny, [1] * 62, DecodeConfig(max_new_tokens=3))
    with pytest.raises(ModelError):
        DecodeConfig("beam")
    with pytest.raises(ModelError):
        DecodeConfig("sample", temperature=0.0)
    with pytest.raises(ModelError):
        decode(tiny, [], DecodeConfig())
