import json

import pytest

from conftest import randomize
from retmask.ablate import (
    AblateError,
    MaskStrategy,
    ablated_model,
    build_mask,
    load_mask,
    reconstruct,
    save_ablated,
    save_mask,
)
from retmask.checkpoint import load_checkpoint
from retmask.detect import RetrievalScoreTable
from retmask.model import HeadId, HeadMask, apply_head_mask


def _table(n_layers=2, n_heads=8, top=((1, 3), (0, 5))):
    scores = {HeadId(l, h): 0.01 * (l * n_heads + h) / (n_layers * n_heads)
              for l in range(n_layers) for h in range(n_heads)}
    for i, k in enumerate(top):
        scores[HeadId(*k)] = 0.9 - 0.1 * i
    t = RetrievalScoreTable(scores, 10, n_layers=n_layers, n_heads=n_heads)
    return t.with_selection(0.5)


def test_retrieval_strategy_returns_h_ret():
    t = _table()
    assert build_mask(MaskStrategy("retrieval", t)) == t.selected == HeadMask([(1, 3), (0, 5)])
    with pytest.raises(AblateError):
        build_mask(MaskStrategy("retrieval", t, size=3))


def test_non_retrieval_disjoint_and_same_size():
    t = _table()
    for seed in range(20):
        m = build_mask(MaskStrategy("non-retrieval", t, rng_seed=seed))
        assert not (m & t.selected) and len(m) == len(t.selected)


def test_random_strategy_seeding():
    t = _table()
    same = build_mask(MaskStrategy("random", t, rng_seed=1)) == build_mask(MaskStrategy("random", t, rng_seed=1))
    assert same
    distinct = sum(build_mask(MaskStrategy("random", t, rng_seed=2 * i)) !=
                   build_mask(MaskStrategy("random", t, rng_seed=2 * i + 1)) for i in range(100))
    assert distinct >= 95


def test_errors():
    t = _table()
    with pytest.raises(AblateError):
        MaskStrategy("everything", t)
    with pytest.raises(AblateError):
        build_mask(MaskStrategy("non-retrieval", t, size=15))


def test_sidecar_and_reconstruction(tmp_path, tiny):
    p = randomize(tiny, 0)
    t = _table(2, 4, ((1, 2), (0, 1)))
    s = MaskStrategy("retrieval", t)
    mask = build_mask(s)
    out, side = ablated_model(p, mask, s)
    assert side["heads"] == [[0, 1], [1, 2]] and side["h_ret"] == [[0, 1], [1, 2]]
    assert out.equal(apply_head_mask(p, mask))
    assert reconstruct(p, side).equal(out)
    with pytest.raises(AblateError):
        reconstruct(randomize(tiny, 1), side)
    save_ablated(p, mask, s, tmp_path / "abl.ckpt")
    assert load_checkpoint(tmp_path / "abl.ckpt").equal(out)
    assert json.loads((tmp_path / "abl.json").read_text())["heads"] == side["heads"]
    save_mask(tmp_path / "mask.json", mask, s)
    m2, rec = load_mask(tmp_path / "mask.json")
    assert m2 == mask and rec["strategy"] == "retrieval"
