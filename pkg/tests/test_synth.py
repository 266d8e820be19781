import pytest

from retmask.decode import DecodeConfig
from retmask.model import EMPTY_MASK, HeadMask, ModelConfig, init_params
from retmask.synth import (
    HEADER,
    PreferenceTuple,
    RejectedSampler,
    SchemaError,
    SynthAborted,
    SynthError,
    derive_seed,
    export_pairs,
    failure_reason,
    import_pairs,
    judge_loser,
    oracle_accuracy,
    synthesize_pairs,
)
from retmask.tasks import END, gen_instruction_set


def _tuple(i=0):
    return PreferenceTuple([1, 4, 20, 21, 2, 4], [20, 21, END], [22, END],
                           {"variant": "full", "instance_id": i}, {"variant": "retmask", "mask": [[1, 0]]}, 7 + i)


def test_roundtrip(tmp_path):
    ts = [_tuple(i) for i in range(3)]
    export_pairs(ts, tmp_path / "p.jsonl")
    assert import_pairs(tmp_path / "p.jsonl") == ts


def test_empty_file_has_header(tmp_path):
    export_pairs([], tmp_path / "e.jsonl")
    assert (tmp_path / "e.jsonl").read_text() == HEADER + "\n"
    assert import_pairs(tmp_path / "e.jsonl") == []


def test_unknown_schema_version(tmp_path):
    p = tmp_path / "p.jsonl"
    export_pairs([_tuple()], p)
    p.write_text(p.read_text().replace('"schema_version":1', '"schema_version":9'))
    with pytest.raises(SchemaError, match=r"9.*expected 1"):
        import_pairs(p)
    p.write_text(HEADER + "\n{not json\n")
    with pytest.raises(SchemaError, match=":2:"):
        import_pairs(p)


def test_failure_reasons():
    assert failure_reason([]) == "immediate_stop"
    assert failure_reason([END, 5]) == "immediate_stop"
    assert failure_reason([5, 6]) == "no_stop"
    assert failure_reason([5, END]) is None


def test_judge_loser(vocab):
    inst = gen_instruction_set(vocab, 1, 0)[0]
    good, bad = inst.reference + [END], [int(vocab.values[-1]), END]
    assert judge_loser(inst, good, bad) == (1, False)
    assert judge_loser(inst, bad, good) == (0, False)
    # both wrong: the longer output loses; equal lengths reject the second
    assert judge_loser(inst, [7, 7, 7, END], [7, END]) == (0, True)
    assert judge_loser(inst, [7, END], [8, END]) == (1, True)


def test_derive_seed_stable():
    assert derive_seed(1, 2) == derive_seed(1, 2)
    assert derive_seed(1, 2) != derive_seed(1, 3)
    assert derive_seed(1, 2, "second") != derive_seed(1, 2)


def test_sampler_validation():
    small = init_params(ModelConfig(n_layers=1, n_heads=2, d_model=16, d_mlp=32))
    with pytest.raises(SynthError):
        RejectedSampler("nonsense")
    with pytest.raises(SynthError):
        RejectedSampler("smaller-model")
    with pytest.raises(SynthError):
        RejectedSampler("retmask", params=small)


def test_empty_mask_greedy_gives_identical_sides(pretrained, vocab):
    params, _ = pretrained
    ins = gen_instruction_set(vocab, 40, 3)
    cfg = DecodeConfig("greedy", max_new_tokens=6, stop_token=END)
    tuples, stats = synthesize_pairs(params, RejectedSampler("retmask", EMPTY_MASK), ins, cfg)
    assert tuples and all(t.chosen == t.rejected for t in tuples)
    assert stats.n_tuples + stats.n_dropped == 40


def test_retmask_rejected_is_worse(pretrained, vocab):
    from retmask.detect import retrieval_scores, tau_for_fraction
    from retmask.tasks import gen_niah_set
    params, _ = pretrained
    table = retrieval_scores(params, gen_niah_set(vocab, 50, 6, 8, rng_seed=5, max_seq_len=64))
    table = table.with_selection(tau_for_fraction(table, 0.1))
    ins = gen_instruction_set(vocab, 200, 4)
    cfg = DecodeConfig("sample", 0.8, 6, END)
    tuples, stats = synthesize_pairs(params, RejectedSampler("retmask", table.selected), ins, cfg, seed=1)
    assert oracle_accuracy(tuples, ins, "rejected") < oracle_accuracy(tuples, ins, "chosen")
    assert all(t.rejected_meta["mask"] == table.selected.to_list() for t in tuples)


def test_judged_pair_and_smaller_model(pretrained, vocab):
    params, _ = pretrained
    ins = gen_instruction_set(vocab, 30, 6)
    cfg = DecodeConfig("sample", 1.0, 6, END)
    tuples, stats = synthesize_pairs(params, RejectedSampler("judged-pair"), ins, cfg, seed=2)
    for t in tuples:
        assert t.chosen != t.rejected
    small = init_params(ModelConfig(n_layers=1, n_heads=2, d_model=16, d_mlp=32))
    with pytest.raises(SynthError):
        synthesize_pairs(small, RejectedSampler("smaller-model", params=params), ins, cfg)


def test_all_failures_abort_with_stats(vocab):
    p = init_params(ModelConfig(n_layers=1, n_heads=2, d_model=16, d_mlp=32))
    ins = gen_instruction_set(vocab, 12, 0)
    with pytest.raises(SynthAborted) as e:
        synthesize_pairs(p, RejectedSampler("retmask", HeadMask([(0, 0)])), ins, DecodeConfig(max_new_tokens=1))
    st = e.value.stats
    assert st.n_tuples == 0 and sum(st.dropped.values()) == 12
