"""Synthetic corpora: key-value recall pretraining, needle-in-a-haystack sets,
and instruction prompts, all with exact-match scoring.

Token layout (default vocabulary of 64)::

    0 PAD | 1 BOS | 2 QUERY | 3 END | keys | values | filler

A *fact* is ``key v_1 .. v_m``. A query segment is ``QUERY key`` and its
answer is ``v_1 .. v_m END``. Every generator draws instance ``i`` from its
own RNG seeded with ``(seed, i)``, so sets are prefix-stable and order-free.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, QUERY, END = 0, 1, 2, 3
N_SPECIAL = 4


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskVocab:
    n_keys: int = 16
    n_values: int = 24
    n_filler: int = 20
    value_len: int = 2
    grammar_seed: int = 0
    grammar_p: float = 0.9

    def __post_init__(self):
        if min(self.n_keys, self.n_values, self.n_filler, self.value_len) <= 0:
            raise TaskError("vocab partitions and value_len must be positive")
        if self.value_len > self.n_values:
            raise TaskError("value_len exceeds the value inventory")

    @property
    def size(self) -> int:
        return N_SPECIAL + self.n_keys + self.n_values + self.n_filler

    @property
    def keys(self) -> np.ndarray:
        return np.arange(N_SPECIAL, N_SPECIAL + self.n_keys)

    @property
    def values(self) -> np.ndarray:
        s = N_SPECIAL + self.n_keys
        return np.arange(s, s + self.n_values)

    @property
    def filler(self) -> np.ndarray:
        s = N_SPECIAL + self.n_keys + self.n_values
        return np.arange(s, s + self.n_filler)

    @property
    def special(self) -> np.ndarray:
        return np.arange(N_SPECIAL)

    @property
    def fact_len(self) -> int:
        return 1 + self.value_len

    @property
    def answer_len(self) -> int:
        return self.value_len + 1

    @property
    def grammar(self) -> np.ndarray:
        """Fixed second-order transition table over filler indices."""
        return _grammar(self.n_filler, self.grammar_seed)

    def partitions(self) -> dict[str, np.ndarray]:
        return {"special": self.special, "keys": self.keys, "values": self.values, "filler": self.filler}

    def to_dict(self) -> dict:
        return {"n_keys": self.n_keys, "n_values": self.n_values, "n_filler": self.n_filler,
                "value_len": self.value_len, "grammar_seed": self.grammar_seed,
                "grammar_p": self.grammar_p}


def _rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(i)])


_GRAMMARS: dict = {}


def _grammar(n: int, seed: int) -> np.ndarray:
    if (n, seed) not in _GRAMMARS:
        _GRAMMARS[(n, seed)] = np.random.default_rng([seed, 7]).integers(0, n, size=(n, n))
        _GRAMMARS[(n, seed)].setflags(write=False)
    return _GRAMMARS[(n, seed)]


def filler_passage(vocab: TaskVocab, rng, length: int) -> list[int]:
    """Filler n-gram text: each token follows the previous two through a fixed
    table with probability ``grammar_p``, otherwise it is uniform."""
    if length <= 0:
        return []
    g = vocab.grammar
    idx = [int(x) for x in rng.integers(0, vocab.n_filler, size=min(2, length))]
    while len(idx) < length:
        if rng.random() < vocab.grammar_p:
            idx.append(int(g[idx[-2], idx[-1]]))
        else:
            idx.append(int(rng.integers(0, vocab.n_filler)))
    base = int(vocab.filler[0])
    return [base + i for i in idx]


def _sample_facts(vocab: TaskVocab, rng, n_facts: int) -> list[list[int]]:
    if n_facts > vocab.n_keys or n_facts * vocab.value_len > vocab.n_values:
        raise TaskError(f"vocab too small for {n_facts} distinct facts")
    keys = rng.choice(vocab.keys, size=n_facts, replace=False)
    vals = rng.choice(vocab.values, size=n_facts * vocab.value_len, replace=False)
    m = vocab.value_len
    return [[int(keys[i])] + [int(v) for v in vals[i * m:(i + 1) * m]] for i in range(n_facts)]


def _split(rng, total: int, parts: int) -> list[int]:
    """Uniform random composition of ``total`` into ``parts`` non-negative integers."""
    if parts == 1:
        return [total]
    cuts = np.sort(rng.integers(0, total + 1, size=parts - 1))
    edges = np.concatenate(([0], cuts, [total]))
    return [int(x) for x in np.diff(edges)]


# ---------------------------------------------------------------------------
# pretraining corpus


@dataclass
class PretrainSequence:
    tokens: list[int]
    # (start index of the QUERY token, key, answer tokens) per query
    queries: list[tuple[int, int, list[int]]]
    bindings: dict[int, list[int]]

    def target_mask(self) -> list[bool]:
        return [True] * len(self.tokens)

    def to_json(self) -> dict:
        return {"tokens": self.tokens, "queries": [[s, k, a] for s, k, a in self.queries],
                "bindings": {str(k): v for k, v in self.bindings.items()}}


def gen_pretrain_sequence(vocab: TaskVocab, seq_len: int, rng, max_facts: int = 8,
                          max_queries: int = 3) -> PretrainSequence:
    fl, ql = vocab.fact_len, 2 + vocab.answer_len
    budget = seq_len - 1
    hi = min(max_facts, vocab.n_keys, vocab.n_values // vocab.value_len, (budget - ql) // fl)
    if hi < 1:
        raise TaskError(f"seq_len {seq_len} too short for one fact and one query")
    n_facts = int(rng.integers(1, hi + 1))
    q_hi = min(max_queries, n_facts, (budget - n_facts * fl) // ql)
    n_queries = int(rng.integers(1, q_hi + 1))
    facts = _sample_facts(vocab, rng, n_facts)
    n_fill = budget - n_facts * fl - n_queries * ql
    gaps = _split(rng, n_fill, n_facts + 1)
    toks = [BOS]
    for i, fact in enumerate(facts):
        toks += filler_passage(vocab, rng, gaps[i])
        toks += fact
    toks += filler_passage(vocab, rng, gaps[-1])
    queried = rng.choice(n_facts, size=n_queries, replace=False)
    queries = []
    for qi in queried:
        key, ans = facts[qi][0], facts[qi][1:] + [END]
        queries.append((len(toks), key, ans))
        toks += [QUERY, key] + ans
    assert len(toks) == seq_len
    return PretrainSequence(toks, queries, {f[0]: f[1:] for f in facts})


def gen_pretrain_corpus(vocab: TaskVocab, n_sequences: int, seq_len: int, rng_seed: int,
                        max_facts: int = 8, max_queries: int = 3) -> list[PretrainSequence]:
    """Key-value association lists with filler, followed by query/answer segments."""
    return [gen_pretrain_sequence(vocab, seq_len, _rng(rng_seed, i), max_facts, max_queries)
            for i in range(n_sequences)]


def corpus_tensor(corpus: Sequence[PretrainSequence]) -> np.ndarray:
    return np.array([s.tokens for s in corpus], dtype=np.int64)


def gen_repeat_batch(vocab: TaskVocab, n_sequences: int, seq_len: int, rng_seed: int,
                     min_segment: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Random token segments that recur later at a random offset.

    Returns ``(tokens, target_mask)``; the mask covers the second occurrence
    minus its first token, i.e. every position an induction head can predict.
    Used as a warm-up curriculum: it makes the copy circuit form in a few
    hundred steps, after which key-value recall is learned quickly.
    """
    body = seq_len - 1
    if body < 2 * min_segment:
        raise TaskError(f"seq_len {seq_len} too short for a repeated segment")
    toks = np.zeros((n_sequences, seq_len), dtype=np.int64)
    mask = np.zeros((n_sequences, seq_len), dtype=bool)
    for i in range(n_sequences):
        rng = _rng(rng_seed, i)
        k = int(rng.integers(min_segment, body // 2 + 1))
        seg = rng.integers(N_SPECIAL, vocab.size, size=k)
        gap = int(rng.integers(0, body - 2 * k + 1))
        pre = int(rng.integers(0, body - 2 * k - gap + 1))
        noise = rng.integers(N_SPECIAL, vocab.size, size=body - 2 * k)
        toks[i] = np.concatenate(([BOS], noise[:pre], seg, noise[pre:pre + gap], seg, noise[pre + gap:]))
        second = 1 + pre + k + gap
        mask[i, second + 1:second + k] = True
    return toks, mask


def answer_mask(corpus: Sequence[PretrainSequence]) -> np.ndarray:
    """Boolean mask over answer tokens (values and END) of every query."""
    m = np.zeros((len(corpus), len(corpus[0].tokens)), dtype=bool)
    for i, s in enumerate(corpus):
        for start, _, ans in s.queries:
            m[i, start + 2:start + 2 + len(ans)] = True
    return m


# ---------------------------------------------------------------------------
# needle in a haystack


@dataclass
class NeedleInstance:
    question: list[int]
    needle: list[int]
    haystack: list[int]
    needle_indices: list[int]
    answer: list[int]
    slot: int = 0
    instance_id: int = 0

    def prompt(self) -> list[int]:
        """Decode prompt: ``BOS x' q``."""
        return [BOS] + self.haystack + self.question

    @property
    def prompt_offset(self) -> int:
        return 1

    def needle_positions(self) -> list[int]:
        """``I_k`` in prompt coordinates."""
        return [i + self.prompt_offset for i in self.needle_indices]

    @property
    def reference(self) -> list[int]:
        return self.answer

    def to_json(self) -> dict:
        return {"id": self.instance_id, "question": self.question, "needle": self.needle,
                "haystack": self.haystack, "needle_indices": self.needle_indices,
                "answer": self.answer, "slot": self.slot}

    @classmethod
    def from_json(cls, d: dict) -> "NeedleInstance":
        return cls(d["question"], d["needle"], d["haystack"], d["needle_indices"], d["answer"],
                   d.get("slot", 0), d.get("id", 0))


def niah_prompt_len(n_passages: int, passage_len: int, vocab: TaskVocab) -> int:
    return 1 + n_passages * passage_len + vocab.fact_len + 2


def gen_niah_instance(vocab: TaskVocab, n_passages: int, passage_len: int, rng,
                      instance_id: int = 0) -> NeedleInstance:
    fact = _sample_facts(vocab, rng, 1)[0]
    passages = [filler_passage(vocab, rng, passage_len) for _ in range(n_passages)]
    slot = int(rng.integers(0, n_passages + 1))
    hay: list[int] = []
    for p in passages[:slot]:
        hay += p
    start = len(hay)
    hay += fact
    for p in passages[slot:]:
        hay += p
    idx = list(range(start, start + len(fact)))
    return NeedleInstance([QUERY, fact[0]], fact, hay, idx, fact[1:], slot, instance_id)


def gen_niah_set(vocab: TaskVocab, n_instances: int, n_passages: int, passage_len: int,
                 rng_seed: int, max_seq_len: int | None = None) -> list[NeedleInstance]:
    """Needle facts inserted at a uniformly chosen passage boundary of filler text."""
    if n_passages < 0 or passage_len < 0:
        raise TaskError("negative haystack geometry")
    if max_seq_len is not None:
        need = niah_prompt_len(n_passages, passage_len, vocab) + vocab.answer_len
        if need > max_seq_len:
            raise TaskError(f"haystack geometry needs {need} tokens, context is {max_seq_len}")
    return [gen_niah_instance(vocab, n_passages, passage_len, _rng(rng_seed, i), i)
            for i in range(n_instances)]


# ---------------------------------------------------------------------------
# instructions


@dataclass
class InstructionInstance:
    instruction: list[int]
    reference: list[int]
    fact_span: tuple[int, int]
    n_facts: int
    instance_id: int = 0

    def prompt(self) -> list[int]:
        return list(self.instruction)

    def to_json(self) -> dict:
        return {"id": self.instance_id, "instruction": self.instruction, "reference": self.reference,
                "fact_span": list(self.fact_span), "n_facts": self.n_facts}

    @classmethod
    def from_json(cls, d: dict) -> "InstructionInstance":
        return cls(d["instruction"], d["reference"], tuple(d["fact_span"]), d["n_facts"], d.get("id", 0))


def gen_instruction(vocab: TaskVocab, rng, min_facts: int = 2, max_facts: int = 8,
                    max_gap: int = 4, instance_id: int = 0) -> InstructionInstance:
    n_facts = int(rng.integers(min_facts, max_facts + 1))
    facts = _sample_facts(vocab, rng, n_facts)
    toks = [BOS]
    start = len(toks)
    for fact in facts:
        toks += filler_passage(vocab, rng, int(rng.integers(0, max_gap + 1)))
        toks += fact
    end = len(toks)
    target = facts[int(rng.integers(0, n_facts))]
    toks += [QUERY, target[0]]
    return InstructionInstance(toks, target[1:], (start, end), n_facts, instance_id)


def gen_instruction_set(vocab: TaskVocab, n: int, rng_seed: int, min_facts: int = 2,
                        max_facts: int = 8, max_gap: int = 4) -> list[InstructionInstance]:
    """Prompts with 2-8 facts and one query; the reference answer is never trained on."""
    if not 1 <= min_facts <= max_facts:
        raise TaskError("need 1 <= min_facts <= max_facts")
    return [gen_instruction(vocab, _rng(rng_seed, i), min_facts, max_facts, max_gap, i)
            for i in range(n)]


def instruction_max_len(vocab: TaskVocab, max_facts: int = 8, max_gap: int = 4) -> int:
    return 1 + max_facts * (vocab.fact_len + max_gap) + 2


# ---------------------------------------------------------------------------
# scoring


def strip_stop(output: Sequence[int], stop: int = END) -> list[int]:
    out = []
    for t in output:
        if t == stop:
            break
        out.append(int(t))
    return out


def contains(seq: Sequence[int], sub: Sequence[int]) -> bool:
    n, m = len(seq), len(sub)
    if m == 0:
        return False
    return any(list(seq[i:i + m]) == list(sub) for i in range(n - m + 1))


def score_answer(instance, output: Sequence[int]) -> bool:
    """True iff the reference answer occurs contiguously in the output before the stop token."""
    return contains(strip_stop(output), instance.reference)


# ---------------------------------------------------------------------------
# JSONL


def write_jsonl(path, records: Iterable[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip() and not line.startswith("#")]


def save_niah_set(path, instances: Sequence[NeedleInstance]):
    write_jsonl(path, (x.to_json() for x in instances))


def load_niah_set(path) -> list[NeedleInstance]:
    return [NeedleInstance.from_json(d) for d in read_jsonl(path)]


def save_instructions(path, instances: Sequence[InstructionInstance]):
    write_jsonl(path, (x.to_json() for x in instances))


def load_instructions(path) -> list[InstructionInstance]:
    return [InstructionInstance.from_json(d) for d in read_jsonl(path)]
