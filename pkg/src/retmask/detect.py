"""Retrieval-head detection from decode traces.

A head copy-pastes at step ``t`` when its (lowest-index) attention argmax ``j``
satisfies ``context[j] == y_t``. Hits whose ``j`` lies on the needle count
towards the head's retrieval score; hits are deduplicated by position.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decode import AttentionTrace, DecodeConfig, decode, first_argmax, full_attention
from .model import HeadId, HeadMask, ModelError, ModelParams, all_head_ids
from .tasks import END, NeedleInstance

TAU_PRESETS = {"llama": 0.1, "qwen": 0.05}


class DetectError(ValueError):
    pass


@dataclass
class CopyPasteLog:
    copied: dict[HeadId, set[int]] = field(default_factory=dict)
    needle_hits: dict[HeadId, set[int]] = field(default_factory=dict)

    def fraction(self, head: HeadId, needle_len: int) -> float:
        return len(self.needle_hits.get(head, ())) / needle_len


def copy_paste_events(trace: AttentionTrace, generated: Sequence[int], instance: NeedleInstance,
                      n_layers: int | None = None, n_heads: int | None = None) -> CopyPasteLog:
    """Copy-paste log from a streamed trace (attention recorded during decoding)."""
    generated = [int(t) for t in generated]
    if len(trace.attn) != len(generated) or list(trace.tokens) != generated:
        raise DetectError(f"trace has {len(trace.attn)} steps but {len(generated)} tokens were generated")
    context = instance.prompt() + generated
    needle = set(instance.needle_positions())
    L, H = (trace.attn[0].shape[:2] if trace.attn else (n_layers or 0, n_heads or 0))
    log = CopyPasteLog({HeadId(l, h): set() for l in range(L) for h in range(H)},
                       {HeadId(l, h): set() for l in range(L) for h in range(H)})
    for t, y in enumerate(generated):
        arg = trace.argmax[t]
        n_ctx = trace.prompt_len + t
        for l in range(L):
            for h in range(H):
                j = int(arg[l, h])
                if not 0 <= j < n_ctx:
                    raise DetectError(f"argmax {j} outside attendable context at step {t}")
                if context[j] == y:
                    hid = HeadId(l, h)
                    log.copied[hid].add(j)
                    if j in needle:
                        log.needle_hits[hid].add(j)
    return log


def copy_paste_events_bruteforce(attention: np.ndarray, prompt_len: int, generated: Sequence[int],
                                 instance: NeedleInstance) -> CopyPasteLog:
    """Reference recomputation from the full ``(L, H, T, T)`` attention of ``prompt + generated``.

    The query row for generation step ``t`` is position ``prompt_len + t - 1``;
    everything after it is causally masked and excluded before the argmax.
    """
    context = instance.prompt() + [int(t) for t in generated]
    needle = set(instance.needle_positions())
    L, H = attention.shape[:2]
    log = CopyPasteLog({HeadId(l, h): set() for l in range(L) for h in range(H)},
                       {HeadId(l, h): set() for l in range(L) for h in range(H)})
    for t, y in enumerate(generated):
        row = prompt_len + t - 1
        for l in range(L):
            for h in range(H):
                a = attention[l, h, row, :row + 1]
                best = 0
                for j in range(1, len(a)):
                    if a[j] > a[best]:
                        best = j
                if context[best] == y:
                    log.copied[HeadId(l, h)].add(best)
                    if best in needle:
                        log.needle_hits[HeadId(l, h)].add(best)
    return log


@dataclass
class RetrievalScoreTable:
    scores: dict[HeadId, float]
    n_tests: int
    tau: float | None = None
    selected: HeadMask = field(default_factory=HeadMask)
    n_layers: int = 0
    n_heads: int = 0
    meta: dict = field(default_factory=dict)

    def heads(self) -> list[HeadId]:
        return sorted(self.scores)

    def vector(self) -> np.ndarray:
        return np.array([self.scores[h] for h in self.heads()])

    def ranked(self) -> list[tuple[HeadId, float]]:
        """Heads by descending score, ties by (layer, head)."""
        return sorted(self.scores.items(), key=lambda kv: (-kv[1], kv[0]))

    def with_selection(self, tau: float) -> "RetrievalScoreTable":
        return RetrievalScoreTable(self.scores, self.n_tests, tau, select_heads(self, tau),
                                   self.n_layers, self.n_heads, dict(self.meta))

    def save(self, csv_path, json_path=None):
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["layer", "head", "score"])
            for h in self.heads():
                w.writerow([h.layer, h.head, repr(float(self.scores[h]))])
        side = {"tau": self.tau, "n_tests": self.n_tests, "n_layers": self.n_layers,
                "n_heads": self.n_heads, "selected": self.selected.to_list(), **self.meta}
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        json_path.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, csv_path, json_path=None) -> "RetrievalScoreTable":
        csv_path = Path(csv_path)
        with open(csv_path) as f:
            rows = list(csv.DictReader(f))
        scores = {HeadId(int(r["layer"]), int(r["head"])): float(r["score"]) for r in rows}
        json_path = Path(json_path) if json_path else csv_path.with_suffix(".json")
        side = json.loads(json_path.read_text())
        meta = {k: v for k, v in side.items()
                if k not in ("tau", "n_tests", "n_layers", "n_heads", "selected")}
        return cls(scores, side["n_tests"], side["tau"], HeadMask(side["selected"]),
                   side["n_layers"], side["n_heads"], meta)


def scores_from_fractions(fractions: dict[HeadId, Sequence[float]]) -> dict[HeadId, float]:
    out = {}
    for h, fr in fractions.items():
        total = 0.0
        for x in fr:  # fixed fold order
            total += x
        out[h] = total / len(fr)
    return out


def detection_config(max_new_tokens: int, stop_token: int = END) -> DecodeConfig:
    return DecodeConfig(mode="greedy", max_new_tokens=max_new_tokens, stop_token=stop_token)


def retrieval_scores(params: ModelParams, tests: Sequence[NeedleInstance],
                     cfg: DecodeConfig | None = None) -> RetrievalScoreTable:
    """Mean over tests of ``|g_h ∩ I_k| / |k|`` for every head, from greedy decodes of the full model."""
    if len(tests) == 0:
        raise DetectError("empty test set")
    mc = params.config
    if cfg is None:
        cfg = detection_config(max_new_tokens=len(tests[0].answer) + 1)
    if cfg.mode != "greedy":
        raise DetectError("detection uses greedy decoding")
    heads = all_head_ids(mc)
    fractions: dict[HeadId, list[float]] = {h: [] for h in heads}
    for inst in tests:
        try:
            out, tr = decode(params, inst.prompt(), cfg)
        except ModelError as e:
            raise DetectError(f"instance {inst.instance_id}: {e}") from e
        log = copy_paste_events(tr, out, inst, mc.n_layers, mc.n_heads)
        for h in heads:
            fractions[h].append(log.fraction(h, len(inst.needle)))
    return RetrievalScoreTable(scores_from_fractions(fractions), len(tests),
                               n_layers=mc.n_layers, n_heads=mc.n_heads)


def select_heads(table: RetrievalScoreTable, tau: float) -> HeadMask:
    """Heads with score >= tau."""
    if not 0 < tau <= 1:
        raise DetectError(f"tau must lie in (0, 1], got {tau}")
    return HeadMask(h for h, s in table.scores.items() if s >= tau)


def tau_for_fraction(table: RetrievalScoreTable, fraction: float = 0.1) -> float:
    """Threshold that keeps the top ``round(fraction * n)`` heads (at least one).

    Returns the score of the last kept head, so ties at that score are kept too.
    """
    ranked = table.ranked()
    k = max(1, int(round(fraction * len(ranked))))
    tau = ranked[k - 1][1]
    if tau <= 0:
        positive = [s for _, s in ranked if s > 0]
        if not positive:
            raise DetectError("no head has a positive retrieval score")
        tau = min(positive)
    return float(tau)


def test_set_hash(tests: Sequence[NeedleInstance]) -> str:
    h = hashlib.sha256()
    for t in tests:
        h.update(json.dumps(t.to_json(), sort_keys=True).encode())
    return h.hexdigest()[:16]


def streaming_matches_bruteforce(params: ModelParams, inst: NeedleInstance,
                                 cfg: DecodeConfig) -> bool:
    out, tr = decode(params, inst.prompt(), cfg)
    streamed = copy_paste_events(tr, out, inst)
    prompt = inst.prompt()
    # recompute attention over the sequence the last decode step actually saw
    full = full_attention(params, prompt + out[:-1]) if len(out) > 1 else full_attention(params, prompt)
    brute = copy_paste_events_bruteforce(full, len(prompt), out, inst)
    return streamed.copied == brute.copied and streamed.needle_hits == brute.needle_hits
