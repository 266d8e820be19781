"""Contrastive preference pairs: chosen from the full model, rejected from a
degraded sampler (retrieval-masked model or one of the baselines)."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .checkpoint import params_hash
from .decode import DecodeConfig, decode
from .model import EMPTY_MASK, HeadMask, ModelParams
from .tasks import END, InstructionInstance, score_answer, strip_stop

SCHEMA_VERSION = 1
HEADER = f"# retmask preference pairs, schema_version={SCHEMA_VERSION}"
VARIANTS = ("retmask", "non-retrieval-mask", "random-mask", "smaller-model", "judged-pair")
FAILURE_REASONS = ("immediate_stop", "no_stop", "identical_pair")


class SynthError(ValueError):
    pass


class SynthAborted(SynthError):
    """Every generation failed; ``stats`` holds the drop counts."""

    def __init__(self, stats: "SynthStats"):
        super().__init__(f"every generation failed: {stats.to_json()}")
        self.stats = stats


class SchemaError(SynthError):
    pass


@dataclass
class PreferenceTuple:
    instruction: list[int]
    chosen: list[int]
    rejected: list[int]
    chosen_meta: dict
    rejected_meta: dict
    seed: int

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "instruction_tokens": self.instruction,
                "chosen_tokens": self.chosen, "rejected_tokens": self.rejected,
                "chosen_meta": self.chosen_meta, "rejected_meta": self.rejected_meta,
                "seed": self.seed}

    @classmethod
    def from_json(cls, d: dict) -> "PreferenceTuple":
        return cls(list(d["instruction_tokens"]), list(d["chosen_tokens"]), list(d["rejected_tokens"]),
                   d["chosen_meta"], d["rejected_meta"], int(d["seed"]))


@dataclass
class RejectedSampler:
    """Source of rejected responses.

    ``retmask``, ``non-retrieval-mask`` and ``random-mask`` decode the target
    model under ``mask``; ``smaller-model`` decodes ``params``, which must have
    fewer parameters than the target; ``judged-pair`` draws a second sample
    from the target and lets the exact-match oracle pick the loser.
    """

    variant: str
    mask: HeadMask = EMPTY_MASK
    params: ModelParams | None = None
    descriptor: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise SynthError(f"unknown rejected sampler {self.variant!r}")
        if self.variant == "smaller-model" and self.params is None:
            raise SynthError("smaller-model sampler needs a checkpoint")
        if self.variant != "smaller-model" and self.params is not None:
            raise SynthError("only the smaller-model sampler takes its own parameters")
        self.mask = HeadMask(self.mask)

    def describe(self) -> dict:
        d = {"variant": self.variant, "mask": self.mask.to_list()}
        if self.params is not None:
            d["model_hash"] = params_hash(self.params)
            d["n_params"] = self.params.n_params()
        d.update(self.descriptor)
        return d


@dataclass
class SynthStats:
    n_instructions: int = 0
    n_tuples: int = 0
    dropped: dict = field(default_factory=lambda: {r: 0 for r in FAILURE_REASONS})
    judged_ties: int = 0

    @property
    def n_dropped(self) -> int:
        return sum(self.dropped.values())

    def to_json(self) -> dict:
        return {"n_instructions": self.n_instructions, "n_tuples": self.n_tuples,
                "n_dropped": self.n_dropped, "dropped": dict(self.dropped),
                "judged_ties": self.judged_ties}


def derive_seed(seed: int, index: int, stream: str = "") -> int:
    h = hashlib.sha256(f"{seed}:{index}:{stream}".encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def failure_reason(output: Sequence[int], stop: int = END) -> str | None:
    if not output or output[0] == stop:
        return "immediate_stop"
    if stop not in output:
        return "no_stop"
    return None


def _with_seed(cfg: DecodeConfig, seed: int) -> DecodeConfig:
    return DecodeConfig(cfg.mode, cfg.temperature, cfg.max_new_tokens, cfg.stop_token, seed)


def judge_loser(inst, a: list[int], b: list[int]) -> tuple[int, bool]:
    """Index (0 or 1) of the rejected sample and whether the oracle tied.

    Exactly one incorrect -> that one loses. Otherwise the longer output loses
    (before the stop token); equal lengths reject the second sample.
    """
    ca, cb = score_answer(inst, a), score_answer(inst, b)
    if ca != cb:
        return (1 if ca else 0), False
    la, lb = len(strip_stop(a)), len(strip_stop(b))
    return (0 if la > lb else 1), True


def synthesize_pairs(target: ModelParams, sampler: RejectedSampler,
                     instructions: Sequence[InstructionInstance], cfg: DecodeConfig,
                     seed: int = 0, chosen_params: ModelParams | None = None,
                     ) -> tuple[list[PreferenceTuple], SynthStats]:
    """One tuple per instruction, failed generations dropped and counted.

    ``chosen_params`` (default: ``target``) generates the chosen side; a
    different checkpoint gives cross-model synthesis. Both sides share the
    per-instruction seed, except ``judged-pair`` which needs two independent
    samples.
    """
    if len(instructions) == 0:
        raise SynthError("no instructions")
    source = target if chosen_params is None else chosen_params
    if sampler.variant == "smaller-model":
        if sampler.params.n_params() >= source.n_params():
            raise SynthError("smaller-model sampler must have strictly fewer parameters")
        if sampler.params.config.vocab_size != source.config.vocab_size:
            raise SynthError("smaller-model checkpoint uses a different vocabulary")
    src_hash = params_hash(source)
    chosen_meta = {"variant": "full", "mask": [], "model_hash": src_hash,
                   "cross_model": chosen_params is not None, "decode": cfg.to_dict()}
    rejected_desc = sampler.describe()
    if sampler.variant in ("judged-pair",) or sampler.variant.endswith("mask"):
        rejected_desc["model_hash"] = src_hash
    rejected_desc["decode"] = cfg.to_dict()
    stats = SynthStats(n_instructions=len(instructions))
    tuples = []
    for i, inst in enumerate(instructions):
        s = derive_seed(seed, i)
        prompt = inst.prompt()
        y_a, _ = decode(source, prompt, _with_seed(cfg, s), EMPTY_MASK, trace=False)
        if sampler.variant == "judged-pair":
            y_b, _ = decode(source, prompt, _with_seed(cfg, derive_seed(seed, i, "second")),
                            EMPTY_MASK, trace=False)
        elif sampler.variant == "smaller-model":
            y_b, _ = decode(sampler.params, prompt, _with_seed(cfg, s), EMPTY_MASK, trace=False)
        else:
            y_b, _ = decode(source, prompt, _with_seed(cfg, s), sampler.mask, trace=False)
        reason = failure_reason(y_a, cfg.stop_token) or failure_reason(y_b, cfg.stop_token)
        if reason is not None:
            stats.dropped[reason] += 1
            continue
        chosen, rejected = y_a, y_b
        cm, rm = dict(chosen_meta), dict(rejected_desc)
        if sampler.variant == "judged-pair":
            if y_a == y_b:
                stats.dropped["identical_pair"] += 1
                continue
            loser, tie = judge_loser(inst, y_a, y_b)
            stats.judged_ties += tie
            if loser == 0:
                chosen, rejected = y_b, y_a
            rm["oracle_tie"] = tie
            cm["sample"], rm["sample"] = ("second", "first") if loser == 0 else ("first", "second")
        rm["instance_id"] = cm["instance_id"] = inst.instance_id
        tuples.append(PreferenceTuple(list(prompt), chosen, rejected, cm, rm, s))
    stats.n_tuples = len(tuples)
    if not tuples:
        raise SynthAborted(stats)
    return tuples, stats


def oracle_accuracy(tuples: Sequence[PreferenceTuple], instructions: Sequence[InstructionInstance],
                    side: str) -> float:
    by_id = {x.instance_id: x for x in instructions}
    hits = [score_answer(by_id[t.chosen_meta["instance_id"]], getattr(t, side)) for t in tuples]
    return sum(hits) / len(hits)


def export_pairs(tuples: Sequence[PreferenceTuple], path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(HEADER + "\n")
        for t in tuples:
            f.write(json.dumps(t.to_json(), sort_keys=True, separators=(",", ":")) + "\n")


def import_pairs(path) -> list[PreferenceTuple]:
    out = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise SchemaError(f"{path}:{n}: malformed JSON ({e.msg})") from e
            v = d.get("schema_version") if isinstance(d, dict) else None
            if v != SCHEMA_VERSION:
                raise SchemaError(f"{path}:{n}: schema_version {v!r}, expected {SCHEMA_VERSION}")
            try:
                out.append(PreferenceTuple.from_json(d))
            except (KeyError, TypeError, ValueError) as e:
                raise SchemaError(f"{path}:{n}: malformed record ({e})") from e
    return out
