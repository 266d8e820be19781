"""Ablated variants: the retrieval-head mask and its two control masks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import params_hash, save_checkpoint
from .detect import RetrievalScoreTable
from .model import HeadId, HeadMask, ModelParams, all_head_ids, apply_head_mask

STRATEGIES = ("retrieval", "non-retrieval", "random")


class AblateError(ValueError):
    pass


@dataclass
class MaskStrategy:
    tag: str
    table: RetrievalScoreTable
    size: int | None = None
    rng_seed: int = 0

    def __post_init__(self):
        if self.tag not in STRATEGIES:
            raise AblateError(f"unknown mask strategy {self.tag!r}")

    @property
    def mask_size(self) -> int:
        return len(self.table.selected) if self.size is None else self.size


def _heads(table: RetrievalScoreTable) -> list[HeadId]:
    if table.n_layers and table.n_heads:
        return [HeadId(l, h) for l in range(table.n_layers) for h in range(table.n_heads)]
    return sorted(table.scores)


def build_mask(strategy: MaskStrategy) -> HeadMask:
    """Retrieval: ``H_ret`` itself. Non-retrieval: uniform sample of heads outside
    ``H_ret``. Random: uniform sample of all heads. Controls match ``|H_ret|`` by default."""
    h_ret = strategy.table.selected
    if strategy.tag == "retrieval":
        if strategy.size is not None and strategy.size != len(h_ret):
            raise AblateError("retrieval mask size is fixed to |H_ret|")
        return HeadMask(h_ret)
    pool = _heads(strategy.table)
    if strategy.tag == "non-retrieval":
        pool = [h for h in pool if h not in h_ret]
    k = strategy.mask_size
    if k > len(pool):
        raise AblateError(f"mask size {k} exceeds the {len(pool)} eligible heads")
    rng = np.random.default_rng([strategy.rng_seed, STRATEGIES.index(strategy.tag)])
    picks = rng.choice(len(pool), size=k, replace=False)
    return HeadMask(pool[int(i)] for i in sorted(picks))


def mask_record(mask: HeadMask, strategy: MaskStrategy | None = None, **extra) -> dict:
    rec = {"heads": mask.to_list(), "size": len(mask)}
    if strategy is not None:
        rec.update({"strategy": strategy.tag, "seed": strategy.rng_seed,
                    "tau": strategy.table.tau, "h_ret": strategy.table.selected.to_list()})
    rec.update(extra)
    return rec


def save_mask(path, mask: HeadMask, strategy: MaskStrategy | None = None, **extra):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(mask_record(mask, strategy, **extra), indent=2, sort_keys=True) + "\n")


def load_mask(path) -> tuple[HeadMask, dict]:
    rec = json.loads(Path(path).read_text())
    return HeadMask(rec["heads"]), rec


def ablated_model(params: ModelParams, mask: HeadMask,
                  strategy: MaskStrategy | None = None) -> tuple[ModelParams, dict]:
    """Weight-edited copy of ``params`` plus a provenance sidecar."""
    out = apply_head_mask(params, mask)
    side = mask_record(mask, strategy, base_hash=params_hash(params), ablated_hash=params_hash(out))
    return out, side


def save_ablated(params: ModelParams, mask: HeadMask, strategy: MaskStrategy | None, path) -> dict:
    out, side = ablated_model(params, mask, strategy)
    save_checkpoint(out, path, meta={"ablation": side})
    Path(path).with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return side


def reconstruct(base: ModelParams, side: dict) -> ModelParams:
    """Rebuild an ablated model from its base and sidecar; checks the base hash."""
    if params_hash(base) != side["base_hash"]:
        raise AblateError("base checkpoint does not match the sidecar")
    return apply_head_mask(base, HeadMask(side["heads"]))


def all_heads(params: ModelParams) -> list[HeadId]:
    return all_head_ids(params.config)
