"""Versioned run configuration: one JSON file with a section per stage."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "seed": 42,
    "output_dir": "runs/default",
    "model": {
        "n_layers": 2, "n_heads": 4, "d_model": 64, "d_mlp": 256,
        "max_seq_len": 64, "positional": "rotary",
    },
    "tasks": {
        "n_keys": 16, "n_values": 24, "n_filler": 20, "value_len": 2,
        "grammar_p": 0.9,
        "niah_passages": 6, "passage_len": 8,
        "n_detect": 100, "n_eval": 200,
        "n_instructions": 1200, "min_facts": 2, "max_facts": 8, "max_gap": 4,
    },
    "pretrain": {
        "peak_lr": 2e-3, "min_lr": 2e-4, "warmup_frac": 0.02, "weight_decay": 0.1,
        "beta1": 0.9, "beta2": 0.95, "batch_size": 32, "max_steps": 3000, "seq_len": 64,
        "eval_every": 100, "n_eval": 500, "target_acc": 0.97, "patience": 3,
        "full_sequence_loss": False, "induction_steps": 1200, "induction_mix": 0.25,
    },
    "detect": {"tau": None, "head_fraction": 0.1},
    "ablate": {"strategy": "retrieval"},
    "synth": {
        "rejected_sampler": "retmask", "mode": "sample", "temperature": 0.8, "max_new_tokens": 6,
        "smaller_model": {"n_layers": 1, "n_heads": 2, "d_model": 32, "d_mlp": 128, "max_steps": 600,
                          "induction_steps": 0},
        "cross_model_checkpoint": None,
    },
    "train": {
        "objective": "dpo", "beta": 0.1, "peak_lr": 2e-4, "min_lr": 2e-5, "warmup_frac": 0.1,
        "weight_decay": 0.1, "beta1": 0.9, "beta2": 0.95, "batch_size": 16, "epochs": 1,
    },
    "analysis": {"top_k": [1, 2, 4]},
}

# sections whose nested dicts are free-form
_OPEN = {("synth", "smaller_model")}


def _merge(base: dict, over: dict, path: tuple = ()) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {'.'.join(path + (k,))!r}")
        if isinstance(base[k], dict) and path + (k,) not in _OPEN:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {'.'.join(path + (k,))!r} must be a section")
            out[k] = _merge(base[k], v, path + (k,))
        elif isinstance(base[k], dict):
            out[k] = {**base[k], **v}
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    data: dict

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    def stage_seed(self, stage: str) -> int:
        h = hashlib.sha256(f"{self.seed}/{stage}".encode()).digest()
        return int.from_bytes(h[:4], "little")

    def canonical(self) -> str:
        return json.dumps(self.data, sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def strategy(self) -> str:
        """Table-row label of this run."""
        if self.data["train"]["objective"] == "sft":
            return "sft"
        return self.data["synth"]["rejected_sampler"]

    def with_overrides(self, **dotted) -> "RunConfig":
        over: dict = {}
        for key, value in dotted.items():
            cur = over
            parts = key.split(".")
            for p in parts[:-1]:
                cur = cur.setdefault(p, {})
            cur[parts[-1]] = value
        return RunConfig(_merge(self.data, over))

    def save(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")


def make_config(overrides: dict | None = None) -> RunConfig:
    cfg = RunConfig(_merge(DEFAULTS, overrides or {}))
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from e
    if raw.get("version") != CONFIG_VERSION:
        raise ConfigError(f"{path}: config version {raw.get('version')!r}, expected {CONFIG_VERSION}")
    return make_config(raw)


def validate(cfg: RunConfig):
    d = cfg.data
    if d["version"] != CONFIG_VERSION:
        raise ConfigError(f"config version {d['version']!r}, expected {CONFIG_VERSION}")
    if d["ablate"]["strategy"] not in ("retrieval", "non-retrieval", "random"):
        raise ConfigError(f"unknown mask strategy {d['ablate']['strategy']!r}")
    if d["train"]["objective"] not in ("dpo", "sft"):
        raise ConfigError(f"unknown objective {d['train']['objective']!r}")
    from .synth import VARIANTS
    if d["synth"]["rejected_sampler"] not in VARIANTS:
        raise ConfigError(f"unknown rejected sampler {d['synth']['rejected_sampler']!r}")
    tau = d["detect"]["tau"]
    if tau is not None and not 0 < tau <= 1:
        raise ConfigError("detect.tau must lie in (0, 1]")
