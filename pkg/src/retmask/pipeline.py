"""Stage runners behind the CLI.

Every stage reads its inputs from the run directory, writes its outputs under
``<run>/<stage>/`` and records a fingerprint (relevant config sections plus
input file hashes) in ``<run>/<stage>/stage.json``. A stage whose fingerprint
matches is skipped; a stale or foreign stage directory is only overwritten with
``force``. Wall-clock timings go to ``<run>/logs/`` so that everything else is
byte-reproducible.
"""

from __future__ import annotations

import csv
import hashlib
import json
import shutil
import time
from pathlib import Path
from typing import Callable

import torch

from . import __version__
from .ablate import MaskStrategy, build_mask, load_mask, save_ablated, save_mask
from .analysis import concentration, delta_report, eval_niah, render_report
from .checkpoint import file_hash, load_checkpoint, params_hash, save_checkpoint
from .config import RunConfig
from .decode import DecodeConfig
from .detect import (RetrievalScoreTable, retrieval_scores, select_heads, tau_for_fraction,
                     test_set_hash)
from .model import EMPTY_MASK, HeadMask, ModelConfig, ModelParams, init_params
from .synth import RejectedSampler, SynthAborted, export_pairs, import_pairs, oracle_accuracy, synthesize_pairs
from .tasks import (END, TaskVocab, gen_instruction_set, gen_niah_set, load_instructions,
                    load_niah_set, save_instructions, save_niah_set)
from .train import DpoConfig, OptimConfig, PretrainConfig, dpo_train, pretrain, sft_train

STAGES = ("pretrain", "detect", "ablate", "synth", "dpo", "sft", "eval", "report")
PREREQ = {"pretrain": None, "detect": "pretrain", "ablate": "detect", "synth": "ablate",
          "dpo": "synth", "sft": "synth", "eval": "train", "report": "eval"}
# config keys each stage depends on (cumulative along the chain); "a.b" names one key of a section
_VOCAB = tuple(f"tasks.{k}" for k in ("n_keys", "n_values", "n_filler", "value_len", "grammar_p"))
_NIAH = ("tasks.niah_passages", "tasks.passage_len")
SECTIONS = {"pretrain": ("seed", "model", *_VOCAB, "pretrain"),
            "detect": ("detect", *_NIAH, "tasks.n_detect"),
            "ablate": ("ablate",),
            "synth": ("synth", "tasks.n_instructions", "tasks.min_facts", "tasks.max_facts", "tasks.max_gap"),
            "dpo": ("train",), "sft": ("train",),
            "eval": ("tasks.n_eval",), "report": ("analysis",)}


def _lookup(cfg: RunConfig, key: str):
    section, _, name = key.partition(".")
    return cfg[section][name] if name else cfg[section]


class PipelineError(RuntimeError):
    pass


class PrerequisiteError(PipelineError):
    pass


class DirtyOutputError(PipelineError):
    pass


class StageAborted(PipelineError):
    """A stage ran but produced nothing usable; its diagnostics are on disk."""


def train_stage(cfg: RunConfig) -> str:
    return cfg["train"]["objective"]


def chain(stage: str, cfg: RunConfig) -> list[str]:
    """Stages up to and including ``stage``, in execution order."""
    out = [stage]
    while PREREQ[out[-1]] is not None:
        nxt = PREREQ[out[-1]]
        out.append(train_stage(cfg) if nxt == "train" else nxt)
    return out[::-1]


def _section_hash(cfg: RunConfig, stage: str) -> str:
    keys = [k for s in chain(stage, cfg) for k in SECTIONS[s]]
    blob = json.dumps({k: _lookup(cfg, k) for k in keys}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# typed views on the run config


def vocab_of(cfg: RunConfig) -> TaskVocab:
    t = cfg["tasks"]
    return TaskVocab(n_keys=t["n_keys"], n_values=t["n_values"], n_filler=t["n_filler"],
                     value_len=t["value_len"], grammar_p=t["grammar_p"])


def model_config_of(cfg: RunConfig, **over) -> ModelConfig:
    m = {**cfg["model"], **over}
    return ModelConfig(vocab_size=vocab_of(cfg).size, rng_seed=cfg.stage_seed("init"), **m)


def pretrain_config_of(cfg: RunConfig, **over) -> PretrainConfig:
    return PretrainConfig(**{**cfg["pretrain"], **over}, rng_seed=cfg.stage_seed("pretrain"))


def train_config_of(cfg: RunConfig) -> OptimConfig:
    t = dict(cfg["train"])
    objective = t.pop("objective")
    beta = t.pop("beta")
    seed = cfg.stage_seed(objective)
    if objective == "dpo":
        return DpoConfig(beta=beta, rng_seed=seed, **t)
    return OptimConfig(rng_seed=seed, **t)


def niah_tests(cfg: RunConfig, purpose: str):
    t = cfg["tasks"]
    n = t["n_detect"] if purpose == "detect" else t["n_eval"]
    return gen_niah_set(vocab_of(cfg), n, t["niah_passages"], t["passage_len"],
                        rng_seed=cfg.stage_seed(purpose), max_seq_len=cfg["model"]["max_seq_len"])


def detect_tau(cfg: RunConfig, table: RetrievalScoreTable) -> float:
    tau = cfg["detect"]["tau"]
    return float(tau) if tau is not None else tau_for_fraction(table, cfg["detect"]["head_fraction"])


def control_mask(table: RetrievalScoreTable, tag: str, seed: int) -> HeadMask:
    return build_mask(MaskStrategy(tag, table, None, seed))


# ---------------------------------------------------------------------------
# small io helpers


def _dump(path: Path, obj):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_rows(path: Path, rows: list[dict]):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        if not rows:
            return
        w = csv.DictWriter(f, list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def _hash_dir(d: Path) -> dict:
    return {str(p.relative_to(d)): file_hash(p) for p in sorted(d.rglob("*"))
            if p.is_file() and p.name != "stage.json"}


def code_version() -> str:
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


class Run:
    """A run directory plus its effective config."""

    def __init__(self, root, cfg: RunConfig, log: Callable[[str], None] | None = None):
        self.root = Path(root)
        self.cfg = cfg
        self._log = log

    def dir(self, stage: str) -> Path:
        return self.root / stage

    def log(self, msg: str):
        if self._log:
            self._log(msg)

    def record(self, stage: str) -> dict | None:
        p = self.dir(stage) / "stage.json"
        return json.loads(p.read_text()) if p.exists() else None

    def fingerprint(self, stage: str) -> dict:
        inputs = {}
        pre = PREREQ[stage]
        if pre is not None:
            pre = train_stage(self.cfg) if pre == "train" else pre
            rec = self.record(pre)
            inputs = {pre: rec["outputs"] if rec else None}
        return {"stage": stage, "config": _section_hash(self.cfg, stage), "inputs": inputs}

    def complete(self, stage: str) -> bool:
        rec = self.record(stage)
        return rec is not None and {k: rec[k] for k in ("stage", "config", "inputs")} == self.fingerprint(stage)

    def require(self, stage: str):
        pre = PREREQ[stage]
        if pre is None:
            return
        pre = train_stage(self.cfg) if pre == "train" else pre
        if self.record(pre) is None:
            raise PrerequisiteError(f"stage {stage!r} needs {pre!r} outputs: run {pre} first")
        if not self.complete(pre):
            raise PrerequisiteError(f"{pre!r} outputs are stale for this config: run {pre} first")

    def run(self, stage: str, force: bool = False) -> str:
        """Run one stage; returns "done" or "up-to-date"."""
        if stage not in STAGES:
            raise PipelineError(f"unknown stage {stage!r}")
        if stage in ("dpo", "sft") and stage != train_stage(self.cfg):
            self.cfg = self.cfg.with_overrides(**{"train.objective": stage})
        self.require(stage)
        d = self.dir(stage)
        if self.complete(stage) and not force:
            self.log(f"{stage}: up to date")
            return "up-to-date"
        if d.exists() and any(d.iterdir()):
            if not force:
                raise DirtyOutputError(f"{d} holds outputs from a different config; pass --force")
            shutil.rmtree(d)
        d.mkdir(parents=True, exist_ok=True)
        self.cfg.save(self.root / "config.json")
        t0 = time.perf_counter()
        extra = STAGE_FUNCS[stage](self) or {}
        elapsed = time.perf_counter() - t0
        rec = {**self.fingerprint(stage), "outputs": _hash_dir(d), "code_version": code_version(), **extra}
        _dump(d / "stage.json", rec)
        self._timing(stage, elapsed)
        self._manifest()
        self.log(f"{stage}: done in {elapsed:.1f}s")
        return "done"

    def run_all(self, force: bool = False) -> list[str]:
        return [self.run(s, force) for s in chain("report", self.cfg)]

    def _timing(self, stage: str, seconds: float):
        p = self.root / "logs" / "timings.json"
        p.parent.mkdir(parents=True, exist_ok=True)
        t = json.loads(p.read_text()) if p.exists() else {}
        t[stage] = round(seconds, 3)
        _dump(p, t)

    def _manifest(self):
        stages = {}
        for s in STAGES:
            rec = self.record(s)
            if rec is not None:
                stages[s] = {"config": rec["config"], "inputs": rec["inputs"], "outputs": rec["outputs"]}
        _dump(self.root / "run_manifest.json", {
            "config_hash": self.cfg.hash(), "code_version": code_version(), "seed": self.cfg.seed,
            "strategy": self.cfg.strategy(), "stages": stages,
            "wall_clock": "logs/timings.json"})

    # shared loaders
    def base_model(self) -> ModelParams:
        return load_checkpoint(self.dir("pretrain") / "model.ckpt", model_config_of(self.cfg))

    def trained_model(self) -> ModelParams:
        return load_checkpoint(self.dir(train_stage(self.cfg)) / "model.ckpt", model_config_of(self.cfg))


# ---------------------------------------------------------------------------
# stages


def _pretrain(run: Run):
    cfg = run.cfg
    params = init_params(model_config_of(cfg))
    out, report = pretrain(params, vocab_of(cfg), pretrain_config_of(cfg), log=run.log)
    save_checkpoint(out, run.dir("pretrain") / "model.ckpt", meta={"stage": "pretrain"})
    _write_rows(run.dir("pretrain") / "steps.csv", report.rows())
    _dump(run.dir("pretrain") / "report.json", report.summary())
    return {"heldout_kv_recall_acc": report.extra["heldout_kv_recall_acc"]}


def _detect(run: Run):
    cfg = run.cfg
    tests = niah_tests(cfg, "detect")
    save_niah_set(run.dir("detect") / "tests.jsonl", tests)
    table = retrieval_scores(run.base_model(), tests)
    tau = detect_tau(cfg, table)
    table = table.with_selection(tau)
    table.meta.update({"test_set_hash": test_set_hash(tests)})
    table.save(run.dir("detect") / "scores.csv")
    return {"tau": tau, "h_ret": table.selected.to_list(), "test_set_hash": test_set_hash(tests)}


def _load_scores(run: Run) -> RetrievalScoreTable:
    return RetrievalScoreTable.load(run.dir("detect") / "scores.csv")


def _ablate(run: Run):
    table = _load_scores(run)
    strategy = MaskStrategy(run.cfg["ablate"]["strategy"], table, None, run.cfg.stage_seed("ablate"))
    mask = build_mask(strategy)
    save_mask(run.dir("ablate") / "mask.json", mask, strategy)
    save_ablated(run.base_model(), mask, strategy, run.dir("ablate") / "ablated.ckpt")
    return {"mask": mask.to_list()}


# smaller_model keys that shape the network; the rest override pretraining
_ARCH_KEYS = ("n_layers", "n_heads", "d_model", "d_mlp")


def _sampler(run: Run, target: ModelParams) -> RejectedSampler:
    cfg = run.cfg
    variant = cfg["synth"]["rejected_sampler"]
    table = _load_scores(run)
    if variant == "retmask":
        mask, _ = load_mask(run.dir("ablate") / "mask.json")
        return RejectedSampler(variant, mask)
    if variant in ("non-retrieval-mask", "random-mask"):
        tag = "non-retrieval" if variant == "non-retrieval-mask" else "random"
        return RejectedSampler(variant, control_mask(table, tag, cfg.stage_seed("synth-mask")))
    if variant == "smaller-model":
        sm = dict(cfg["synth"]["smaller_model"])
        arch = {k: sm.pop(k) for k in _ARCH_KEYS if k in sm}
        small_cfg = model_config_of(cfg, **arch)
        small, rep = pretrain(init_params(small_cfg), vocab_of(cfg), pretrain_config_of(cfg, **sm), log=run.log)
        save_checkpoint(small, run.dir("synth") / "smaller.ckpt", meta={"stage": "synth-smaller"})
        return RejectedSampler(variant, params=small,
                               descriptor={"heldout_kv_recall_acc": rep.extra["heldout_kv_recall_acc"]})
    return RejectedSampler(variant)


def _synth(run: Run):
    cfg = run.cfg
    s, t = cfg["synth"], cfg["tasks"]
    target = run.base_model()
    instructions = gen_instruction_set(vocab_of(cfg), t["n_instructions"], cfg.stage_seed("instructions"),
                                       t["min_facts"], t["max_facts"], t["max_gap"])
    save_instructions(run.dir("synth") / "instructions.jsonl", instructions)
    chosen = None
    if s["cross_model_checkpoint"]:
        chosen = load_checkpoint(s["cross_model_checkpoint"])
    dcfg = DecodeConfig(s["mode"], s["temperature"], s["max_new_tokens"], END)
    try:
        tuples, stats = synthesize_pairs(target, _sampler(run, target), instructions, dcfg,
                                         seed=cfg.stage_seed("synth"), chosen_params=chosen)
    except SynthAborted as e:
        _dump(run.dir("synth") / "stats.json",
              {**e.stats.to_json(), "variant": s["rejected_sampler"], "aborted": True})
        raise StageAborted(f"synth: {e}") from e
    export_pairs(tuples, run.dir("synth") / "pairs.jsonl")
    summary = {**stats.to_json(), "variant": s["rejected_sampler"],
               "chosen_oracle_acc": oracle_accuracy(tuples, instructions, "chosen"),
               "rejected_oracle_acc": oracle_accuracy(tuples, instructions, "rejected")}
    _dump(run.dir("synth") / "stats.json", summary)
    return {"strategy": s["rejected_sampler"], "n_tuples": stats.n_tuples}


def _train(run: Run):
    cfg = run.cfg
    stage = train_stage(cfg)
    tuples = import_pairs(run.dir("synth") / "pairs.jsonl")
    target = run.base_model()
    tcfg = train_config_of(cfg)
    if stage == "dpo":
        out, report = dpo_train(target, target.clone(), tuples, tcfg, log=run.log)
    else:
        out, report = sft_train(target, tuples, tcfg, log=run.log)
    save_checkpoint(out, run.dir(stage) / "model.ckpt", meta={"stage": stage})
    _write_rows(run.dir(stage) / "steps.csv", report.rows())
    strategy = cfg.strategy()
    _dump(run.dir(stage) / "report.json", {**report.summary(), "strategy": strategy,
                                          "pairs_hash": file_hash(run.dir("synth") / "pairs.jsonl")})
    return {"strategy": strategy}


def niah_rows(base: ModelParams, tests, table: RetrievalScoreTable, seed: int,
              trained: ModelParams | None = None) -> list[dict]:
    """NIAH accuracy of the base model unmasked, under ``H_ret`` and under both
    equal-size control masks, plus the trained model if given."""
    h_ret = table.selected
    rows = [{"model": "base", "mask": "none", "accuracy": eval_niah(base, tests).accuracy}]
    rows.append({"model": "base", "mask": "retrieval", "size": len(h_ret),
                 "accuracy": eval_niah(base, tests, h_ret).accuracy})
    for tag in ("non-retrieval", "random"):
        m = control_mask(table, tag, seed)
        rows.append({"model": "base", "mask": tag, "size": len(m), "accuracy": eval_niah(base, tests, m).accuracy})
    if trained is not None:
        rows.append({"model": "trained", "mask": "none", "accuracy": eval_niah(trained, tests).accuracy})
    return rows


def _eval(run: Run):
    cfg = run.cfg
    tests = niah_tests(cfg, "eval")
    save_niah_set(run.dir("eval") / "tests.jsonl", tests)
    table = _load_scores(run)
    base, trained = run.base_model(), run.trained_model()
    rows = niah_rows(base, tests, table, cfg.stage_seed("eval-mask"), trained)
    det_tests = load_niah_set(run.dir("detect") / "tests.jsonl")
    after = retrieval_scores(trained, det_tests).with_selection(table.tau)
    after.meta.update({"test_set_hash": test_set_hash(det_tests)})
    after.save(run.dir("eval") / "scores_after.csv")
    mask, _ = load_mask(run.dir("ablate") / "mask.json")
    deltas = delta_report(table, after, mask)
    summary = {"strategy": cfg.strategy(), "rows": rows, "eval_set_hash": test_set_hash(tests),
               "detect_set_hash": test_set_hash(det_tests), "deltas": deltas.to_json()}
    _dump(run.dir("eval") / "summary.json", summary)
    return {"strategy": cfg.strategy()}


def _report(run: Run):
    render_report(run.root, run.dir("report"))


STAGE_FUNCS = {"pretrain": _pretrain, "detect": _detect, "ablate": _ablate, "synth": _synth,
               "dpo": _train, "sft": _train, "eval": _eval, "report": _report}


# ---------------------------------------------------------------------------
# cross-run comparison

COMPARE_FIELDS = ("run", "strategy", "niah_base", "niah_trained", "niah_delta",
                  "delta_masked_mean", "delta_unmasked_mean", "top1_mass", "gini")


COMPARE_COLUMNS = ("run", "strategy", "status", "n_pairs", "niah_base", "niah_trained", "niah_delta",
                   "delta_masked_mean", "delta_unmasked_mean", "top1_mass", "gini")


def _compare_row(d: Path) -> tuple[dict, tuple]:
    detect = d / "detect" / "scores.json"
    if not detect.exists():
        raise PrerequisiteError(f"{d}: no detection scores, run detect first")
    det_hash = json.loads(detect.read_text())["test_set_hash"]
    conc = concentration(RetrievalScoreTable.load(d / "detect" / "scores.csv"), ks=(1,))
    stats_p = d / "synth" / "stats.json"
    stats = json.loads(stats_p.read_text()) if stats_p.exists() else {}
    row = dict.fromkeys(COMPARE_COLUMNS, float("nan"))
    row.update(run=d.name, top1_mass=conc.top_k_mass[1], gini=conc.gini, n_pairs=stats.get("n_tuples", 0))
    p = d / "eval" / "summary.json"
    if not p.exists():
        if not stats.get("aborted"):
            raise PrerequisiteError(f"{d}: no eval summary, run eval first")
        cfg = json.loads((d / "config.json").read_text())
        row.update(strategy=RunConfig(cfg).strategy(),
                   status="aborted: " + ", ".join(f"{k} {v}" for k, v in stats["dropped"].items() if v))
        return row, (det_hash, None)
    s = json.loads(p.read_text())
    if s["detect_set_hash"] != det_hash:
        raise PipelineError(f"{d}: eval summary and detection scores disagree")
    acc = {(r["model"], r["mask"]): r["accuracy"] for r in s["rows"]}
    row.update(strategy=s["strategy"], status="ok",
               niah_base=acc[("base", "none")], niah_trained=acc[("trained", "none")],
               niah_delta=acc[("trained", "none")] - acc[("base", "none")],
               delta_masked_mean=s["deltas"]["masked_mean_delta"],
               delta_unmasked_mean=s["deltas"]["unmasked_mean_delta"])
    return row, (det_hash, s["eval_set_hash"])


def compare(run_dirs) -> list[dict]:
    """One row per run; runs must share detection and evaluation sets.

    A run whose synthesis aborted (every generation failed) still gets a row,
    with its drop counts as the status and NaN metrics.
    """
    rows, det, ev = [], set(), set()
    for d in map(Path, run_dirs):
        row, (h_det, h_ev) = _compare_row(d)
        rows.append(row)
        det.add(h_det)
        if h_ev is not None:
            ev.add(h_ev)
    if sum(r["status"] == "ok" for r in rows) < 2:
        raise PipelineError("compare needs at least two completed runs")
    if len(det) > 1 or len(ev) > 1:
        raise PipelineError("runs were evaluated on different test sets")
    return rows


def write_compare(rows: list[dict], path):
    _write_rows(Path(path), rows)


def tree_hashes(root) -> dict:
    """File hashes of a run directory, logs excluded."""
    root = Path(root)
    return {k: v for k, v in _hash_dir(root).items() if not k.startswith("logs/")}


def set_threads():
    torch.set_num_threads(1)
