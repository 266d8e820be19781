"""Score-distribution concentration, before/after deltas, NIAH accuracy and
the report bundle (CSV tables, SVG plots and a JSON manifest)."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decode import DecodeConfig, decode
from .detect import TAU_PRESETS, RetrievalScoreTable
from .model import EMPTY_MASK, HeadId, HeadMask, ModelError, ModelParams
from .tasks import END, NeedleInstance, score_answer


class AnalysisError(ValueError):
    pass


class MissingArtifactError(AnalysisError):
    pass


# ---------------------------------------------------------------------------
# concentration


@dataclass
class ConcentrationSummary:
    sorted_scores: list[float]
    order: list[HeadId]
    top_k_mass: dict[int, float]
    gini: float
    above_tau: dict[float, int]
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"sorted_scores": self.sorted_scores, "order": [[h.layer, h.head] for h in self.order],
                "top_k_mass": {str(k): v for k, v in self.top_k_mass.items()}, "gini": self.gini,
                "above_tau": {repr(t): n for t, n in self.above_tau.items()},
                "warnings": self.warnings}


def gini(x: Sequence[float]) -> float:
    """Mean absolute difference over twice the mean; 0 for uniform, (n-1)/n for a point mass."""
    x = np.asarray(x, dtype=np.float64)
    n, s = len(x), x.sum()
    if n == 0 or s == 0:
        return 0.0
    xs = np.sort(x)
    i = np.arange(1, n + 1)
    return float(((2 * i - n - 1) * xs).sum() / (n * s))


def concentration(table: RetrievalScoreTable, ks: Sequence[int] = (1, 2, 4),
                  taus: Sequence[float] | None = None) -> ConcentrationSummary:
    if not table.scores:
        raise AnalysisError("empty score table")
    ranked = table.ranked()
    vals = [float(s) for _, s in ranked]
    total = sum(vals)
    n = len(vals)
    warnings, mass = [], {}
    for k in sorted(set(ks)):
        kk = k
        if k > n:
            warnings.append(f"K={k} exceeds {n} heads; clamped")
            kk = n
        if k < 1:
            raise AnalysisError("K must be >= 1")
        mass[k] = sum(vals[:kk]) / total if total > 0 else 0.0
    taus = sorted(set(TAU_PRESETS.values())) if taus is None else list(taus)
    above = {t: sum(v >= t for v in vals) for t in taus}
    return ConcentrationSummary(vals, [h for h, _ in ranked], mass, gini(vals), above, warnings)


# ---------------------------------------------------------------------------
# before/after deltas


@dataclass
class DeltaReport:
    rows: list[dict]
    masked_mean_delta: float
    unmasked_mean_delta: float
    mean_before: float
    mean_after: float
    test_set_hash: str | None = None

    def to_json(self) -> dict:
        return {"masked_mean_delta": self.masked_mean_delta,
                "unmasked_mean_delta": self.unmasked_mean_delta,
                "mean_before": self.mean_before, "mean_after": self.mean_after,
                "test_set_hash": self.test_set_hash, "rows": self.rows}


def _mean(xs):
    return float(np.mean(xs)) if len(xs) else float("nan")


def delta_report(before: RetrievalScoreTable, after: RetrievalScoreTable, mask: HeadMask) -> DeltaReport:
    if set(before.scores) != set(after.scores) or (before.n_layers, before.n_heads) != (after.n_layers, after.n_heads):
        raise AnalysisError("before/after tables have different head topologies")
    hb, ha = before.meta.get("test_set_hash"), after.meta.get("test_set_hash")
    if hb is not None and ha is not None and hb != ha:
        raise AnalysisError("before/after tables were computed on different test sets")
    mask = HeadMask(mask)
    rows, dm, du = [], [], []
    for h in before.heads():
        b, a = before.scores[h], after.scores[h]
        d = a - b
        rows.append({"layer": h.layer, "head": h.head, "before": b, "after": a,
                     "delta": d, "masked": h in mask})
        (dm if h in mask else du).append(d)
    return DeltaReport(rows, _mean(dm), _mean(du), _mean([r["before"] for r in rows]),
                       _mean([r["after"] for r in rows]), hb if hb is not None else ha)


# ---------------------------------------------------------------------------
# NIAH evaluation


@dataclass
class NiahResult:
    accuracy: float
    verdicts: list[dict]

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, ["id", "correct", "reason", "output"], lineterminator="\n")
            w.writeheader()
            for v in self.verdicts:
                w.writerow({**v, "output": " ".join(map(str, v["output"]))})


def eval_niah(params: ModelParams, tests: Sequence[NeedleInstance], mask: HeadMask = EMPTY_MASK,
              max_new_tokens: int | None = None) -> NiahResult:
    """Greedy-decode every instance and score it with the exact-match oracle."""
    if len(tests) == 0:
        raise AnalysisError("empty NIAH test set")
    cfg = DecodeConfig("greedy", max_new_tokens=max_new_tokens or len(tests[0].answer) + 1, stop_token=END)
    verdicts = []
    for inst in tests:
        try:
            out, _ = decode(params, inst.prompt(), cfg, mask, trace=False)
        except ModelError as e:
            verdicts.append({"id": inst.instance_id, "correct": False, "reason": f"overflow: {e}", "output": []})
            continue
        ok = score_answer(inst, out)
        verdicts.append({"id": inst.instance_id, "correct": ok, "reason": "" if ok else "mismatch",
                         "output": out})
    acc = sum(v["correct"] for v in verdicts) / len(verdicts)
    return NiahResult(acc, verdicts)


# ---------------------------------------------------------------------------
# report bundle

REPORT_INPUTS = {
    "scores_before": "detect/scores.csv",
    "scores_after": "eval/scores_after.csv",
    "mask": "ablate/mask.json",
    "niah": "eval/summary.json",
}


def _fmt(x: float) -> str:
    return f"{x:.4f}"


def _svg(width: int, height: int, body: list[str]) -> str:
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        *body, "</svg>", ""])


def render_distribution_svg(plot: dict) -> str:
    """Descending retrieval scores as a polyline, one x step per head."""
    ys = plot["scores"]
    W, H, m = 480, 300, 40
    ymax = plot["y_max"] or 1.0
    n = len(ys)
    xs = [m + (W - 2 * m) * (i / max(n - 1, 1)) for i in range(n)]
    pts = " ".join(f"{x:.2f},{H - m - (H - 2 * m) * y / ymax:.2f}" for x, y in zip(xs, ys))
    body = [
        f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>',
        f'<polyline fill="none" stroke="steelblue" stroke-width="2" points="{pts}"/>',
        *[f'<circle cx="{x:.2f}" cy="{H - m - (H - 2 * m) * y / ymax:.2f}" r="2.5" fill="steelblue"/>'
          for x, y in zip(xs, ys)],
        f'<text x="{m - 4}" y="{m + 4}" font-size="10" text-anchor="end">{_fmt(ymax)}</text>',
        f'<text x="{m - 4}" y="{H - m + 4}" font-size="10" text-anchor="end">{_fmt(0.0)}</text>',
        f'<text x="{W / 2:.0f}" y="{H - 8}" font-size="11" text-anchor="middle">heads sorted by retrieval score</text>',
    ]
    return _svg(W, H, body)


def render_scatter_svg(plot: dict) -> str:
    """Score before (x) vs after (y); masked heads in red."""
    W, H, m = 360, 360, 40
    lim = plot["limit"] or 1.0

    def px(v):
        return m + (W - 2 * m) * v / lim

    def py(v):
        return H - m - (H - 2 * m) * v / lim

    body = [
        f'<line x1="{m}" y1="{H - m}" x2="{W - m}" y2="{H - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{H - m}" stroke="black"/>',
        f'<line x1="{px(0):.2f}" y1="{py(0):.2f}" x2="{px(lim):.2f}" y2="{py(lim):.2f}" '
        f'stroke="gray" stroke-dasharray="4,4"/>',
    ]
    for p in plot["points"]:
        color = "crimson" if p["masked"] else "steelblue"
        body.append(f'<circle cx="{px(p["before"]):.2f}" cy="{py(p["after"]):.2f}" r="3" fill="{color}"/>')
    body += [
        f'<text x="{m - 4}" y="{m + 4}" font-size="10" text-anchor="end">{_fmt(lim)}</text>',
        f'<text x="{W - m}" y="{H - m + 14}" font-size="10" text-anchor="end">{_fmt(lim)}</text>',
        f'<text x="{W / 2:.0f}" y="{H - 8}" font-size="11" text-anchor="middle">score before</text>',
    ]
    return _svg(W, H, body)


def build_manifest(run_dir) -> dict:
    run_dir = Path(run_dir)
    for key, rel in REPORT_INPUTS.items():
        if not (run_dir / rel).exists():
            raise MissingArtifactError(f"missing artifact {rel} ({key})")
    before = RetrievalScoreTable.load(run_dir / REPORT_INPUTS["scores_before"])
    after = RetrievalScoreTable.load(run_dir / REPORT_INPUTS["scores_after"])
    mask = HeadMask(json.loads((run_dir / REPORT_INPUTS["mask"]).read_text())["heads"])
    niah = json.loads((run_dir / REPORT_INPUTS["niah"]).read_text())
    conc = concentration(before)
    deltas = delta_report(before, after, mask)
    ymax = max(conc.sorted_scores) if conc.sorted_scores else 1.0
    lim = max([r["before"] for r in deltas.rows] + [r["after"] for r in deltas.rows] + [0.0])
    return {
        "scores": [{"layer": h.layer, "head": h.head, "score": before.scores[h]} for h in before.heads()],
        "concentration": conc.to_json(),
        "deltas": deltas.to_json(),
        "niah": niah,
        "mask": mask.to_list(),
        "plots": {
            "distribution": {"scores": conc.sorted_scores, "y_max": ymax if ymax > 0 else 1.0},
            "before_after": {"limit": lim if lim > 0 else 1.0,
                             "points": [{"before": r["before"], "after": r["after"], "masked": r["masked"]}
                                        for r in deltas.rows]},
        },
    }


def write_bundle(manifest: dict, out_dir):
    """Write every file of the report bundle from the manifest alone."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    with open(out / "scores.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "head", "score"])
        for r in manifest["scores"]:
            w.writerow([r["layer"], r["head"], repr(r["score"])])
    with open(out / "deltas.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "head", "before", "after", "delta", "masked"])
        for r in manifest["deltas"]["rows"]:
            w.writerow([r["layer"], r["head"], repr(r["before"]), repr(r["after"]), repr(r["delta"]),
                        int(r["masked"])])
    with open(out / "niah.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["model", "mask", "accuracy"])
        for row in manifest["niah"]["rows"]:
            w.writerow([row["model"], row["mask"], repr(row["accuracy"])])
    (out / "distribution.svg").write_text(render_distribution_svg(manifest["plots"]["distribution"]))
    (out / "before_after.svg").write_text(render_scatter_svg(manifest["plots"]["before_after"]))


def render_report(run_dir, out_dir=None) -> dict:
    run_dir = Path(run_dir)
    manifest = build_manifest(run_dir)
    write_bundle(manifest, out_dir or run_dir / "reports")
    return manifest
