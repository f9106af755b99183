"""Consolidated Markdown + JSON report over a pipeline output directory.

Everything is derived from files already on disk, so regenerating the
report over an unchanged directory yields the same bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .checkpoint import MANIFEST, read_manifest
from .model import ModelConfig, parameter_count

STAGE_ORDER = (
    "train-teacher", "estimate-importance", "prune", "distill", "finetune",
    "hybridize", "align", "finetune-lite", "eval",
)
# (label, stage holding the checkpoint, parent label)
MODEL_ROWS = (
    ("teacher", "train-teacher", None),
    ("pruned", "prune", "teacher"),
    ("hybrid", "finetune-lite", "pruned"),
)

EVAL_ORDER = ("teacher", "pruned", "recovered", "hybrid")

REFERENCE_DEPTHS = {"teacher": 60, "pruned": 30, "n_dual": 10, "n_single": 20}
REFERENCE_CLAIM = "approximately 40%"


def reduction(child: int, parent: int) -> float:
    return round(1 - child / parent, 3)


def reference_backbone_reduction(n_dual: int = REFERENCE_DEPTHS["n_dual"],
                                 n_single: int = REFERENCE_DEPTHS["n_single"]) -> float:
    """Backbone reduction of an n_dual + n_single hybrid over an all-dual model
    of the same depth, counted in stream units (dual = 2, single = 1)."""
    return reduction(2 * n_dual + n_single, 2 * (n_dual + n_single))


def _read_summaries(out: Path) -> dict[str, dict]:
    found = {}
    for stage in STAGE_ORDER:
        path = out / stage / "summary.json"
        if path.exists():
            found[stage] = json.loads(path.read_text())
    return found


def _curve_digest(path: Path) -> dict | None:
    if not path.exists():
        return None
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    losses = [float(r["loss"]) for r in rows if r.get("loss")]
    vals = [(int(r["step"]), float(r["val_loss"])) for r in rows if r.get("val_loss")]
    return {
        "steps": int(rows[-1]["step"]) if rows else 0,
        "first_loss": losses[0] if losses else None,
        "last_loss": losses[-1] if losses else None,
        "val": vals,
    }


def _fmt(x, nd: int = 4) -> str:
    if x is None:
        return "n/a"
    if isinstance(x, float):
        return f"{x:.{nd}f}"
    return str(x)


def collect(out) -> dict:
    out = Path(out)
    if not out.is_dir():
        raise FileNotFoundError(f"output directory {out} does not exist")
    summaries = _read_summaries(out)
    if not summaries:
        raise ValueError(f"no completed stages in {out}")
    data: dict = {"stages": {}, "params": {}, "curves": {}, "importance": None, "eval": None}
    for stage, s in summaries.items():
        data["stages"][stage] = {
            "output_hash": s["output_hash"],
            "inputs": s["inputs"],
            "wall_clock": round(s["wall_clock"], 3),
            "metrics": s["metrics"],
        }
        curve = _curve_digest(out / stage / "curve.csv")
        if curve is not None:
            data["curves"][stage] = curve
    counts = {}
    for label, stage, parent in MODEL_ROWS:
        if (out / stage / MANIFEST).exists():
            cfg = ModelConfig.from_dict(read_manifest(out / stage)["config"])
            pc = parameter_count(cfg)
            counts[label] = pc
            row = {"depth": cfg.depth, "n_dual": cfg.n_dual, "n_single": cfg.depth - cfg.n_dual,
                   "backbone": pc["backbone"], "total": pc["total"]}
            if parent in counts:
                row["reduction_vs_parent"] = reduction(pc["total"], counts[parent]["total"])
                row["backbone_reduction_vs_parent"] = reduction(pc["backbone"], counts[parent]["backbone"])
            if label != "teacher" and "teacher" in counts:
                row["reduction_vs_teacher"] = reduction(pc["total"], counts["teacher"]["total"])
            data["params"][label] = row
    data["reference"] = {
        "depths": REFERENCE_DEPTHS,
        "backbone_reduction_arithmetic": reference_backbone_reduction(),
        "claim": REFERENCE_CLAIM,
    }
    imp = out / "estimate-importance" / "importance.json"
    if imp.exists():
        rep = json.loads(imp.read_text())
        data["importance"] = {"scores": rep["scores"], "protected": rep["protected"], "config": rep["config"]}
    metrics = out / "eval" / "metrics.json"
    if metrics.exists():
        data["eval"] = json.loads(metrics.read_text())
    return data


def render_markdown(data: dict) -> str:
    lines = ["# Compression pipeline report", "", "## Stages", "",
             "| stage | output hash | inputs | wall clock (s) |", "|---|---|---|---|"]
    for stage in STAGE_ORDER:
        s = data["stages"].get(stage)
        if s is None:
            continue
        ins = ", ".join(f"{k}@{v[:8]}" for k, v in s["inputs"].items()) or "-"
        lines.append(f"| {stage} | {s['output_hash'][:12]} | {ins} | {s['wall_clock']:.1f} |")

    if data["params"]:
        lines += ["", "## Parameter counts", "",
                  "| model | depth | dual+single | backbone | total | reduction vs parent | backbone reduction vs parent |",
                  "|---|---|---|---|---|---|---|"]
        for label, row in data["params"].items():
            lines.append(
                f"| {label} | {row['depth']} | {row['n_dual']}+{row['n_single']} | {row['backbone']} | {row['total']} "
                f"| {_fmt(row.get('reduction_vs_parent'), 3)} | {_fmt(row.get('backbone_reduction_vs_parent'), 3)} |"
            )
        ref = data["reference"]
        d = ref["depths"]
        lines += ["", "### Hybrid backbone reduction", ""]
        if "hybrid" in data["params"]:
            hyb = data["params"]["hybrid"]
            lines.append(f"- toy scale ({data['params']['pruned']['depth']} -> {hyb['n_dual']}+{hyb['n_single']}): "
                         f"measured backbone reduction {hyb['backbone_reduction_vs_parent']:.3f}")
        lines.append(f"- reference scale ({d['teacher']} -> {d['pruned']} -> {d['n_dual']}+{d['n_single']}): "
                     f"stream-count arithmetic gives {ref['backbone_reduction_arithmetic']:.3f}; "
                     f"the reference claim is \"{ref['claim']}\"")

    if data["importance"]:
        imp = data["importance"]
        scored = [s for s in imp["scores"] if s is not None]
        top = max(scored) if scored else 0.0
        lines += ["", "## Layer importance", "", f"weighting: {imp['config']['omega']}, "
                  f"timesteps {imp['config']['t_sub']}, {imp['config']['n_prompts']} prompts", "",
                  "| layer | score | |", "|---|---|---|"]
        for l, s in enumerate(imp["scores"]):
            if s is None:
                lines.append(f"| {l} | protected | |")
            else:
                bar = "#" * (int(round(30 * s / top)) if top > 0 else 0)
                lines.append(f"| {l} | {s:.5f} | {bar} |")

    if data["curves"]:
        lines += ["", "## Loss curves", "", "| stage | steps | first loss | last loss | validation (step: loss) |",
                  "|---|---|---|---|---|"]
        for stage in STAGE_ORDER:
            c = data["curves"].get(stage)
            if c is None:
                continue
            vals = " ".join(f"{st}:{v:.4f}" for st, v in c["val"])
            lines.append(f"| {stage} | {c['steps']} | {_fmt(c['first_loss'])} | {_fmt(c['last_loss'])} | {vals or '-'} |")

    if data["eval"]:
        lines += ["", "## Evaluation", "", "| model | val loss | teacher gap | prompt match | hash |",
                  "|---|---|---|---|---|"]
        order = [n for n in EVAL_ORDER if n in data["eval"]] + sorted(set(data["eval"]) - set(EVAL_ORDER))
        for name in order:
            r = data["eval"][name]
            lines.append(f"| {name} | {_fmt(r['val_loss'])} | {_fmt(r['teacher_gap'])} | "
                         f"{_fmt(r['prompt_match'], 3)} | {r['model_hash'][:12]} |")
    return "\n".join(lines) + "\n"


def stage_report(out) -> dict:
    """Write ``report.md`` and ``report.json`` into ``out``; returns the data."""
    out = Path(out)
    data = collect(out)
    (out / "report.json").write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    (out / "report.md").write_text(render_markdown(data))
    return data
