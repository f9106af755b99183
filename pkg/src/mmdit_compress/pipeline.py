"""The stage chain: teacher -> importance -> prune -> distill -> finetune ->
hybridize -> align -> finetune-lite -> eval.

Each stage writes into ``<output_dir>/<stage>/``: a checkpoint (when it
produces a model), its side artifacts, and ``summary.json`` recording the
content hash of every input it read.  Datasets are regenerated in memory from
the config, so stages share nothing but files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .checkpoint import MANIFEST, checkpoint_hash, load_checkpoint, save_checkpoint
from .compress import (
    PrunePlan,
    apply_depth_prune,
    build_prune_plan,
    convert_hybrid,
    distill_targets,
    make_hybrid_plan,
)
from .config import PipelineConfig
from .data import gen_dataset, importance_prompt_set, mosaic, write_ppm
from .diffusion import add_noise, make_schedule
from .distill import (
    align_hybrid,
    bridge_gap,
    global_finetune,
    lightweight_finetune,
    targeted_distill,
    train_teacher,
)
from .evaluate import evaluate, fixed_noise, prompt_match, teacher_gap, val_loss
from .importance import TimestepWeighting, importance_scores, select_prune_set, sensitivity_sanity

log = logging.getLogger(__name__)

STAGES = (
    "train-teacher",
    "estimate-importance",
    "prune",
    "distill",
    "finetune",
    "hybridize",
    "align",
    "finetune-lite",
    "eval",
)

# stage -> stages whose artifacts it reads
INPUTS = {
    "train-teacher": (),
    "estimate-importance": ("train-teacher",),
    "prune": ("train-teacher", "estimate-importance"),
    "distill": ("prune", "train-teacher"),
    "finetune": ("distill",),
    "hybridize": ("finetune",),
    "align": ("hybridize", "finetune"),
    "finetune-lite": ("align",),
    "eval": ("train-teacher", "prune", "finetune", "finetune-lite"),
}

# stages without a checkpoint: the file whose hash stands for the stage output
PRIMARY_FILE = {"estimate-importance": "importance.json", "eval": "metrics.json"}

OUTPUT_ROOT_ENV = "ARTIFACT_OUTPUT_ROOT"
LOCK_NAME = ".lock"


class MissingArtifactError(RuntimeError):
    pass


class LockError(RuntimeError):
    pass


def resolve_output_dir(cfg: PipelineConfig, override=None) -> Path:
    """``--out`` wins, then the environment override, then the config value."""
    if override is not None:
        return Path(override)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root) if root else Path(cfg.output_dir)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def stage_hash(out: Path, stage: str) -> str:
    d = Path(out) / stage
    if stage in PRIMARY_FILE:
        path = d / PRIMARY_FILE[stage]
        if not path.exists():
            raise MissingArtifactError(f"missing {path}; run the '{stage}' stage first")
        return file_hash(path)
    if not (d / MANIFEST).exists():
        raise MissingArtifactError(f"missing checkpoint in {d}; run the '{stage}' stage first")
    return checkpoint_hash(d)


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockError(f"{out} is locked by another pipeline (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


class Pipeline:
    def __init__(self, cfg: PipelineConfig, out=None):
        cfg.validate()
        self.cfg = cfg
        self.out = resolve_output_dir(cfg, out)
        self.schedule = make_schedule(cfg.schedule.T, cfg.schedule.kind, cfg.schedule.s)
        self._train = self._val = None
        self.omega_kinds = None  # extra importance weightings requested on the command line

    # -- data and artifacts

    @property
    def train_set(self):
        if self._train is None:
            d = self.cfg.data
            self._train = gen_dataset(d.n_train, "train", self.cfg.seed, d.stratified, size=self.cfg.model.image_size)
        return self._train

    @property
    def val_set(self):
        if self._val is None:
            d = self.cfg.data
            self._val = gen_dataset(d.n_val, "val", self.cfg.seed, d.stratified, size=self.cfg.model.image_size)
        return self._val

    def stage_dir(self, stage: str) -> Path:
        return self.out / stage

    def load(self, stage: str):
        d = self.stage_dir(stage)
        if not (d / MANIFEST).exists():
            raise MissingArtifactError(f"no checkpoint in {d}; it is produced by the '{stage}' stage")
        return load_checkpoint(d)

    def read_json(self, stage: str, name: str) -> dict:
        path = self.stage_dir(stage) / name
        if not path.exists():
            raise MissingArtifactError(f"missing {path}; it is produced by the '{stage}' stage")
        return json.loads(path.read_text())

    # -- running

    def run(self, stage: str) -> dict:
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        inputs = {s: stage_hash(self.out, s) for s in INPUTS[stage]}
        d = self.stage_dir(stage)
        d.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        metrics = getattr(self, "_" + stage.replace("-", "_"))(d)
        summary = {
            "stage": stage,
            "status": "ok",
            "inputs": inputs,
            "output_hash": stage_hash(self.out, stage),
            "metrics": metrics,
            "wall_clock": time.perf_counter() - start,
        }
        _dump(d / "summary.json", summary)
        _dump(self.out / "config.json", self.cfg.to_dict())
        return summary

    def run_all(self, stages=STAGES, emit=None) -> list[dict]:
        out = []
        with output_lock(self.out):
            for stage in stages:
                log.info("stage %s", stage)
                summary = self.run(stage)
                if emit is not None:
                    emit(summary)
                out.append(summary)
        return out

    # -- stages

    def _save(self, model, d: Path) -> None:
        save_checkpoint(model, d)

    def _train_teacher(self, d: Path) -> dict:
        cfg = self.cfg
        teacher, curve = train_teacher(cfg.model, self.train_set, self.val_set, self.schedule, cfg.teacher,
                                       init_seed=cfg.seed, val_seed=cfg.seed)
        self._save(teacher, d)
        curve.to_csv(d / "curve.csv")
        return {"val_loss": val_loss(teacher, self.val_set, self.schedule, cfg.seed), **curve.probe_final}

    def _estimate_importance(self, d: Path, kinds=None) -> dict:
        cfg = self.cfg
        teacher = self.load("train-teacher")
        prompts = importance_prompt_set(cfg.importance.n_prompts, cfg.seed)
        kinds = list(kinds or self.omega_kinds or [cfg.importance.omega])
        metrics = {}
        for i, kind in enumerate(kinds):
            w = TimestepWeighting(tuple(cfg.importance.t_sub), kind, cfg.schedule.T)
            report = importance_scores(teacher, prompts, w, self.schedule, cfg.seed, cfg.protected,
                                       cfg.importance.pure_noise)
            (d / f"importance_{kind}.json").write_text(report.to_json() + "\n")
            if i == 0:
                (d / "importance.json").write_text(report.to_json() + "\n")
                sens = sensitivity_sanity(teacher, report, self.val_set, self.schedule, cfg.seed)
                _dump(d / "sensitivity.json", sens.to_dict())
                metrics = {"omega": kind, "scores": report.scores, "spearman": sens.spearman,
                           "fingerprint": report.fingerprint}
        return metrics

    def _prune(self, d: Path) -> dict:
        cfg = self.cfg
        teacher = self.load("train-teacher")
        report = self.read_json("estimate-importance", "importance.json")
        keep, remove = select_prune_set(report["scores"], cfg.prune.target_keep, cfg.protected)
        plan = build_prune_plan(keep, remove, teacher.depth)
        student = apply_depth_prune(teacher, plan)
        self._save(student, d)
        _dump(d / "plan.json", plan.to_dict())
        return {
            "keep": keep,
            "remove": remove,
            "val_loss": val_loss(student, self.val_set, self.schedule, cfg.seed),
            "teacher_gap": teacher_gap(student, teacher, self.val_set, self.schedule, cfg.seed),
        }

    def _plan(self) -> PrunePlan:
        return PrunePlan.from_dict(self.read_json("prune", "plan.json"))

    def _distill(self, d: Path) -> dict:
        cfg = self.cfg
        plan = self._plan()
        student, curve = targeted_distill(self.load("prune"), self.load("train-teacher"), self.train_set, plan,
                                          self.schedule, cfg.distill, probe_set=self.val_set)
        self._save(student, d)
        curve.to_csv(d / "curve.csv")
        _dump(d / "run.json", {"config": cfg.distill.to_dict(), "targets": {str(k): v for k, v in
                                                                             distill_targets(plan).items()}})
        initial = {str(k): v for k, v in curve.probe_initial.items()}
        final = {str(k): v for k, v in curve.probe_final.items()}
        ratio = {k: final[k] / initial[k] if initial[k] > 0 else None for k in initial}
        return {"layer_mse_initial": initial, "layer_mse_final": final, "layer_mse_ratio": ratio,
                "val_loss": val_loss(student, self.val_set, self.schedule, cfg.seed)}

    def _finetune(self, d: Path) -> dict:
        cfg = self.cfg
        model, curve = global_finetune(self.load("distill"), self.train_set, self.val_set, self.schedule,
                                       cfg.finetune, val_seed=cfg.seed)
        self._save(model, d)
        curve.to_csv(d / "curve.csv")
        return {"val_loss": val_loss(model, self.val_set, self.schedule, cfg.seed), **curve.probe_final}

    def _hybridize(self, d: Path) -> dict:
        cfg = self.cfg
        teacher10 = self.load("finetune")
        plan = make_hybrid_plan(teacher10.depth, cfg.hybrid.n_dual, cfg.hybrid.mlp_init)
        hybrid = convert_hybrid(teacher10, plan, seed=cfg.seed)
        self._save(hybrid, d)
        _dump(d / "plan.json", plan.to_dict())
        n = min(32, len(self.val_set))
        t, eps = fixed_noise(n, self.val_set.images.shape[1:], self.schedule.T, cfg.seed)
        z = add_noise(self.val_set.images[:n], t, eps, self.schedule)
        return {
            "layout": list(hybrid.layout),
            "bridge_gap": bridge_gap(hybrid, teacher10, plan.n_dual, z, t, self.val_set.tokens[:n]),
            "val_loss": val_loss(hybrid, self.val_set, self.schedule, cfg.seed),
        }

    def _align(self, d: Path) -> dict:
        cfg = self.cfg
        hybrid = self.load("hybridize")
        teacher10 = self.load("finetune")
        plan = make_hybrid_plan(teacher10.depth, cfg.hybrid.n_dual, cfg.hybrid.mlp_init)
        model, curve = align_hybrid(hybrid, teacher10, self.train_set, plan, self.schedule, cfg.align,
                                    probe_set=self.val_set)
        self._save(model, d)
        curve.to_csv(d / "curve.csv")
        initial = {str(k): v for k, v in curve.probe_initial.items()}
        final = {str(k): v for k, v in curve.probe_final.items()}
        mean_i = float(np.mean(list(initial.values()))) if initial else None
        mean_f = float(np.mean(list(final.values()))) if final else None
        return {"layer_mse_initial": initial, "layer_mse_final": final, "mean_mse_initial": mean_i,
                "mean_mse_final": mean_f, "val_loss": val_loss(model, self.val_set, self.schedule, cfg.seed)}

    def _finetune_lite(self, d: Path) -> dict:
        cfg = self.cfg
        model, curve = lightweight_finetune(self.load("align"), self.train_set, self.val_set, self.schedule,
                                            cfg.finetune_lite, val_seed=cfg.seed)
        self._save(model, d)
        curve.to_csv(d / "curve.csv")
        return {"val_loss": val_loss(model, self.val_set, self.schedule, cfg.seed), **curve.probe_final}

    def _eval(self, d: Path) -> dict:
        cfg = self.cfg
        teacher = self.load("train-teacher")
        models = {
            "teacher": teacher,
            "pruned": self.load("prune"),
            "recovered": self.load("finetune"),
            "hybrid": self.load("finetune-lite"),
        }
        reports, timings = {}, {}
        for name, model in models.items():
            probe = cfg.eval.probe and name != "pruned"
            r = evaluate(model, self.val_set, self.schedule, cfg.seed, teacher=teacher, probe=False,
                         steps=cfg.eval.sample_steps)
            if probe:
                acc, images = prompt_match(model, self.schedule, cfg.seed, cfg.eval.sample_steps, return_images=True)
                r.prompt_match = acc
                write_ppm(d / f"samples_{name}.ppm", mosaic(images))
            timings[name] = r.wall_clock
            r.wall_clock = 0.0  # kept out of the hashed metrics
            reports[name] = json.loads(r.to_json())
        _dump(d / "metrics.json", reports)
        return {name: {k: reports[name][k] for k in ("val_loss", "teacher_gap", "prompt_match")} for name in reports}
