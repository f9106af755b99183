"""Weight-space surgery: depth pruning with local weight averaging, and
conversion of the deep dual-stream blocks into single-stream blocks seeded
from the image stream."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .model import DUAL, SINGLE, STREAM_KEYS, MMDiT, param_specs
from .tensor import Tensor


class PlanError(ValueError):
    pass


@dataclass
class PrunePlan:
    depth: int
    keep: list[int]
    remove: list[int]
    clusters: dict[int, int]  # kept layer -> number of removed layers right after it
    new_index: dict[int, int]  # kept layer -> position in the student

    @property
    def student_depth(self) -> int:
        return len(self.keep)

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "keep": self.keep,
            "remove": self.remove,
            "clusters": {str(l): k for l, k in self.clusters.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "PrunePlan":
        plan = build_prune_plan(d["keep"], d["remove"], d["depth"])
        if "clusters" in d and {int(k): v for k, v in d["clusters"].items()} != plan.clusters:
            raise PlanError("stored clusters disagree with the keep/remove partition")
        return plan


def build_prune_plan(keep, remove, depth: int) -> PrunePlan:
    keep, remove = sorted(int(l) for l in keep), sorted(int(l) for l in remove)
    if set(keep) & set(remove):
        raise PlanError(f"layers both kept and removed: {sorted(set(keep) & set(remove))}")
    if sorted(keep + remove) != list(range(depth)):
        raise PlanError(f"keep/remove do not partition range({depth})")
    for protected in (0, depth - 1):
        if protected in remove:
            raise PlanError(f"protected layer pruned: {protected}")
    removed = set(remove)
    clusters = {}
    for l in keep:
        k = 0
        while l + k + 1 in removed:
            k += 1
        clusters[l] = k
    covered = sum(clusters.values())
    if covered != len(remove):
        raise PlanError(f"clusters cover {covered} removed layers, expected {len(remove)}")
    return PrunePlan(depth, keep, remove, clusters, {l: i for i, l in enumerate(keep)})


def partition_layers(plan: PrunePlan) -> tuple[list[int], list[int]]:
    """Student indices of re-initialised (k > 0) and untouched (k = 0) layers."""
    train = [plan.new_index[l] for l in plan.keep if plan.clusters[l] > 0]
    frozen = [plan.new_index[l] for l in plan.keep if plan.clusters[l] == 0]
    return train, frozen


def distill_targets(plan: PrunePlan) -> dict[int, tuple[int, int]]:
    """Student layer -> (teacher input layer, teacher target layer) for each trainable layer.

    The input layer is the teacher block whose output feeds the cluster
    (-1 meaning the embeddings); the target is the last block of the cluster.
    """
    out = {}
    for l in plan.keep:
        k = plan.clusters[l]
        if k > 0:
            out[plan.new_index[l]] = (l - 1, l + k)
    return out


def _global_names(model: MMDiT) -> list[str]:
    return [k for k in model.params if not k.startswith("blocks.")]


def apply_depth_prune(teacher: MMDiT, plan: PrunePlan) -> MMDiT:
    """Student whose block at ``new_index[l]`` is the elementwise mean of
    teacher blocks ``l .. l + k``; everything outside the blocks is copied."""
    if plan.depth != teacher.depth:
        raise PlanError(f"plan is for depth {plan.depth}, teacher has {teacher.depth}")
    if set(teacher.layout) != {DUAL}:
        raise PlanError("depth pruning expects an all-dual teacher")
    cfg = teacher.config.replace(depth=plan.student_depth, layout=(DUAL,) * plan.student_depth)
    arrays = {k: teacher.params[k].data.copy() for k in _global_names(teacher)}
    for l in plan.keep:
        k = plan.clusters[l]
        s = plan.new_index[l]
        for name in teacher.block_params(l):
            if k == 0:
                arrays[f"blocks.{s}.{name}"] = teacher.params[f"blocks.{l}.{name}"].data.copy()
            else:
                stack = np.stack([teacher.params[f"blocks.{l + j}.{name}"].data for j in range(k + 1)])
                arrays[f"blocks.{s}.{name}"] = stack.astype(np.float64).mean(axis=0).astype(np.float32)
    params = {name: Tensor(arrays[name], name=name) for name, _, _ in param_specs(cfg)}
    return MMDiT(cfg, params)


@dataclass
class HybridPlan:
    n_dual: int
    n_single: int
    source: dict[int, int] = field(default_factory=dict)  # student single layer -> teacher layer
    mlp_init: str = "image"  # or "random": fresh MLP weights in the single blocks

    def __post_init__(self):
        if self.n_dual < 1:
            raise PlanError(f"n_dual must be >= 1, got {self.n_dual}")
        if self.n_single < 0:
            raise PlanError(f"n_single must be >= 0, got {self.n_single}")
        if not self.source:
            self.source = {l: l for l in range(self.n_dual, self.n_dual + self.n_single)}
        if self.mlp_init not in ("image", "random"):
            raise PlanError(f"unknown mlp_init {self.mlp_init!r}")

    @property
    def depth(self) -> int:
        return self.n_dual + self.n_single

    def to_dict(self) -> dict:
        return {"n_dual": self.n_dual, "n_single": self.n_single,
                "source": {str(k): v for k, v in self.source.items()}, "mlp_init": self.mlp_init}


def make_hybrid_plan(depth: int, n_dual: int, mlp_init: str = "image") -> HybridPlan:
    if not 1 <= n_dual <= depth:
        raise PlanError(f"n_dual must be in [1, {depth}], got {n_dual}")
    return HybridPlan(n_dual, depth - n_dual, mlp_init=mlp_init)


def convert_hybrid(teacher: MMDiT, plan: HybridPlan, seed: int = 0) -> MMDiT:
    """First ``n_dual`` blocks copied as-is; the rest become single-stream
    blocks whose every weight is copied from the teacher's image stream."""
    if set(teacher.layout) != {DUAL}:
        raise PlanError("hybrid conversion expects an all-dual teacher")
    if plan.depth != teacher.depth:
        raise PlanError(f"plan covers {plan.depth} layers, teacher has {teacher.depth}")
    layout = (DUAL,) * plan.n_dual + (SINGLE,) * plan.n_single
    cfg = teacher.config.replace(layout=layout)
    arrays = {k: teacher.params[k].data.copy() for k in _global_names(teacher)}
    for l in range(plan.n_dual):
        for name, t in teacher.block_params(l).items():
            arrays[f"blocks.{l}.{name}"] = t.data.copy()
    rng = np.random.default_rng(seed)
    for l in range(plan.n_dual, plan.depth):
        src = plan.source[l]
        for key in STREAM_KEYS:
            arr = teacher.params[f"blocks.{src}.img.{key}"].data.copy()
            if plan.mlp_init == "random" and key.startswith("mlp."):
                arr = np.zeros_like(arr) if key.endswith(("b1", "b2")) else (
                    rng.standard_normal(arr.shape) * 0.02).astype(np.float32)
            arrays[f"blocks.{l}.{key}"] = arr
    params = {name: Tensor(arrays[name], name=name) for name, _, _ in param_specs(cfg)}
    return MMDiT(cfg, params)
