"""Recovery training: targeted layer-wise distillation and full fine-tuning
after pruning, progressive alignment and light fine-tuning after the hybrid
conversion."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .compress import HybridPlan, PrunePlan, distill_targets, partition_layers
from .data import SyntheticDataset
from .diffusion import NoiseSchedule, add_noise, diffusion_loss, make_batch
from .evaluate import fixed_noise, val_loss
from .model import DUAL, SINGLE, MMDiT, fuse, init_model, ModelConfig
from .optim import AdamW
from .tensor import Tape, Tensor, mse

log = logging.getLogger(__name__)


class AnchorError(RuntimeError):
    pass


@dataclass
class TrainRunConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    seed: int = 0
    log_every: int = 100
    frozen_layers: tuple[int, ...] = ()
    teacher_forced: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be positive")
        self.betas = tuple(self.betas)
        self.frozen_layers = tuple(self.frozen_layers)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        d["frozen_layers"] = list(self.frozen_layers)
        return d


@dataclass
class LossCurve:
    rows: list[dict] = field(default_factory=list)
    probe_initial: dict = field(default_factory=dict)
    probe_final: dict = field(default_factory=dict)

    def log(self, **row) -> None:
        self.rows.append(row)

    def column(self, key: str) -> list:
        return [r[key] for r in self.rows if key in r]

    def to_csv(self, path) -> None:
        keys: list[str] = []
        for r in self.rows:
            keys.extend(k for k in r if k not in keys)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r.get(k, "") for k in keys})


def _fill_missing_grads(params: dict[str, Tensor]) -> None:
    # weights that cannot reach the loss (e.g. the last dual block's text MLP) get a zero gradient
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def _snapshot(model: MMDiT) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in model.params.items()}


def _restore(model: MMDiT, snap: dict[str, np.ndarray]) -> None:
    for k, arr in snap.items():
        model.params[k].data = arr.copy()


def _trainable(model: MMDiT, frozen_layers) -> dict[str, Tensor]:
    frozen = set(model.block_param_names(frozen_layers))
    return {k: v for k, v in model.params.items() if k not in frozen}


def _sample_batch(ds: SyntheticDataset, schedule: NoiseSchedule, rng: np.random.Generator, size: int):
    idx = rng.integers(0, len(ds), size=size)
    return make_batch(ds.images[idx], ds.tokens[idx], schedule, rng)


def global_finetune(model: MMDiT, train_set: SyntheticDataset, val_set: SyntheticDataset,
                    schedule: NoiseSchedule, cfg: TrainRunConfig, val_seed: int = 0) -> tuple[MMDiT, LossCurve]:
    """Full-parameter epsilon-MSE training; returns the best-validation weights.

    The starting point counts as a candidate, so a run that never improves
    returns its input unchanged.
    """
    model = model.copy()
    curve = LossCurve()
    if cfg.steps == 0:
        return model, curve
    params = _trainable(model, cfg.frozen_layers)
    model.set_requires_grad(params)
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed)
    best = val_loss(model, val_set, schedule, val_seed)
    best_step, snap = 0, _snapshot(model)
    curve.log(step=0, val_loss=best)
    for step in range(1, cfg.steps + 1):
        batch = _sample_batch(train_set, schedule, rng, cfg.batch_size)
        with Tape() as tape:
            loss = diffusion_loss(model, batch)
        tape.backward(loss)
        _fill_missing_grads(params)
        opt.step()
        opt.zero_grad()
        row = {"step": step, "loss": loss.item()}
        if step % cfg.log_every == 0 or step == cfg.steps:
            v = val_loss(model, val_set, schedule, val_seed)
            row["val_loss"] = v
            if v < best:
                best, best_step, snap = v, step, _snapshot(model)
            log.info("step %d loss %.4f val %.4f", step, row["loss"], v)
        curve.log(**row)
    _restore(model, snap)
    model.set_requires_grad([], False)
    curve.probe_final = {"best_val_loss": best, "best_step": best_step}
    return model, curve


def lightweight_finetune(model: MMDiT, train_set: SyntheticDataset, val_set: SyntheticDataset,
                         schedule: NoiseSchedule, cfg: TrainRunConfig | None = None,
                         val_seed: int = 0) -> tuple[MMDiT, LossCurve]:
    cfg = cfg or TrainRunConfig(steps=2500, lr=3e-4)
    return global_finetune(model, train_set, val_set, schedule, cfg, val_seed)


def train_teacher(config: ModelConfig, train_set, val_set, schedule, cfg: TrainRunConfig,
                  init_seed: int = 0, val_seed: int = 0) -> tuple[MMDiT, LossCurve]:
    return global_finetune(init_model(config, init_seed), train_set, val_set, schedule, cfg, val_seed)


# ---------------------------------------------------------------- targeted distillation

def _probe_inputs(ds: SyntheticDataset, schedule: NoiseSchedule, n: int, seed: int):
    n = min(n, len(ds))
    t, eps = fixed_noise(n, ds.images.shape[1:], schedule.T, seed + 1)
    return add_noise(ds.images[:n], t, eps, schedule), t, ds.tokens[:n]


def _teacher_states(teacher: MMDiT, z, t, p, upto: int) -> tuple[list, object]:
    """[embed, after block 0, ..., after block upto]; index i + 1 is the state after block i."""
    state, cond = teacher.embed(z, t, p)
    states = [state]
    for l in range(upto + 1):
        state = teacher.run_block(l, state, cond)
        states.append(state)
    return states, cond


def _pair_mse(out, target) -> Tensor:
    return mse(out[0], target[0].data) + mse(out[1], target[1].data)


def _distill_terms(student: MMDiT, plan: PrunePlan, targets: dict[int, tuple[int, int]], teacher_states,
                   z, t, p, teacher_forced: bool) -> dict[int, Tensor]:
    _, cond = student.embed(z, t, p)
    terms = {}
    if teacher_forced:
        for s, (src, dst) in targets.items():
            out = student.run_block(s, teacher_states[src + 1], cond)
            terms[s] = _pair_mse(out, teacher_states[dst + 1])
    else:
        state = teacher_states[0]
        for s in range(max(targets) + 1):
            state = student.run_block(s, state, cond)
            if s in targets:
                terms[s] = _pair_mse(state, teacher_states[targets[s][1] + 1])
    return terms


def targeted_distill(student: MMDiT, teacher: MMDiT, train_set: SyntheticDataset, plan: PrunePlan,
                     schedule: NoiseSchedule, cfg: TrainRunConfig, probe_set: SyntheticDataset | None = None,
                     probe_size: int = 128) -> tuple[MMDiT, LossCurve]:
    """Train only the averaged (k > 0) student layers to reproduce the teacher's
    hidden state at the end of their cluster.

    With ``cfg.teacher_forced`` each trainable block is fed the teacher's
    hidden state from just before its cluster; otherwise the student runs
    end-to-end and the per-layer losses are taken along the way.  The loss is
    text-stream MSE plus image-stream MSE, summed over trainable layers.
    """
    if student.depth != plan.student_depth or teacher.depth != plan.depth:
        raise ValueError(
            f"plan {plan.depth}->{plan.student_depth} does not match teacher {teacher.depth} / student {student.depth}"
        )
    student = student.copy()
    curve = LossCurve()
    train_layers, _ = partition_layers(plan)
    if not train_layers or cfg.steps == 0:
        if not train_layers:
            log.warning("no re-initialised layers; targeted distillation is a no-op")
        return student, curve
    targets = distill_targets(plan)
    upto = max(dst for _, dst in targets.values())
    params = {k: student.params[k] for k in student.block_param_names(train_layers)}
    student.set_requires_grad(params)
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)

    probe = _probe_inputs(probe_set if probe_set is not None else train_set, schedule, probe_size, cfg.seed)
    probe_states, _ = _teacher_states(teacher, *probe, upto)

    def measure() -> dict:
        terms = _distill_terms(student, plan, targets, probe_states, *probe, cfg.teacher_forced)
        return {s: v.item() for s, v in terms.items()}

    curve.probe_initial = measure()
    rng = np.random.default_rng(cfg.seed)
    for step in range(1, cfg.steps + 1):
        batch = _sample_batch(train_set, schedule, rng, cfg.batch_size)
        states, _ = _teacher_states(teacher, batch.z_t, batch.t, batch.p, upto)
        with Tape() as tape:
            terms = _distill_terms(student, plan, targets, states, batch.z_t, batch.t, batch.p, cfg.teacher_forced)
            total = None
            for v in terms.values():
                total = v if total is None else total + v
        tape.backward(total)
        _fill_missing_grads(params)
        opt.step()
        opt.zero_grad()
        row = {"step": step, "loss": total.item()}
        row.update({f"layer_{s}": v.item() for s, v in terms.items()})
        if step % cfg.log_every == 0 or step == cfg.steps:
            row.update({f"probe_layer_{s}": v for s, v in measure().items()})
            log.info("distill step %d loss %.5f", step, row["loss"])
        curve.log(**row)
    curve.probe_final = measure()
    student.set_requires_grad([], False)
    return student, curve


# ---------------------------------------------------------------- hybrid alignment

def check_anchors(student: MMDiT, teacher: MMDiT, n_dual: int) -> None:
    """The embeddings and the first ``n_dual`` blocks must be bitwise teacher copies."""
    for name, t in student.params.items():
        if name.startswith("blocks."):
            if int(name.split(".")[1]) >= n_dual:
                continue
        elif name.startswith("head."):
            continue
        if name not in teacher.params or not np.array_equal(t.data, teacher.params[name].data):
            raise AnchorError(f"anchor parameter {name} differs from the teacher")


def bridge_gap(student: MMDiT, teacher: MMDiT, n_dual: int, z, t, p) -> float:
    """Max abs difference between the two models' states entering the first single block."""
    s_state, s_cond = student.embed(z, t, p)
    t_state, t_cond = teacher.embed(z, t, p)
    for l in range(n_dual):
        s_state = student.run_block(l, s_state, s_cond)
        t_state = teacher.run_block(l, t_state, t_cond)
    return float(np.abs(fuse(s_state).data - fuse(t_state).data).max())


def _align_terms(student: MMDiT, plan: HybridPlan, teacher_states, cond) -> dict[int, Tensor]:
    state = fuse(teacher_states[plan.n_dual])
    terms = {}
    for l in range(plan.n_dual, plan.depth):
        state = student.run_block(l, state, cond)
        target = fuse(teacher_states[l + 1])
        terms[l] = mse(state, target.data)
    return terms


def align_hybrid(student: MMDiT, teacher: MMDiT, train_set: SyntheticDataset, plan: HybridPlan,
                 schedule: NoiseSchedule, cfg: TrainRunConfig, probe_set: SyntheticDataset | None = None,
                 probe_size: int = 128) -> tuple[MMDiT, LossCurve]:
    """Train the single-stream tail to match Concat(text, image) teacher states
    layer by layer, with the dual-stream anchors (and everything else) frozen."""
    if student.layout != (DUAL,) * plan.n_dual + (SINGLE,) * plan.n_single or teacher.depth != plan.depth:
        raise ValueError("hybrid plan does not match the student/teacher layouts")
    check_anchors(student, teacher, plan.n_dual)
    student = student.copy()
    curve = LossCurve()
    if cfg.steps == 0 or plan.n_single == 0:
        return student, curve
    params = {k: student.params[k] for k in student.block_param_names(range(plan.n_dual, plan.depth))}
    student.set_requires_grad(params)
    opt = AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)

    probe = _probe_inputs(probe_set if probe_set is not None else train_set, schedule, probe_size, cfg.seed)
    probe_states, probe_cond = _teacher_states(teacher, *probe, teacher.depth - 1)
    _, probe_cond = student.embed(*probe)

    def measure() -> dict:
        return {l: v.item() for l, v in _align_terms(student, plan, probe_states, probe_cond).items()}

    curve.probe_initial = measure()
    rng = np.random.default_rng(cfg.seed)
    for step in range(1, cfg.steps + 1):
        batch = _sample_batch(train_set, schedule, rng, cfg.batch_size)
        states, _ = _teacher_states(teacher, batch.z_t, batch.t, batch.p, teacher.depth - 1)
        _, cond = student.embed(batch.z_t, batch.t, batch.p)
        with Tape() as tape:
            terms = _align_terms(student, plan, states, cond)
            total = None
            for v in terms.values():
                total = v if total is None else total + v
        tape.backward(total)
        _fill_missing_grads(params)
        opt.step()
        opt.zero_grad()
        row = {"step": step, "loss": total.item()}
        row.update({f"layer_{l}": v.item() for l, v in terms.items()})
        if step % cfg.log_every == 0 or step == cfg.steps:
            row.update({f"probe_layer_{l}": v for l, v in measure().items()})
            log.info("align step %d loss %.5f", step, row["loss"])
        curve.log(**row)
    curve.probe_final = measure()
    student.set_requires_grad([], False)
    return student, curve
