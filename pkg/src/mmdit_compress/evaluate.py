"""Fixed-noise fidelity metrics and the nearest-canonical prompt probe."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import GRAMMAR, PromptGrammar, SyntheticDataset, canonical_renders
from .diffusion import NoiseSchedule, add_noise, sample
from .model import MMDiT, forward, parameter_count


def fixed_noise(n: int, shape: tuple[int, ...], T: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-item (t, eps), a pure function of ``seed`` and the item count."""
    rng = np.random.default_rng([seed, 0xE7A1])
    t = rng.integers(1, T + 1, size=n)
    eps = rng.standard_normal((n,) + tuple(shape)).astype(np.float32)
    return t, eps


def _batches(n: int, size: int):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


def val_loss(model: MMDiT, val_set: SyntheticDataset, schedule: NoiseSchedule, seed: int = 0, mask=None,
             batch_size: int = 128) -> float:
    """Mean epsilon-MSE over the validation set with seeded (t, eps) per item."""
    n = len(val_set)
    if n == 0:
        raise ValueError("empty validation set")
    t, eps = fixed_noise(n, val_set.images.shape[1:], schedule.T, seed)
    z = add_noise(val_set.images, t, eps, schedule)
    total = 0.0
    for sl in _batches(n, batch_size):
        pred, _ = forward(model, z[sl], t[sl], val_set.tokens[sl], mask=mask)
        diff = pred.data.astype(np.float64) - eps[sl]
        total += float((diff * diff).sum())
    return total / eps.size


def _check_compatible(a: MMDiT, b: MMDiT) -> None:
    ca, cb = a.config, b.config
    for f in ("image_size", "channels", "text_len", "text_vocab", "timesteps"):
        if getattr(ca, f) != getattr(cb, f):
            raise ValueError(f"models disagree on {f}: {getattr(ca, f)} vs {getattr(cb, f)}")


def teacher_gap(student: MMDiT, teacher: MMDiT, val_set: SyntheticDataset, schedule: NoiseSchedule,
                seed: int = 0, batch_size: int = 128) -> float:
    """Mean squared difference of the two models' noise predictions on identical inputs."""
    _check_compatible(student, teacher)
    n = len(val_set)
    t, eps = fixed_noise(n, val_set.images.shape[1:], schedule.T, seed)
    z = add_noise(val_set.images, t, eps, schedule)
    total = 0.0
    for sl in _batches(n, batch_size):
        a, _ = forward(student, z[sl], t[sl], val_set.tokens[sl])
        b, _ = forward(teacher, z[sl], t[sl], val_set.tokens[sl])
        diff = a.data.astype(np.float64) - b.data.astype(np.float64)
        total += float((diff * diff).sum())
    return total / eps.size


def classify(images: np.ndarray, grammar: PromptGrammar = GRAMMAR) -> np.ndarray:
    """Index of the nearest canonical render (L2) for each image."""
    protos = canonical_renders(grammar, images.shape[1]).reshape(len(grammar.prompts), -1).astype(np.float64)
    flat = images.reshape(len(images), -1).astype(np.float64)
    d = (flat**2).sum(1)[:, None] - 2 * flat @ protos.T + (protos**2).sum(1)[None, :]
    return d.argmin(axis=1)


def prompt_match(model: MMDiT, schedule: NoiseSchedule, sample_seed: int = 0, steps: int = 50,
                 grammar: PromptGrammar = GRAMMAR, return_images: bool = False):
    """Sample once per grammar prompt; fraction classified back to their prompt."""
    tokens = np.stack([grammar.tokens(p) for p in grammar.prompts])
    images = sample(model, tokens, schedule, steps=steps, seed=sample_seed)
    acc = float((classify(images, grammar) == np.arange(len(tokens))).mean())
    return (acc, images) if return_images else acc


@dataclass
class EvalReport:
    model_hash: str
    val_loss: float
    teacher_gap: float | None
    prompt_match: float | None
    ablation_delta: list | None
    params: dict
    wall_clock: float
    extra: dict = field(default_factory=dict)

    def validate(self) -> None:
        if not np.isfinite(self.val_loss) or self.val_loss < 0:
            raise ValueError(f"invalid val loss {self.val_loss}")
        if self.prompt_match is not None and not 0.0 <= self.prompt_match <= 1.0:
            raise ValueError(f"accuracy {self.prompt_match} outside [0, 1]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)


def evaluate(model: MMDiT, val_set: SyntheticDataset, schedule: NoiseSchedule, seed: int = 0,
             teacher: MMDiT | None = None, probe: bool = True, steps: int = 50) -> EvalReport:
    from .checkpoint import model_hash

    start = time.perf_counter()
    report = EvalReport(
        model_hash=model_hash(model),
        val_loss=val_loss(model, val_set, schedule, seed),
        teacher_gap=teacher_gap(model, teacher, val_set, schedule, seed) if teacher is not None else None,
        prompt_match=prompt_match(model, schedule, seed, steps) if probe else None,
        ablation_delta=None,
        params=parameter_count(model),
        wall_clock=0.0,
    )
    report.wall_clock = time.perf_counter() - start
    report.validate()
    return report
