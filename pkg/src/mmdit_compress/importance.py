"""Ablation-based, timestep-weighted layer importance.

A layer's score is the weighted average, over probe timesteps, of the squared
L2 change in the predicted noise when that block is skipped, averaged over
the probe prompts.  Larger timesteps carry more weight by default, since
errors at high noise levels tend to break global structure.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import spearmanr

from .data import GRAMMAR, PromptGrammar, SyntheticDataset, render
from .diffusion import NoiseSchedule, add_noise
from .evaluate import val_loss
from .model import MMDiT, forward

OMEGA_KINDS = ("uniform", "linear", "quadratic")
DEFAULT_T_SUB = (10, 30, 50, 70, 90)


@dataclass
class TimestepWeighting:
    t_sub: tuple[int, ...] = DEFAULT_T_SUB
    kind: str = "linear"
    T: int = 100
    scale: float = 1.0  # a constant factor; scores are invariant to it

    def __post_init__(self):
        self.t_sub = tuple(sorted(int(t) for t in self.t_sub))
        if not self.t_sub:
            raise ValueError("empty timestep subset")
        if len(set(self.t_sub)) != len(self.t_sub):
            raise ValueError(f"duplicate timesteps in {self.t_sub}")
        if self.t_sub[0] < 1 or self.t_sub[-1] > self.T:
            raise ValueError(f"timesteps must lie in [1, {self.T}]")
        if self.kind not in OMEGA_KINDS:
            raise ValueError(f"unknown weighting {self.kind!r}; expected one of {OMEGA_KINDS}")
        if not self.scale > 0:
            raise ValueError("zero total timestep weight")

    def omega(self, t: int) -> float:
        x = t / self.T
        base = {"uniform": 1.0, "linear": x, "quadratic": x * x}[self.kind]
        return self.scale * base

    @property
    def weights(self) -> np.ndarray:
        w = np.array([self.omega(t) for t in self.t_sub], dtype=np.float64)
        if w.sum() <= 0:
            raise ValueError("zero total timestep weight")
        return w


@dataclass
class ImportanceReport:
    scores: list  # per layer; None for protected layers
    protected: list[int]
    table: np.ndarray  # (depth, |P|, |T_sub|) squared discrepancies, nan where unscored
    prompts: list[int]
    weighting: TimestepWeighting
    seed: int
    pure_noise: bool = False
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> dict:
        return {
            "seed": self.seed,
            "n_prompts": len(self.prompts),
            "prompts": list(self.prompts),
            "t_sub": list(self.weighting.t_sub),
            "omega": self.weighting.kind,
            "T": self.weighting.T,
            "pure_noise": self.pure_noise,
        }

    @property
    def fingerprint(self) -> str:
        return hashlib.sha256(json.dumps(self.config, sort_keys=True).encode()).hexdigest()[:16]

    def scored_layers(self) -> list[int]:
        return [l for l, s in enumerate(self.scores) if s is not None]

    def recompute(self) -> list:
        """Scores rebuilt from the table; used as a self-consistency check."""
        w = self.weighting.weights
        return [None if s is None else float((self.table[l] @ w / w.sum()).mean()) for l, s in enumerate(self.scores)]

    def to_dict(self) -> dict:
        return {
            "scores": self.scores,
            "protected": self.protected,
            "config": {**self.config, "fingerprint": self.fingerprint},
            "table": [[[None if np.isnan(v) else float(v) for v in row] for row in layer] for layer in self.table],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def _sq_norm(a: np.ndarray) -> np.ndarray:
    flat = a.reshape(len(a), -1).astype(np.float64)
    return (flat * flat).sum(axis=1)


def _ablation_mask(depth: int, l: int) -> np.ndarray:
    mask = np.zeros(depth, dtype=bool)
    mask[l] = True
    return mask


def layer_discrepancy(model: MMDiT, z_t, t, p, l: int) -> float:
    """Squared L2 distance between the full prediction and the prediction with block ``l`` skipped.

    Single sample: ``z_t`` is (H, W, C), ``t`` a scalar and ``p`` a token row.
    """
    if not 0 <= l < model.depth:
        raise IndexError(f"layer {l} out of range for depth {model.depth}")
    z = np.asarray(z_t)[None]
    tt = np.array([int(t)])
    pp = np.asarray(p)[None]
    full, _ = forward(model, z, tt, pp)
    cut, _ = forward(model, z, tt, pp, mask=_ablation_mask(model.depth, l))
    return float(_sq_norm(full.data - cut.data)[0])


def probe_inputs(prompts, weighting: TimestepWeighting, schedule: NoiseSchedule, seed: int,
                 pure_noise: bool = False, grammar: PromptGrammar = GRAMMAR, size: int = 16):
    """One z_t per (prompt position, t), each from its own seeded stream.

    Returns (z, t, tokens) flattened in (prompt, t) order.
    """
    zs, ts, toks = [], [], []
    for i, pid in enumerate(prompts):
        prompt = grammar.prompts[pid]
        for t in weighting.t_sub:
            rng = np.random.default_rng([seed, i, t])
            eps = rng.standard_normal((size, size, 3)).astype(np.float32)
            if pure_noise:
                z = eps
            else:
                x0 = render(prompt, int(rng.integers(0, 2**30)), size)
                z = add_noise(x0[None], np.array([t]), eps[None], schedule)[0]
            zs.append(z)
            ts.append(t)
            toks.append(grammar.tokens(prompt))
    return np.stack(zs), np.array(ts, dtype=np.int64), np.stack(toks)


def importance_scores(model: MMDiT, prompts, weighting: TimestepWeighting, schedule: NoiseSchedule,
                      seed: int = 0, protected=None, pure_noise: bool = False, batch_size: int = 160,
                      grammar: PromptGrammar = GRAMMAR) -> ImportanceReport:
    """Score every non-protected layer; protected layers get ``None``.

    ``protected`` defaults to the first and last layer.
    """
    prompts = [int(p) for p in prompts]
    if not prompts:
        raise ValueError("empty prompt set")
    w = weighting.weights
    depth = model.depth
    protected = sorted({0, depth - 1} if protected is None else {int(l) for l in protected})
    z, t, tok = probe_inputs(prompts, weighting, schedule, seed, pure_noise, grammar, model.config.image_size)
    n = len(z)

    def predict(mask=None) -> np.ndarray:
        out = []
        for s in range(0, n, batch_size):
            pred, _ = forward(model, z[s:s + batch_size], t[s:s + batch_size], tok[s:s + batch_size], mask=mask)
            out.append(pred.data)
        return np.concatenate(out)

    base = predict()
    table = np.full((depth, len(prompts), len(w)), np.nan)
    scores: list = [None] * depth
    for l in range(depth):
        if l in protected:
            continue
        d = _sq_norm(base - predict(_ablation_mask(depth, l))).reshape(len(prompts), len(w))
        table[l] = d
        scores[l] = float((d @ w / w.sum()).mean())
    return ImportanceReport(scores, protected, table, prompts, weighting, seed, pure_noise)


def select_prune_set(scores, target_keep: int, protected) -> tuple[list[int], list[int]]:
    """Remove the ``depth - target_keep`` lowest-scoring unprotected layers.

    ``scores`` is an ImportanceReport or a per-layer list (None for protected
    layers).  Equal scores prune the higher index first.
    """
    if isinstance(scores, ImportanceReport):
        scores = scores.scores
    depth = len(scores)
    protected = {int(l) for l in protected}
    if not protected <= set(range(depth)):
        raise ValueError(f"protected layers {sorted(protected)} outside range({depth})")
    if not len(protected) <= target_keep <= depth:
        raise ValueError(f"infeasible target: keep {target_keep} of {depth} with {len(protected)} protected")
    candidates = [l for l in range(depth) if l not in protected]
    missing = [l for l in candidates if scores[l] is None]
    if missing:
        raise ValueError(f"unprotected layers without a score: {missing}")
    candidates.sort(key=lambda l: (scores[l], -l))
    remove = sorted(candidates[: depth - target_keep])
    keep = [l for l in range(depth) if l not in remove]
    return keep, remove


@dataclass
class SensitivityResult:
    base_loss: float
    ablated: dict[int, float]  # layer -> val loss with that layer skipped
    delta: dict[int, float]
    spearman: float | None  # None when the correlation is undefined

    def to_dict(self) -> dict:
        return {
            "base_loss": self.base_loss,
            "ablated": {str(k): v for k, v in self.ablated.items()},
            "delta": {str(k): v for k, v in self.delta.items()},
            "spearman": self.spearman,
        }


def sensitivity_sanity(model: MMDiT, report: ImportanceReport, val_set: SyntheticDataset,
                       schedule: NoiseSchedule, seed: int = 0) -> SensitivityResult:
    """Validation loss with each scored layer skipped, and its rank correlation with the scores."""
    base = val_loss(model, val_set, schedule, seed)
    layers = report.scored_layers()
    ablated = {l: val_loss(model, val_set, schedule, seed, mask=_ablation_mask(model.depth, l)) for l in layers}
    delta = {l: ablated[l] - base for l in layers}
    x = np.array([report.scores[l] for l in layers])
    y = np.array([delta[l] for l in layers])
    rho = None
    if len(layers) >= 2 and np.ptp(x) > 0 and np.ptp(y) > 0:
        rho = float(spearmanr(x, y).statistic)
    return SensitivityResult(base, ablated, delta, rho)
