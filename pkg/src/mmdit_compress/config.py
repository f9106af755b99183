"""Pipeline configuration: one JSON document drives every stage."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .distill import TrainRunConfig
from .importance import DEFAULT_T_SUB, OMEGA_KINDS
from .model import ConfigError, ModelConfig


@dataclass
class DataConfig:
    n_train: int = 4096
    n_val: int = 512
    stratified: bool = False


@dataclass
class ScheduleConfig:
    T: int = 100
    kind: str = "cosine"
    s: float = 0.008


@dataclass
class ImportanceConfig:
    n_prompts: int = 64
    t_sub: tuple = DEFAULT_T_SUB
    omega: str = "linear"
    pure_noise: bool = False


@dataclass
class PruneConfig:
    target_keep: int = 6
    protected: list | None = None  # None: first and last layer


@dataclass
class HybridConfig:
    n_dual: int = 2
    mlp_init: str = "image"


@dataclass
class EvalConfig:
    sample_steps: int = 50
    probe: bool = True


def _run(steps, lr, seed, log_every=250) -> TrainRunConfig:
    return TrainRunConfig(steps=steps, lr=lr, seed=seed, log_every=log_every)


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    importance: ImportanceConfig = field(default_factory=ImportanceConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    hybrid: HybridConfig = field(default_factory=HybridConfig)
    teacher: TrainRunConfig = field(default_factory=lambda: _run(3000, 1e-3, 1))
    distill: TrainRunConfig = field(default_factory=lambda: _run(2000, 1e-3, 2))
    finetune: TrainRunConfig = field(default_factory=lambda: _run(5000, 3e-4, 3))
    align: TrainRunConfig = field(default_factory=lambda: _run(1500, 1e-3, 4))
    finetune_lite: TrainRunConfig = field(default_factory=lambda: _run(2500, 3e-4, 5))
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    SECTIONS = ("model", "data", "schedule", "importance", "prune", "hybrid", "teacher", "distill",
                "finetune", "align", "finetune_lite", "eval")

    @property
    def protected(self) -> list[int]:
        if self.prune.protected is None:
            return [0, self.model.depth - 1]
        return sorted(int(l) for l in self.prune.protected)

    def validate(self) -> None:
        m = self.model
        try:
            m.validate()
        except ConfigError as e:
            raise ConfigError(f"model: {e}") from None

        def need(ok: bool, name: str, expected: str, actual) -> None:
            if not ok:
                raise ConfigError(f"{name}: expected {expected}, got {actual!r}")

        need(set(m.layout) == {"dual"}, "model.layout", "an all-dual teacher", list(m.layout))
        need(self.schedule.T == m.timesteps, "schedule.T", f"model.timesteps ({m.timesteps})", self.schedule.T)
        need(self.schedule.kind == "cosine", "schedule.kind", "'cosine'", self.schedule.kind)
        need(self.data.n_train >= 1, "data.n_train", ">= 1", self.data.n_train)
        need(self.data.n_val >= 1, "data.n_val", ">= 1", self.data.n_val)
        imp = self.importance
        need(imp.n_prompts >= 1, "importance.n_prompts", ">= 1", imp.n_prompts)
        need(len(imp.t_sub) >= 1 and all(1 <= int(t) <= m.timesteps for t in imp.t_sub),
             "importance.t_sub", f"non-empty timesteps in [1, {m.timesteps}]", list(imp.t_sub))
        need(imp.omega in OMEGA_KINDS, "importance.omega", f"one of {OMEGA_KINDS}", imp.omega)
        prot = self.protected
        need(all(0 <= l < m.depth for l in prot), "prune.protected", f"layers in [0, {m.depth})", prot)
        need({0, m.depth - 1} <= set(prot), "prune.protected", "to include the first and last layer", prot)
        need(len(prot) <= self.prune.target_keep <= m.depth, "prune.target_keep",
             f"between {len(prot)} and {m.depth}", self.prune.target_keep)
        need(1 <= self.hybrid.n_dual <= self.prune.target_keep, "hybrid.n_dual",
             f"between 1 and prune.target_keep ({self.prune.target_keep})", self.hybrid.n_dual)
        need(self.hybrid.mlp_init in ("image", "random"), "hybrid.mlp_init", "'image' or 'random'",
             self.hybrid.mlp_init)
        for name in ("teacher", "distill", "finetune", "align", "finetune_lite"):
            run: TrainRunConfig = getattr(self, name)
            need(run.steps >= 0, f"{name}.steps", ">= 0", run.steps)
            need(run.lr > 0, f"{name}.lr", "> 0", run.lr)
            need(run.batch_size >= 1, f"{name}.batch_size", ">= 1", run.batch_size)
            need(all(0 <= l for l in run.frozen_layers), f"{name}.frozen_layers", "valid layer indices",
                 list(run.frozen_layers))
        need(self.eval.sample_steps >= 1, "eval.sample_steps", ">= 1", self.eval.sample_steps)

    def to_dict(self) -> dict:
        d = {name: _section_dict(getattr(self, name)) for name in self.SECTIONS}
        # the teacher is all-dual; its layout follows depth
        d["model"].pop("layout")
        d["output_dir"] = self.output_dir
        d["seed"] = self.seed
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - set(cls.SECTIONS) - {"output_dir", "seed"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        base = cls()
        kw = {}
        for name in cls.SECTIONS:
            if name in d:
                kw[name] = _build_section(name, type(getattr(base, name)), d[name], getattr(base, name))
        for k in ("output_dir", "seed"):
            if k in d:
                kw[k] = d[k]
        return cls(**kw)


def _section_dict(obj) -> dict:
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    d = dataclasses.asdict(obj)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _build_section(name: str, typ, values: dict, default):
    if not isinstance(values, dict):
        raise ConfigError(f"{name}: expected an object, got {type(values).__name__}")
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {sorted(unknown)}")
    if typ is ModelConfig:
        base = {k: v for k, v in default.to_dict().items() if k != "layout"}
        try:
            return ModelConfig.from_dict({**base, **values})
        except TypeError as e:
            raise ConfigError(f"model: {e}") from None
    merged = {**_section_dict(default), **values}
    try:
        return typ(**merged)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is read as JSON when it parses, else as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError(f"bad override key {key!r}")
    return path, value


def apply_overrides(d: dict, overrides) -> dict:
    d = json.loads(json.dumps(d))
    for text in overrides or ():
        path, value = parse_override(text)
        node = d
        for part in path[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {text!r}: {part!r} is not a config section")
            node = node[part]
        if path[-1] not in node:
            raise ConfigError(f"override {text!r}: unknown field {'.'.join(path)}")
        node[path[-1]] = value
    return d


def load_config(path=None, overrides=None) -> PipelineConfig:
    """Defaults, then the JSON file (if any), then ``--set`` overrides; validated."""
    d = PipelineConfig().to_dict()
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        d = _deep_merge(d, user)
    d = apply_overrides(d, overrides)
    cfg = PipelineConfig.from_dict(d)
    cfg.validate()
    return cfg


def _deep_merge(base: dict, top: dict) -> dict:
    out = dict(base)
    for k, v in top.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = v
    return out
