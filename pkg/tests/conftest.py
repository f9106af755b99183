import numpy as np
import pytest

from mmdit_compress.data import gen_dataset
from mmdit_compress.diffusion import make_schedule
from mmdit_compress.model import DUAL, MMDiT, ModelConfig, init_model, param_specs
from mmdit_compress.tensor import Tensor


def small_config(depth=4, layout=None, **kw) -> ModelConfig:
    base = dict(depth=depth, d_model=32, n_heads=4, mlp_hidden=64, timestep_dim=32)
    base.update(kw)
    if layout is not None:
        base["layout"] = tuple(layout)
    return ModelConfig(**base)


def randomize(model: MMDiT, seed=0, scale=0.05) -> MMDiT:
    """Open the zero-init gates and head so every block contributes."""
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if ".mod." in name or name.startswith("head."):
            p.data = (rng.standard_normal(p.shape) * scale).astype(np.float32)
    return model


def random_model(depth=4, layout=None, seed=0, **kw) -> MMDiT:
    return randomize(init_model(small_config(depth, layout, **kw), seed), seed + 100)


def random_inputs(cfg: ModelConfig, n=4, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32)
    t = rng.integers(1, cfg.timesteps + 1, size=n)
    p = rng.integers(0, cfg.text_vocab, size=(n, cfg.text_len))
    return z, t, p


def remove_layer(model: MMDiT, l: int) -> MMDiT:
    """Structurally drop block ``l``; later blocks shift down by one."""
    cfg = model.config
    layout = tuple(k for i, k in enumerate(cfg.layout) if i != l)
    new_cfg = cfg.replace(depth=cfg.depth - 1, layout=layout)
    params = {}
    for name, p in model.params.items():
        if name.startswith("blocks."):
            parts = name.split(".")
            i = int(parts[1])
            if i == l:
                continue
            parts[1] = str(i - 1 if i > l else i)
            name = ".".join(parts)
        params[name] = Tensor(p.data.copy(), name=name)
    order = [n for n, *_ in param_specs(new_cfg)]
    return MMDiT(new_cfg, {n: params[n] for n in order})


@pytest.fixture(scope="session")
def schedule():
    return make_schedule()


@pytest.fixture(scope="session")
def tiny_data():
    return gen_dataset(96, "train", seed=0), gen_dataset(48, "val", seed=0)


__all__ = ["DUAL", "small_config", "randomize", "random_model", "random_inputs", "remove_layer"]


def tiny_pipeline_dict(out) -> dict:
    """A full pipeline that finishes in seconds; shapes differ from the default only in size."""
    run = lambda steps, seed: {"steps": steps, "batch_size": 8, "lr": 1e-3, "log_every": 5, "seed": seed}
    return {
        "model": {"depth": 4, "d_model": 32, "n_heads": 4, "mlp_hidden": 64, "timestep_dim": 32},
        "data": {"n_train": 64, "n_val": 32},
        "importance": {"n_prompts": 4, "t_sub": [30, 70]},
        "prune": {"target_keep": 3},
        "hybrid": {"n_dual": 1},
        "teacher": run(20, 1),
        "distill": run(10, 2),
        "finetune": run(10, 3),
        "align": run(10, 4),
        "finetune_lite": run(10, 5),
        "eval": {"sample_steps": 2},
        "output_dir": str(out),
        "seed": 0,
    }


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        ok, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
