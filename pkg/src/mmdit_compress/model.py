"""A small MMDiT: dual-stream joint-attention blocks, optional single-stream
tail, AdaLN-zero modulation from a timestep embedding, pixel patches in and
out.

Parameters live in one flat ``dict[str, Tensor]`` with hierarchical names
(``blocks.3.img.attn.wq``).  Dual blocks hold a ``txt.`` and an ``img.``
copy of every stream weight; single blocks hold one unprefixed copy
(``blocks.9.attn.wq``).  A dual block has no shared weights, so it costs
exactly two single blocks.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    Tensor,
    add_positional,
    concat,
    embedding,
    gated_residual,
    gelu,
    layernorm,
    linear,
    matmul,
    modulate,
    mul,
    reshape,
    silu,
    softmax,
    split,
    transpose,
)

DUAL = "dual"
SINGLE = "single"

STREAM_KEYS = (
    "mod.w", "mod.b",
    "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv", "attn.wo", "attn.bo",
    "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2",
)
ATTN_KEYS = ("attn.wq", "attn.wk", "attn.wv", "attn.wo")


class ConfigError(ValueError):
    pass


def validate_layout(layout: Sequence[str]) -> tuple[str, ...]:
    layout = tuple(layout)
    for kind in layout:
        if kind not in (DUAL, SINGLE):
            raise ConfigError(f"unknown block kind {kind!r}")
    if SINGLE in layout and DUAL in layout[layout.index(SINGLE):]:
        raise ConfigError(f"layout {list(layout)} has a dual block after a single block")
    return layout


@dataclass
class ModelConfig:
    depth: int = 12
    d_model: int = 64
    n_heads: int = 4
    mlp_hidden: int = 256
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    text_vocab: int = 32
    text_len: int = 6
    timestep_dim: int = 64
    timesteps: int = 100
    layout: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if not self.layout:
            self.layout = (DUAL,) * self.depth
        self.layout = tuple(self.layout)
        self.validate()

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.timestep_dim % 2:
            raise ConfigError("timestep_dim must be even")
        if len(self.layout) != self.depth:
            raise ConfigError(f"layout has {len(self.layout)} entries for depth {self.depth}")
        validate_layout(self.layout)

    @property
    def n_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def n_dual(self) -> int:
        return self.layout.count(DUAL)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layout"] = list(self.layout)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config fields {sorted(extra)}")
        return cls(**d)

    def replace(self, **kw) -> "ModelConfig":
        d = self.to_dict()
        d.update(kw)
        if "depth" in kw and "layout" not in kw:
            d["layout"] = ()
        return ModelConfig.from_dict(d)


# ---------------------------------------------------------------- parameter shapes

def _stream_shapes(cfg: ModelConfig) -> dict[str, tuple[tuple[int, ...], str]]:
    d, h = cfg.d_model, cfg.mlp_hidden
    return {
        "mod.w": ((d, 6 * d), "zeros"),
        "mod.b": ((6 * d,), "zeros"),
        "attn.wq": ((d, d), "normal"),
        "attn.bq": ((d,), "zeros"),
        "attn.wk": ((d, d), "normal"),
        "attn.bk": ((d,), "zeros"),
        "attn.wv": ((d, d), "normal"),
        "attn.bv": ((d,), "zeros"),
        "attn.wo": ((d, d), "normal"),
        "attn.bo": ((d,), "zeros"),
        "mlp.w1": ((d, h), "normal"),
        "mlp.b1": ((h,), "zeros"),
        "mlp.w2": ((h, d), "normal"),
        "mlp.b2": ((d,), "zeros"),
    }


def block_prefixes(cfg: ModelConfig, l: int) -> tuple[str, ...]:
    if cfg.layout[l] == DUAL:
        return (f"blocks.{l}.txt.", f"blocks.{l}.img.")
    return (f"blocks.{l}.",)


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init) for every parameter, in canonical order."""
    d = cfg.d_model
    specs = [
        ("txt_embed", (cfg.text_vocab, d), "normal"),
        ("txt_pos", (cfg.text_len, d), "normal"),
        ("img_in.w", (cfg.patch_dim, d), "normal"),
        ("img_in.b", (d,), "zeros"),
        ("img_pos", (cfg.n_patches, d), "normal"),
        ("t_mlp.w1", (cfg.timestep_dim, d), "normal"),
        ("t_mlp.b1", (d,), "zeros"),
        ("t_mlp.w2", (d, d), "normal"),
        ("t_mlp.b2", (d,), "zeros"),
    ]
    stream = _stream_shapes(cfg)
    for l in range(cfg.depth):
        for pre in block_prefixes(cfg, l):
            specs.extend((pre + k, shape, init) for k, (shape, init) in stream.items())
    specs += [
        ("head.mod.w", (d, 2 * d), "zeros"),
        ("head.mod.b", (2 * d,), "zeros"),
        ("head.proj.w", (d, cfg.patch_dim), "zeros"),
        ("head.proj.b", (cfg.patch_dim,), "zeros"),
    ]
    return specs


# ---------------------------------------------------------------- model

@dataclass
class Cond:
    c: Tensor
    act: Tensor  # silu(c), fed to every modulation projection


@dataclass
class HiddenTrace:
    """Post-block hidden states.

    Dual layers map to a ``(txt, img)`` pair, single layers to the fused
    ``(B, text_len + n_patches, d)`` sequence.  ``embed`` is the input to
    layer 0 (always a pair).
    """

    layers: dict[int, object] = field(default_factory=dict)
    embed: tuple[Tensor, Tensor] | None = None


class MMDiT:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        expected = [name for name, _, _ in param_specs(config)]
        if list(params) != expected:
            missing = sorted(set(expected) - set(params))
            extra = sorted(set(params) - set(expected))
            raise ConfigError(f"parameter set mismatch: missing {missing[:4]}, unexpected {extra[:4]}")

    @property
    def depth(self) -> int:
        return self.config.depth

    @property
    def layout(self) -> tuple[str, ...]:
        return self.config.layout

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def block_params(self, l: int) -> dict[str, Tensor]:
        pre = f"blocks.{l}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def block_param_names(self, layers) -> list[str]:
        layers = set(layers)
        return [k for k in self.params if k.startswith("blocks.") and int(k.split(".")[1]) in layers]

    def copy(self) -> "MMDiT":
        params = {k: Tensor(v.data.copy(), name=k) for k, v in self.params.items()}
        return MMDiT(copy.deepcopy(self.config), params)

    def astype(self, dtype) -> "MMDiT":
        params = {k: Tensor(v.data.astype(dtype), name=k, dtype=dtype) for k, v in self.params.items()}
        return MMDiT(copy.deepcopy(self.config), params)

    def set_requires_grad(self, names=None, flag: bool = True) -> None:
        names = self.params if names is None else names
        for k in self.params:
            self.params[k].requires_grad = False
        for k in names:
            self.params[k].requires_grad = flag

    # -- pieces of the forward pass; exposed so distillation can replay sub-ranges

    def check_inputs(self, z_t, t, p) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cfg = self.config
        z_t = np.asarray(z_t)
        t = np.asarray(t)
        p = np.asarray(p)
        want = (cfg.image_size, cfg.image_size, cfg.channels)
        if z_t.ndim != 4 or z_t.shape[1:] != want:
            raise ValueError(f"z_t must be (B, {want[0]}, {want[1]}, {want[2]}), got {z_t.shape}")
        B = z_t.shape[0]
        if t.shape != (B,):
            raise ValueError(f"t must have shape ({B},), got {t.shape}")
        if t.min() < 1 or t.max() > cfg.timesteps:
            raise ValueError(f"timestep out of range [1, {cfg.timesteps}]")
        if p.shape != (B, cfg.text_len):
            raise ValueError(f"prompt tokens must be ({B}, {cfg.text_len}), got {p.shape}")
        if p.min() < 0 or p.max() >= cfg.text_vocab:
            raise ValueError(f"token id out of range [0, {cfg.text_vocab})")
        return z_t, t, p

    def embed(self, z_t, t, p) -> tuple[tuple[Tensor, Tensor], Cond]:
        cfg = self.config
        P = self.params
        z_t, t, p = self.check_inputs(z_t, t, p)
        dtype = P["img_in.w"].dtype
        txt = add_positional(embedding(P["txt_embed"], p), P["txt_pos"])
        patches = Tensor(patchify(z_t.astype(dtype, copy=False), cfg.patch_size))
        img = add_positional(linear(patches, P["img_in.w"], P["img_in.b"]), P["img_pos"])
        temb = Tensor(timestep_embedding(t, cfg.timestep_dim).astype(dtype))
        c = linear(silu(linear(temb, P["t_mlp.w1"], P["t_mlp.b1"])), P["t_mlp.w2"], P["t_mlp.b2"])
        return (txt, img), Cond(c, silu(c))

    def _mods(self, pre: str, cond: Cond) -> list[Tensor]:
        d = self.config.d_model
        m = linear(cond.act, self.params[pre + "mod.w"], self.params[pre + "mod.b"])
        return split(m, [d] * 6, axis=1)

    def _mlp(self, pre: str, x: Tensor) -> Tensor:
        P = self.params
        return linear(gelu(linear(x, P[pre + "mlp.w1"], P[pre + "mlp.b1"])), P[pre + "mlp.w2"], P[pre + "mlp.b2"])

    def _qkv(self, pre: str, x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        P = self.params
        return (
            linear(x, P[pre + "attn.wq"], P[pre + "attn.bq"]),
            linear(x, P[pre + "attn.wk"], P[pre + "attn.bk"]),
            linear(x, P[pre + "attn.wv"], P[pre + "attn.bv"]),
        )

    def _attend(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        B, L, d = q.shape
        H = self.config.n_heads
        dh = d // H

        def heads(x):
            return transpose(reshape(x, (B, L, H, dh)), (0, 2, 1, 3))

        q = mul(heads(q), 1.0 / math.sqrt(dh))
        a = softmax(matmul(q, transpose(heads(k), (0, 1, 3, 2))))
        o = matmul(a, heads(v))
        return reshape(transpose(o, (0, 2, 1, 3)), (B, L, d))

    def _dual_block(self, l: int, txt: Tensor, img: Tensor, cond: Cond) -> tuple[Tensor, Tensor]:
        P = self.params
        pt, pi = f"blocks.{l}.txt.", f"blocks.{l}.img."
        mt, mi = self._mods(pt, cond), self._mods(pi, cond)
        qt, kt, vt = self._qkv(pt, modulate(layernorm(txt), mt[0], mt[1]))
        qi, ki, vi = self._qkv(pi, modulate(layernorm(img), mi[0], mi[1]))
        o = self._attend(concat([qt, qi], 1), concat([kt, ki], 1), concat([vt, vi], 1))
        ot, oi = split(o, [txt.shape[1], img.shape[1]], axis=1)
        txt = gated_residual(txt, mt[2], linear(ot, P[pt + "attn.wo"], P[pt + "attn.bo"]))
        img = gated_residual(img, mi[2], linear(oi, P[pi + "attn.wo"], P[pi + "attn.bo"]))
        txt = gated_residual(txt, mt[5], self._mlp(pt, modulate(layernorm(txt), mt[3], mt[4])))
        img = gated_residual(img, mi[5], self._mlp(pi, modulate(layernorm(img), mi[3], mi[4])))
        return txt, img

    def _single_block(self, l: int, x: Tensor, cond: Cond) -> Tensor:
        P = self.params
        pre = f"blocks.{l}."
        m = self._mods(pre, cond)
        q, k, v = self._qkv(pre, modulate(layernorm(x), m[0], m[1]))
        o = self._attend(q, k, v)
        x = gated_residual(x, m[2], linear(o, P[pre + "attn.wo"], P[pre + "attn.bo"]))
        return gated_residual(x, m[5], self._mlp(pre, modulate(layernorm(x), m[3], m[4])))

    def run_block(self, l: int, state, cond: Cond):
        """Apply block ``l``.  A pair entering a single block is fused as Concat(text, image)."""
        if self.layout[l] == DUAL:
            if not isinstance(state, tuple):
                raise ValueError(f"dual block {l} needs a (txt, img) pair")
            return self._dual_block(l, state[0], state[1], cond)
        return self._single_block(l, fuse(state), cond)

    def decode(self, state, cond: Cond) -> Tensor:
        cfg = self.config
        P = self.params
        if isinstance(state, tuple):
            img = state[1]
        else:
            img = split(state, [cfg.text_len, cfg.n_patches], axis=1)[1]
        shift, scale = split(linear(cond.act, P["head.mod.w"], P["head.mod.b"]), [cfg.d_model] * 2, axis=1)
        out = linear(modulate(layernorm(img), shift, scale), P["head.proj.w"], P["head.proj.b"])
        return unpatchify_tensor(out, cfg.image_size, cfg.patch_size, cfg.channels)


def fuse(state) -> Tensor:
    if isinstance(state, tuple):
        return concat([state[0], state[1]], axis=1)
    return state


# ---------------------------------------------------------------- helpers

def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1)


def patchify(x: np.ndarray, p: int) -> np.ndarray:
    B, H, W, C = x.shape
    x = x.reshape(B, H // p, p, W // p, p, C).transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(B, (H // p) * (W // p), p * p * C))


def unpatchify(x: np.ndarray, size: int, p: int, channels: int) -> np.ndarray:
    B = x.shape[0]
    g = size // p
    x = x.reshape(B, g, g, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, size, size, channels)


def unpatchify_tensor(x: Tensor, size: int, p: int, channels: int) -> Tensor:
    B = x.shape[0]
    g = size // p
    x = transpose(reshape(x, (B, g, g, p, p, channels)), (0, 1, 3, 2, 4, 5))
    return reshape(x, (B, size, size, channels))


# ---------------------------------------------------------------- public API

def init_model(config: ModelConfig, seed: int = 0, std: float = 0.02) -> MMDiT:
    """Normal(0, std) weights, zero biases, zero AdaLN projections and output head."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape, init in param_specs(config):
        if init == "normal":
            data = (rng.standard_normal(shape) * std).astype(np.float32)
        else:
            data = np.zeros(shape, dtype=np.float32)
        params[name] = Tensor(data, name=name)
    return MMDiT(config, params)


def check_mask(model: MMDiT, mask) -> np.ndarray | None:
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (model.depth,):
        raise ValueError(f"mask has length {mask.size}, model depth is {model.depth}")
    return mask


def forward(model: MMDiT, z_t, t, p, mask=None, trace: bool = False):
    """Predict the noise in ``z_t``.  Returns ``(eps_pred, HiddenTrace | None)``.

    A set mask bit ``mask[l]`` skips block ``l`` so the hidden state passes
    through unchanged (the residual contribution is truncated).
    """
    mask = check_mask(model, mask)
    state, cond = model.embed(z_t, t, p)
    tr = HiddenTrace(embed=state) if trace else None
    for l in range(model.depth):
        if mask is None or not mask[l]:
            state = model.run_block(l, state, cond)
        elif model.layout[l] == SINGLE:
            state = fuse(state)
        if tr is not None:
            tr.layers[l] = state
    return model.decode(state, cond), tr


def capture_hidden(model: MMDiT, z_t, t, p, layer_indices) -> HiddenTrace:
    idx = sorted(set(int(i) for i in layer_indices))
    for i in idx:
        if not 0 <= i < model.depth:
            raise IndexError(f"layer {i} out of range for depth {model.depth}")
    out = HiddenTrace()
    if not idx:
        return out
    state, cond = model.embed(z_t, t, p)
    out.embed = state
    for l in range(idx[-1] + 1):
        state = model.run_block(l, state, cond)
        if l in idx:
            out.layers[l] = state
    return out


def replay(model: MMDiT, state, cond: Cond, start: int, stop: int | None = None):
    """Run blocks ``start .. stop-1`` from a given hidden state."""
    stop = model.depth if stop is None else stop
    for l in range(start, stop):
        state = model.run_block(l, state, cond)
    return state


def stream_param_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for shape, _ in _stream_shapes(cfg).values())


def parameter_count(model_or_config) -> dict:
    """Exact parameter counts by component, from the config's closed form."""
    cfg = model_or_config.config if isinstance(model_or_config, MMDiT) else model_or_config
    d = cfg.d_model
    stream = stream_param_count(cfg)
    embeddings = cfg.text_vocab * d + cfg.text_len * d + cfg.patch_dim * d + d + cfg.n_patches * d
    timestep = cfg.timestep_dim * d + d + d * d + d
    head = d * 2 * d + 2 * d + d * cfg.patch_dim + cfg.patch_dim
    per_block = [2 * stream if kind == DUAL else stream for kind in cfg.layout]
    backbone = sum(per_block)
    return {
        "dual_block": 2 * stream,
        "single_block": stream,
        "stream": stream,
        "embeddings": embeddings,
        "timestep": timestep,
        "head": head,
        "blocks": per_block,
        "backbone": backbone,
        "total": embeddings + timestep + head + backbone,
    }


def clone_subrange(model: MMDiT, src_layers) -> list[dict[str, np.ndarray]]:
    """Deep copies of the weights of the given blocks, keyed by in-block name."""
    out = []
    for l in src_layers:
        if not 0 <= l < model.depth:
            raise IndexError(f"layer {l} out of range for depth {model.depth}")
        out.append({k: v.data.copy() for k, v in model.block_params(l).items()})
    return out


def install_block(model: MMDiT, l: int, weights: dict[str, np.ndarray]) -> None:
    current = model.block_params(l)
    if set(current) != set(weights):
        raise ValueError(f"block {l} weight names do not match")
    for k, arr in weights.items():
        t = model.params[f"blocks.{l}.{k}"]
        if arr.shape != t.shape:
            raise ValueError(f"block {l} {k}: shape {arr.shape} != {t.shape}")
        t.data = np.array(arr, dtype=t.dtype, copy=True)
