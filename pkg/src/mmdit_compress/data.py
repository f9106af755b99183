"""Synthetic compositional image-text pairs.

Prompts are ``<bos> color shape at position <eos>`` over 3 colors, 3 shapes
and 5 positions (45 prompts).  Images are 16x16 RGB in [-1, 1]: a flat colored
shape on a gray (0.0) background, shifted by up to one pixel of jitter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

COLORS = ("red", "green", "blue")
SHAPES = ("circle", "square", "cross")
POSITIONS = ("left", "right", "top", "bottom", "center")

PAD, BOS, EOS, AT = 0, 1, 2, 3
VOCAB = {"<pad>": PAD, "<bos>": BOS, "<eos>": EOS, "at": AT}
for _w in COLORS + SHAPES + POSITIONS:
    VOCAB[_w] = len(VOCAB)

RGB = {"red": (1.0, -1.0, -1.0), "green": (-1.0, 1.0, -1.0), "blue": (-1.0, -1.0, 1.0)}
# (row, col) centre of the shape on a 16x16 canvas
CENTRES = {"left": (7.5, 3.5), "right": (7.5, 11.5), "top": (3.5, 7.5), "bottom": (11.5, 7.5), "center": (7.5, 7.5)}

ALL_PROMPTS: tuple[tuple[str, str, str], ...] = tuple(product(COLORS, SHAPES, POSITIONS))

# jitter seeds are split by parity so train and val never share one
_SPLIT_PARITY = {"train": 0, "val": 1}


@dataclass(frozen=True)
class PromptGrammar:
    colors: tuple[str, ...] = COLORS
    shapes: tuple[str, ...] = SHAPES
    positions: tuple[str, ...] = POSITIONS
    text_len: int = 6

    @property
    def prompts(self) -> tuple[tuple[str, str, str], ...]:
        return tuple(product(self.colors, self.shapes, self.positions))

    def tokens(self, prompt) -> np.ndarray:
        color, shape, pos = parse_prompt(prompt)
        ids = [BOS, VOCAB[color], VOCAB[shape], AT, VOCAB[pos], EOS]
        ids += [PAD] * (self.text_len - len(ids))
        return np.array(ids[: self.text_len], dtype=np.int64)


GRAMMAR = PromptGrammar()


def parse_prompt(prompt) -> tuple[str, str, str]:
    words = prompt.split() if isinstance(prompt, str) else list(prompt)
    words = [w for w in words if w not in ("at", "a", "<bos>", "<eos>")]
    if len(words) != 3:
        raise ValueError(f"prompt {prompt!r} must name a color, a shape and a position")
    color, shape, pos = words
    for w, vocab in ((color, COLORS), (shape, SHAPES), (pos, POSITIONS)):
        if w not in vocab:
            raise ValueError(f"unknown prompt word {w!r}")
    return color, shape, pos


def prompt_text(prompt) -> str:
    color, shape, pos = parse_prompt(prompt)
    return f"{color} {shape} {pos}"


def _jitter(jitter_seed: int | None) -> tuple[int, int]:
    if jitter_seed is None:
        return 0, 0
    rng = np.random.default_rng(jitter_seed)
    dy, dx = rng.integers(-1, 2, size=2)
    return int(dy), int(dx)


def render(prompt, jitter_seed: int | None = None, size: int = 16) -> np.ndarray:
    """Draw the prompt; ``jitter_seed=None`` gives the canonical (unjittered) image."""
    color, shape, pos = parse_prompt(prompt)
    dy, dx = _jitter(jitter_seed)
    cy, cx = CENTRES[pos]
    scale = size / 16
    cy, cx = cy * scale + dy, cx * scale + dx
    r, c = np.mgrid[0:size, 0:size].astype(np.float64)
    ry, rx = np.abs(r - cy), np.abs(c - cx)
    half = 3.5 * scale
    if shape == "circle":
        # an annulus: a filled disc sits too close to the filled square under 1px jitter
        dist = np.sqrt((r - cy) ** 2 + (c - cx) ** 2)
        inside = (dist <= 4.0 * scale) & (dist >= 2.0 * scale)
    elif shape == "square":
        inside = (ry <= half) & (rx <= half)
    else:
        # diagonal (saltire) cross
        box = (ry <= half) & (rx <= half)
        inside = box & ((np.abs((r - cy) - (c - cx)) <= scale) | (np.abs((r - cy) + (c - cx)) <= scale))
    img = np.zeros((size, size, 3), dtype=np.float32)
    img[inside] = RGB[color]
    return img


def canonical_renders(grammar: PromptGrammar = GRAMMAR, size: int = 16) -> np.ndarray:
    return np.stack([render(p, None, size) for p in grammar.prompts])


@dataclass
class SyntheticDataset:
    prompt_ids: np.ndarray  # index into grammar.prompts
    tokens: np.ndarray  # (n, text_len)
    images: np.ndarray  # (n, H, W, 3)
    jitter_seeds: np.ndarray
    split: str
    seed: int

    def __len__(self) -> int:
        return len(self.prompt_ids)

    def subset(self, idx) -> "SyntheticDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SyntheticDataset(
            self.prompt_ids[idx], self.tokens[idx], self.images[idx], self.jitter_seeds[idx], self.split, self.seed
        )


def gen_dataset(
    n: int,
    split: str = "train",
    seed: int = 0,
    stratified: bool = False,
    grammar: PromptGrammar = GRAMMAR,
    size: int = 16,
) -> SyntheticDataset:
    """``n`` items with prompts drawn uniformly (or cycled, when stratified)."""
    if n < 1:
        raise ValueError(f"dataset size must be >= 1, got {n}")
    if split not in _SPLIT_PARITY:
        raise ValueError(f"unknown split {split!r}")
    prompts = grammar.prompts
    rng = np.random.default_rng([seed, _SPLIT_PARITY[split]])
    if stratified:
        ids = np.concatenate([rng.permutation(len(prompts)) for _ in range(-(-n // len(prompts)))])[:n]
    else:
        ids = rng.integers(0, len(prompts), size=n)
    base = rng.integers(0, 2**30, size=n)
    jitter = 2 * base + _SPLIT_PARITY[split]
    tokens = np.stack([grammar.tokens(prompts[i]) for i in ids])
    images = np.stack([render(prompts[i], int(j), size) for i, j in zip(ids, jitter)])
    return SyntheticDataset(ids.astype(np.int64), tokens, images, jitter.astype(np.int64), split, seed)


def balanced_order(seed: int = 0, grammar: PromptGrammar = GRAMMAR) -> list[int]:
    """An ordering of the 45 prompts whose every prefix is balanced in color,
    shape and position (counts differ by at most one)."""
    nc, ns, npos = len(grammar.colors), len(grammar.shapes), len(grammar.positions)
    if (nc, ns, npos) != (3, 3, 5):
        raise ValueError("balanced ordering is defined for the 3x3x5 grammar")
    rng = np.random.default_rng(seed)
    pc, ps, pp = rng.permutation(nc), rng.permutation(ns), rng.permutation(npos)
    order = []
    for i in range(nc * ns * npos):
        block = i // (nc * npos)
        c, s, q = pc[i % nc], ps[(i + block) % ns], pp[i % npos]
        order.append(int((c * ns + s) * npos + q))
    return order


def importance_prompt_set(k: int, seed: int = 0, grammar: PromptGrammar = GRAMMAR) -> list[int]:
    """``k`` prompt indices: whole passes over the grammar, then a balanced partial pass."""
    if k < 1:
        raise ValueError(f"prompt set size must be >= 1, got {k}")
    order = balanced_order(seed, grammar)
    full, rest = divmod(k, len(order))
    return sorted(order) * full + order[:rest]


def dump_dataset(ds: SyntheticDataset, out_dir, grammar: PromptGrammar = GRAMMAR) -> Path:
    """Write each image as binary PPM plus an ``index.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for i in range(len(ds)):
        name = f"{ds.split}_{i:05d}.ppm"
        write_ppm(out / name, ds.images[i])
        index.append(
            {
                "file": name,
                "prompt": prompt_text(grammar.prompts[ds.prompt_ids[i]]),
                "tokens": ds.tokens[i].tolist(),
                "jitter_seed": int(ds.jitter_seeds[i]),
            }
        )
    (out / "index.json").write_text(json.dumps({"split": ds.split, "seed": ds.seed, "items": index}, indent=1))
    return out


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round((np.clip(img, -1, 1) + 1) * 127.5).astype(np.uint8)


def write_ppm(path, img: np.ndarray) -> None:
    arr = to_uint8(img)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = int(fields[1]), int(fields[2])
    body = raw[pos + 1: pos + 1 + w * h * 3]
    arr = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return arr.astype(np.float32) / 127.5 - 1.0


def mosaic(images: np.ndarray, cols: int = 9, pad: int = 1) -> np.ndarray:
    n, h, w, c = images.shape
    rows = -(-n // cols)
    grid = np.full((rows * (h + pad) + pad, cols * (w + pad) + pad, c), -1.0, dtype=np.float32)
    for i, img in enumerate(images):
        r, q = divmod(i, cols)
        grid[pad + r * (h + pad): pad + r * (h + pad) + h, pad + q * (w + pad): pad + q * (w + pad) + w] = img
    return grid
