"""Micro-benchmarks: forward+backward time of one dual vs one single block,
and per-stage wall clock of the pipeline.

Only relative orderings are meaningful; absolute numbers are machine-local.
For stable numbers run with ``OMP_NUM_THREADS=1``.

    python3 -m mmdit_compress.bench --out bench.csv
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import tempfile
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .model import DUAL, SINGLE, ModelConfig, fuse, init_model
from .tensor import Tape, Tensor, mse


@dataclass
class BenchRecord:
    op: str
    fingerprint: str
    iterations: int
    median: float  # seconds
    p90: float
    throughput: float  # tokens per second

    def __post_init__(self):
        if self.iterations < 10:
            raise ValueError(f"need at least 10 timed iterations, got {self.iterations}")

    def to_row(self) -> dict:
        return asdict(self)

    @classmethod
    def from_row(cls, row: dict) -> "BenchRecord":
        types = {f.name: f.type for f in fields(cls)}
        conv = {"int": int, "float": float, "str": str}
        return cls(**{k: conv[types[k]](v) for k, v in row.items()})


def config_fingerprint(cfg: ModelConfig, batch: int) -> str:
    blob = json.dumps({**cfg.to_dict(), "batch": batch}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def bench_block(kind: str, config: ModelConfig | None = None, iters: int = 20, batch: int = 32,
                warmup: int = 3, seed: int = 0) -> BenchRecord:
    """Median forward+backward time of a single block of the given kind."""
    if kind not in (DUAL, SINGLE):
        raise ValueError(f"unknown block kind {kind!r}")
    if iters < 10:
        raise ValueError(f"need at least 10 timed iterations, got {iters}")
    base = config or ModelConfig()
    cfg = base.replace(depth=2, layout=(kind, kind))
    model = init_model(cfg, seed)
    rng = np.random.default_rng(seed)
    for name, p in model.params.items():
        if name.startswith("blocks.0.") and ".mod." in name:
            p.data = (rng.standard_normal(p.shape) * 0.02).astype(np.float32)  # open the gates
    names = model.block_param_names([0])
    model.set_requires_grad(names)
    z = rng.standard_normal((batch, cfg.image_size, cfg.image_size, cfg.channels)).astype(np.float32)
    t = rng.integers(1, cfg.timesteps + 1, size=batch)
    p = rng.integers(4, cfg.text_vocab, size=(batch, cfg.text_len))
    state, cond = model.embed(z, t, p)
    state = (Tensor(state[0].data), Tensor(state[1].data))
    cond = type(cond)(Tensor(cond.c.data), Tensor(cond.act.data))
    n_tok = cfg.text_len + cfg.n_patches
    target = rng.standard_normal((batch, n_tok, cfg.d_model)).astype(np.float32)

    def step() -> None:
        with Tape() as tape:
            out = model.run_block(0, state, cond)
            if isinstance(out, tuple):
                out = fuse(out)
            loss = mse(out, target)
        tape.backward(loss)
        for n in names:
            model.params[n].grad = None

    for _ in range(warmup):
        step()
    times = []
    for _ in range(iters):
        start = time.perf_counter()
        step()
        times.append(time.perf_counter() - start)
    med = float(np.median(times))
    return BenchRecord(
        op=f"block_{kind}_fwd_bwd",
        fingerprint=config_fingerprint(cfg, batch),
        iterations=iters,
        median=med,
        p90=float(np.percentile(times, 90)),
        throughput=batch * n_tok / med,
    )


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=[f.name for f in fields(BenchRecord)])
        w.writeheader()
        for r in records:
            w.writerow(r.to_row())


def read_records(path) -> list[BenchRecord]:
    with open(path, newline="") as fh:
        return [BenchRecord.from_row(row) for row in csv.DictReader(fh)]


def stage_timings(out) -> list[tuple[str, float]]:
    """(stage, seconds) rows from a finished pipeline directory, in run order."""
    from .pipeline import STAGES

    rows = []
    for stage in STAGES:
        path = Path(out) / stage / "summary.json"
        if path.exists():
            rows.append((stage, json.loads(path.read_text())["wall_clock"]))
    return rows


def bench_pipeline(cfg, out=None) -> dict:
    """Run every stage and tabulate wall clock; ``out`` defaults to a temp dir."""
    from .pipeline import Pipeline

    if out is None:
        with tempfile.TemporaryDirectory() as tmp:
            return bench_pipeline(cfg, tmp)
    Pipeline(cfg, out).run_all()
    rows = stage_timings(out)
    return {"rows": rows, "total": float(sum(s for _, s in rows))}


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description="block and pipeline micro-benchmarks")
    ap.add_argument("--out", default="bench.csv")
    ap.add_argument("--iters", type=int, default=20)
    ap.add_argument("--d-model", type=int, nargs="*", default=[32, 64, 128])
    args = ap.parse_args(argv)
    records = []
    for d in args.d_model:
        cfg = ModelConfig(d_model=d, mlp_hidden=4 * d)
        for kind in (DUAL, SINGLE):
            r = bench_block(kind, cfg, args.iters)
            records.append(r)
            print(f"{r.op:24s} d={d:<4d} median {r.median * 1e3:8.2f} ms  p90 {r.p90 * 1e3:8.2f} ms  "
                  f"{r.throughput:10.0f} tok/s")
    write_records(records, args.out)


if __name__ == "__main__":
    main()
