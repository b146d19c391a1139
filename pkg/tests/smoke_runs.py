"""Cached end-to-end training runs shared by the acceptance checks.

A run is keyed by a hash of its resolved configuration; the checkpoint, loss
log and measured wall time live under ``.smoke_cache/<key>/``. Delete the
directory to force retraining.
"""

from __future__ import annotations

import hashlib
import time
from pathlib import Path

import numpy as np

from bridgeedit import backbone as bb
from bridgeedit import evalkit, flow, sampler, synth
from bridgeedit import io as bio
from bridgeedit.config import RunConfig

ROOT = Path(__file__).resolve().parent.parent
CACHE = ROOT / ".smoke_cache"
DATA_SEED = 2024
N_TOTAL = 576  # 512 train / 64 test
EVAL_N = 64


def run_config(routing: str) -> RunConfig:
    cfg = RunConfig.from_dict({"seed": "0", "train.routing_mode": routing, "train.steps": "2000",
                               "train.batch_size": "8"})
    cfg.data = str(CACHE / f"data-{DATA_SEED}")
    return cfg


def _key(cfg: RunConfig) -> str:
    items = sorted((k, v) for k, v in cfg.to_dict().items() if k not in ("out", "data"))
    return hashlib.sha256(repr(items).encode()).hexdigest()[:12]


def dataset():
    data = CACHE / f"data-{DATA_SEED}"
    if not (data / "test.csv").exists():
        synth.gen_dataset(DATA_SEED, N_TOTAL, out=data)
    return synth.load_manifest(data / "train.csv"), synth.load_manifest(data / "test.csv")


def ensure_run(routing: str) -> Path:
    cfg = run_config(routing)
    out = CACHE / f"{routing}-{_key(cfg)}"
    if (out / "seconds.txt").exists():
        return out
    train, _ = dataset()
    model = bb.DiT.create(cfg.model, cfg.seed, with_gate=routing == "adaptive")
    start = time.perf_counter()
    with bio.atomic_dir(out) as tmp:
        flow.train(model, train, cfg.train, log_path=tmp / "train_log.csv")
        seconds = time.perf_counter() - start
        model.save(tmp / "ckpt")
        cfg.out = str(out)
        cfg.write(tmp / "config.txt")
        (tmp / "seconds.txt").write_text(f"{seconds:.3f}\n")
    return out


def losses(run: Path) -> np.ndarray:
    rows = np.genfromtxt(run / "train_log.csv", delimiter=",", names=True)
    return np.asarray(rows["loss"], dtype=np.float64)


def mean_bbox_l1(model: bb.DiT, edits, cfg: sampler.SampleConfig = sampler.SampleConfig()) -> float:
    vals = [evalkit.region_metrics(sampler.sample(model, e, cfg).output, e.target, e.bbox(model.config.patch))["local_l1"]
            for e in edits]
    return float(np.mean(vals))


def fresh_model(routing: str) -> bb.DiT:
    cfg = run_config(routing)
    model = bb.DiT.create(cfg.model, cfg.seed, with_gate=routing == "adaptive")
    model.meta["routing"] = routing
    return model


if __name__ == "__main__":
    import sys

    for r in sys.argv[1:] or ["adaptive", "fixed_base"]:
        t0 = time.perf_counter()
        print(r, ensure_run(r), f"{time.perf_counter() - t0:.1f}s", flush=True)
