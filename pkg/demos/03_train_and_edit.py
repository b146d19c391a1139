"""A short end-to-end run: train a small editor, then edit held-out images.

Uses a reduced model and a few hundred steps so it finishes in a couple of
minutes; the acceptance suite runs the full 2000-step toy configuration.
The blend strength sweep at the end shows the trade between following the
model inside the box and keeping the background.

    python demos/03_train_and_edit.py [steps]
"""

import sys
import time

import numpy as np

from bridgeedit import backbone as bb
from bridgeedit import evalkit, flow, sampler, synth

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
samples = synth.gen_samples(seed=11, n=136)
train, test = samples[:128], samples[128:]

cfg = bb.BackboneConfig(dim=32, heads=2, head_dim=16, layers=2)
model = bb.DiT.create(cfg, seed=0)
fresh = bb.DiT.create(cfg, seed=0)
fresh.meta["routing"] = "adaptive"

t0 = time.perf_counter()
hist = flow.train(model, train, flow.TrainConfig(steps=steps, batch_size=4),
                  progress=lambda i, r: print(f"step {i:4d} loss {r.loss:.4f}") if i % 50 == 0 else None)
loss = np.array([h.loss for h in hist])
print(f"trained {steps} steps in {time.perf_counter() - t0:.0f}s; loss {loss[:20].mean():.3f} -> {loss[-20:].mean():.3f}")


def local_l1(m, alpha=0.1):
    c = sampler.SampleConfig(alpha=alpha)
    return np.mean([evalkit.region_metrics(sampler.sample(m, e, c).output, e.target, e.bbox(2))["local_l1"] for e in test])


print(f"bbox-local L1 to target: fresh {local_l1(fresh):.4f}, trained {local_l1(model):.4f}")
print("\nalpha  local L1  background L1")
for alpha in (0.0, 0.4, 1.0):
    c = sampler.SampleConfig(alpha=alpha)
    loc, bg = [], []
    for e in test:
        out = sampler.sample(model, e, c).output
        b = e.bbox(2)
        outside = np.ones(out.shape[1:], bool)
        outside[b.top : b.bottom, b.left : b.right] = False
        loc.append(evalkit.region_metrics(out, e.target, b)["local_l1"])
        bg.append(np.abs(out - e.source)[:, outside].mean())
    print(f"{alpha:4.1f}  {np.mean(loc):.4f}    {np.mean(bg):.4f}")
