"""Invariants that need a trained model; reuses the cached adaptive smoke run."""

import numpy as np
import pytest

import smoke_runs
from bridgeedit import backbone as bb
from bridgeedit import flow, sampler

ALPHAS = (0.0, 0.1, 0.4, 0.7, 1.0)


@pytest.fixture(scope="module")
def model():
    return bb.DiT.load(smoke_runs.ensure_run("adaptive") / "ckpt")


@pytest.fixture(scope="module")
def edits():
    return smoke_runs.dataset()[1][:8]


def background_drift(out, e, patch):
    b = e.bbox(patch)
    outside = np.ones(out.shape[1:], bool)
    outside[b.top : b.bottom, b.left : b.right] = False
    return float(np.abs(out - e.source)[:, outside].mean())


def test_timestep_changes_trained_output(model, edits):
    e = edits[0]
    layout = flow.sample_layout(e, model.config.patch, "adaptive")
    z = np.random.default_rng(0).standard_normal((layout.n_visual, model.config.patch_dim)).astype(np.float32)
    v = [bb.dit_forward(model, z, t, e.instruction, e.source, layout, "adaptive")[0].data for t in (0.2, 0.8)]
    assert not np.array_equal(v[0], v[1])
    assert np.abs(v[0] - v[1]).mean() > 1e-3


def test_background_drift_non_increasing_in_alpha(model, edits):
    drift = []
    for a in ALPHAS:
        cfg = sampler.SampleConfig(alpha=a, seed=0)
        drift.append(np.mean([background_drift(sampler.sample(model, e, cfg).output, e, model.config.patch)
                              for e in edits]))
    assert all(later <= earlier + 1e-12 for earlier, later in zip(drift, drift[1:])), drift
    assert drift[-1] < 1e-6
