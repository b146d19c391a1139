import numpy as np
import pytest

from bridgeedit import backbone as bb
from bridgeedit import flow
from bridgeedit import layout as lay
from bridgeedit import tensor as T
from bridgeedit.gradcheck import TINY
from bridgeedit.synth import EditSample


def tiny_sample(seed=0, size=8, box=(2, 2, 5, 6)):
    rng = np.random.default_rng(seed)
    src = rng.random((3, size, size))
    tgt = src.copy()
    t, l, b, r = box
    tgt[:, t:b, l:r] = rng.random((3, b - t, r - l))
    mask = np.zeros((size, size))
    mask[t:b, l:r] = 1
    return EditSample(f"s{seed}", src, tgt, mask, [0, 3, 6 + seed % 8], "add", "circle", seed % 8, seed, None)


def test_make_targets_examples():
    s = tiny_sample()
    s_noop = EditSample("n", s.source, s.source.copy(), s.mask, s.instruction, "add", "", 0, 0, None)
    L = flow.sample_layout(s_noop, 2)
    z0 = flow.make_targets(s_noop, L)
    np.testing.assert_array_equal(z0[: L.n_main], lay.patchify(s_noop.source, 2))
    full = EditSample("f", s.source, s.target, np.ones((8, 8)), s.instruction, "add", "", 0, 0, None)
    Lf = flow.sample_layout(full, 2)
    zf = flow.make_targets(full, Lf)
    np.testing.assert_array_equal(zf[: Lf.n_main], zf[Lf.n_main :])

    big = EditSample("b", np.zeros((3, 32, 32)), np.zeros((3, 32, 32)), np.pad(np.ones((8, 8)), 8), [0, 3, 6],
                     "add", "", 0, 0, None)
    assert flow.make_targets(big, flow.sample_layout(big, 2)).shape[0] == 272


def test_source_as_main_target_flag():
    s = tiny_sample()
    L = flow.sample_layout(s, 2)
    np.testing.assert_array_equal(flow.make_targets(s, L, "source")[: L.n_main], lay.patchify(s.source, 2))
    with pytest.raises(ValueError):
        flow.TrainConfig(main_target="neither")


def test_interpolate_examples():
    a, b = np.zeros((3, 2)), np.ones((3, 2))
    assert flow.interpolate(a, b, 0.0).tobytes() == a.tobytes()
    assert flow.interpolate(a, b, 1.0).tobytes() == b.tobytes()
    np.testing.assert_allclose(flow.interpolate(a, b, 0.3), 0.3)
    with pytest.raises(ValueError):
        flow.interpolate(a, np.ones((2, 2)), 0.5)


def test_fm_loss_examples():
    rng = np.random.default_rng(0)
    z0, z1 = rng.standard_normal((2, 5, 4))
    assert float(flow.fm_loss(z1 - z0, z0, z1).data) == 0.0
    assert float(flow.fm_loss(np.zeros((5, 4)), np.zeros((5, 4)), np.ones((5, 4))).data) == 1.0
    np.testing.assert_allclose(float(flow.fm_loss(np.zeros((5, 4)), z0, z1).data), np.mean((z1 - z0) ** 2))


def test_perfect_predictor_at_t0():
    s = tiny_sample(1)
    L = flow.sample_layout(s, 2)
    z0 = flow.make_targets(s, L)
    z1 = np.random.default_rng(2).standard_normal(z0.shape)
    assert float(flow.fm_loss(z1 - z0, flow.interpolate(z0, z1, 0.0), z1).data) == 0.0


def test_text_dropout_frequency():
    f = flow.text_dropout(np.random.default_rng(0), 10_000, 0.10).mean()
    assert 0.09 <= f <= 0.11
    with pytest.raises(ValueError):
        flow.TrainConfig(text_drop=1.5)


def _setup(routing="adaptive", seed=0):
    samples = [tiny_sample(i) for i in range(4)]
    model = bb.DiT.create(TINY, seed, with_gate=routing == "adaptive")
    L = [flow.sample_layout(s, 2, routing) for s in samples]
    return model, samples, L


def test_zero_learning_rate_keeps_parameters():
    model, samples, L = _setup()
    before = {k: v.copy() for k, v in model.params.items()}
    cfg = flow.TrainConfig(lr=0.0, steps=1, batch_size=4)
    res = flow.train_step(model, samples, L, cfg, flow.AdamState.zeros(model.params), np.random.default_rng(0))
    assert np.isfinite(res.loss) and res.loss > 0
    assert all(model.params[k].tobytes() == v.tobytes() for k, v in before.items())


def test_fresh_loss_equals_mean_squared_velocity():
    model, samples, L = _setup()
    cfg = flow.TrainConfig(text_drop=0.0)
    rng = np.random.default_rng(5)
    loss, *_ = flow.batch_loss(model, samples[:1], L[:1], cfg, rng)
    rng = np.random.default_rng(5)
    flow.text_dropout(rng, 1, 0.0)
    rng.random(1)
    z0 = flow.make_targets(samples[0], L[0]).astype(np.float32)
    z1 = rng.standard_normal(z0.shape).astype(np.float32)
    np.testing.assert_allclose(float(loss.data), np.mean((z1 - z0) ** 2), rtol=1e-6)


@pytest.mark.parametrize("routing", flow.TRAIN_ROUTINGS)
def test_training_is_bit_reproducible(routing):
    runs = []
    for _ in range(2):
        model, samples, _ = _setup(routing)
        hist = flow.train(model, samples, flow.TrainConfig(steps=3, batch_size=2, routing_mode=routing))
        runs.append((model, [h.loss for h in hist]))
    (m1, l1), (m2, l2) = runs
    assert l1 == l2
    assert all(m1.params[k].tobytes() == m2.params[k].tobytes() for k in m1.params)
    assert m1.meta["routing"] == routing


def test_non_finite_loss_aborts_without_mutation():
    model, samples, L = _setup()
    model.params["final.out.b"][:] = np.nan
    before = {k: v.copy() for k, v in model.params.items()}
    state = flow.AdamState.zeros(model.params)
    rng = np.random.default_rng(0)
    rng_before = rng.bit_generator.state
    with pytest.raises(T.NonFiniteError):
        flow.train_step(model, samples, L, flow.TrainConfig(), state, rng)
    assert state.step == 0 and rng.bit_generator.state == rng_before
    assert all(np.array_equal(model.params[k], v, equal_nan=True) for k, v in before.items())


def test_loss_decreases_on_a_tiny_problem():
    model, samples, _ = _setup()
    hist = flow.train(model, samples, flow.TrainConfig(steps=60, batch_size=4, lr=3e-3))
    assert np.mean([h.loss for h in hist[-10:]]) < np.mean([h.loss for h in hist[:10]])


def test_batch_order_covers_epochs():
    order = flow.batch_order(np.random.default_rng(0), 10, 5, 4)
    flat = np.concatenate(order)
    assert sorted(flat[:10].tolist()) == list(range(10))


def test_training_log_columns(tmp_path):
    model, samples, _ = _setup()
    flow.train(model, samples, flow.TrainConfig(steps=2, batch_size=2), log_path=tmp_path / "log.csv")
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "step,loss,text_drop_count,gate_mean_p_0,gate_mean_p_1"
