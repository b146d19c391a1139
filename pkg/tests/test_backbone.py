import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bridgeedit import backbone as bb
from bridgeedit import layout as lay
from bridgeedit import tensor as T
from bridgeedit.gradcheck import TINY, forward_loss_check

TOY = bb.BackboneConfig()


def toy_case(seed=0, cfg=TOY, bbox=(8, 8, 16, 16)):
    rng = np.random.default_rng(seed)
    L = lay.build_layout((cfg.image_size,) * 2, lay.BBox(*bbox), cfg.patch)
    z = rng.standard_normal((L.n_visual, cfg.patch_dim))
    src = rng.random((3, cfg.image_size, cfg.image_size))
    return L, z, src


def random_model(cfg, seed, dtype=np.float64, scale=0.2):
    m = bb.DiT.create(cfg, seed, dtype=dtype)
    rng = np.random.default_rng(seed + 100)
    for k, v in m.params.items():
        m.params[k] = v + scale * rng.standard_normal(v.shape)
    return m


def test_rotary_partition_covers_head_dim():
    assert sum(TOY.axis_pairs) * 2 == TOY.head_dim
    with pytest.raises(ValueError):
        bb.BackboneConfig(rope_axes=(2, 2, 2))


def test_zero_coords_is_identity_and_same_coords_same_vectors():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 4, TOY.head_dim))
    y = bb.rope_rotate(T.Tensor(x), np.zeros((4, 3), dtype=int), TOY).data
    np.testing.assert_array_equal(y, x)
    x[:, 1] = x[:, 0]
    y = bb.rope_rotate(T.Tensor(x), [bb.PECoord(0, 3, 5), bb.PECoord(0, 3, 5), bb.PECoord(1, 0, 0), bb.PECoord(2, 2, 2)], TOY).data
    np.testing.assert_array_equal(y[:, 0], y[:, 1])


def test_rope_coords_length_mismatch():
    with pytest.raises(ValueError):
        bb.rope_rotate(T.Tensor(np.ones((1, 3, TOY.head_dim))), np.zeros((2, 3), dtype=int), TOY)


@settings(max_examples=30)
@given(st.integers(0, 2**31), st.sampled_from([0, 1, 2]), st.integers(1, 40))
def test_uniform_shift_leaves_logits_unchanged(seed, axis, shift):
    rng = np.random.default_rng(seed)
    n = 12
    q, k = rng.standard_normal((2, n, TOY.head_dim))
    coords = rng.integers(0, 50, (n, 3))
    moved = coords.copy()
    moved[:, axis] += shift

    def logits(c):
        return bb.rope_rotate(T.Tensor(q), c, TOY).data @ bb.rope_rotate(T.Tensor(k), c, TOY).data.T

    assert np.max(np.abs(logits(coords) - logits(moved))) < 1e-10


def _seq(features, coords, mask=None):
    n = len(features)
    return lay.TokenSequence(T.Tensor(features), np.asarray(coords, dtype=np.int64),
                             np.full(n, lay.MAIN, dtype=object), mask)


def test_attention_layer_examples():
    m = random_model(TOY, 1)
    P = m.bind()
    rng = np.random.default_rng(0)
    _, w = bb.attention_layer(P, 0, _seq(rng.standard_normal((1, TOY.dim)), [[0, 0, 0]]), TOY, return_weights=True)
    np.testing.assert_array_equal(w.data, np.ones((TOY.heads, 1, 1)))

    x = rng.standard_normal((4, TOY.dim))
    x[2] = x[1]
    coords = [[0, 0, 0], [0, 1, 1], [0, 1, 1], [0, 2, 0]]
    _, w = bb.attention_layer(P, 0, _seq(x, coords), TOY, return_weights=True)
    np.testing.assert_array_equal(w.data[:, 1], w.data[:, 2])

    mask = np.zeros((4, 4))
    mask[0, 3] = -np.inf
    _, w = bb.attention_layer(P, 0, _seq(x, coords, mask), TOY, return_weights=True)
    assert np.all(w.data[:, 0, 3] == 0.0)
    with pytest.raises(ValueError):
        bb.attention_layer(P, 0, _seq(x, coords), TOY, pe_override=[[1, 0, 0]])


def test_fresh_model_velocity_is_zero_with_toy_token_count():
    m = bb.DiT.create(TOY, 0)
    L, z, src = toy_case()
    v, trace = bb.dit_forward(m, z.astype(np.float32), 0.4, [0, 3, 6], src, L)
    assert v.shape == (272, TOY.patch_dim)
    assert not np.any(v.data)
    assert len(trace) == TOY.layers and all(np.all(p == 0.5) for p in trace.p)


def test_dit_forward_rejects_bad_inputs():
    m = bb.DiT.create(TINY, 0, dtype=np.float64)
    L, z, src = toy_case(cfg=TINY, bbox=(2, 2, 6, 6))
    with pytest.raises(ValueError, match="vocabulary"):
        bb.dit_forward(m, z, 0.5, [0, 3, 99], src, L)
    with pytest.raises(ValueError, match="noisy tokens"):
        bb.dit_forward(m, z[:-1], 0.5, [0, 3, 6], src, L)
    with pytest.raises(ValueError):
        bb.dit_forward(m, z, 0.5, [0, 3, 6], src, L, routing_mode="sideways")


@pytest.mark.parametrize("seed", range(3))
def test_routing_clamps_match_fixed_modes(seed):
    m = random_model(TINY, seed)
    L, z, src = toy_case(seed, TINY, (2, 2, 6, 8))
    ids = [1, 4, 9]
    base, _ = bb.dit_forward(m, z, 0.3, ids, src, L, "fixed_base")
    swap, _ = bb.dit_forward(m, z, 0.3, ids, src, L, "fixed_swap")
    one, _ = bb.dit_forward(m, z, 0.3, ids, src, L, "adaptive", clamp=1)
    zero, _ = bb.dit_forward(m, z, 0.3, ids, src, L, "adaptive", clamp=0)
    assert one.data.tobytes() == base.data.tobytes()
    assert zero.data.tobytes() == swap.data.tobytes()
    assert base.data.tobytes() != swap.data.tobytes()


def test_shapes_preserved_per_layer():
    m = random_model(TINY, 0)
    L, z, src = toy_case(0, TINY, (2, 2, 6, 6))
    v, trace = bb.dit_forward(m, z, 0.7, [0, 3, 6], src, L)
    assert v.shape == (L.n_visual, TINY.patch_dim)
    assert [len(p) for p in trace.p] == [L.n_sub] * TINY.layers


def test_forward_loss_gradient_check():
    assert forward_loss_check(np.random.default_rng(11)) < 1e-4


def test_checkpoint_roundtrip(tmp_path):
    m = random_model(TINY, 2, dtype=np.float32)
    m.meta["routing"] = "adaptive"
    m.save(tmp_path / "ck")
    back = bb.DiT.load(tmp_path / "ck")
    assert back.config == m.config and back.meta == {"routing": "adaptive"}
    assert all(back.params[k].tobytes() == v.tobytes() for k, v in m.params.items())
    with pytest.raises(bb.CheckpointError):
        bb.DiT.load(tmp_path / "missing")
