import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from mirec.numeric import (
    MLP,
    AdamState,
    ChecksumError,
    NonFiniteGradientError,
    ParamBlock,
    ShapeError,
    adam_step,
    central_difference,
    clip_grad_norm,
    embed_backward,
    embed_forward,
    glorot_uniform,
    halving_widths,
    load_checkpoint,
    relative_error,
    save_checkpoint,
)


def loop_forward(layers, x):
    """Straight-line forward pass with Python loops only."""
    h = [float(v) for v in x]
    for n, (W, b) in enumerate(layers):
        out = []
        for j in range(len(b)):
            z = b[j]
            for i in range(len(h)):
                z += h[i] * W[i][j]
            out.append(z if n == len(layers) - 1 else max(z, 0.0))
        h = out
    return h


def test_halving_widths():
    assert halving_widths(64, 3) == [512, 256, 128]
    assert halving_widths(8, 0) == []


def test_glorot_bounds():
    w = glorot_uniform(np.random.default_rng(0), 30, 20)
    assert np.abs(w).max() <= math.sqrt(6 / 50)


def test_zero_weights_give_zero_output():
    mlp = MLP.init("m", [5, 4, 3], np.random.default_rng(0))
    for blk in mlp.blocks():
        blk.values[...] = 0
    out, _ = mlp.forward(np.random.default_rng(1).normal(size=(2, 5)))
    assert np.array_equal(out, np.zeros((2, 3)))


def test_identity_layer_passes_nonnegative_input():
    mlp = MLP([(ParamBlock("w", np.eye(4)), ParamBlock("b", np.zeros(4)))])
    x = np.array([[0.0, 1.5, 2.0, 7.0]])
    assert np.array_equal(mlp.forward(x)[0], x)


def test_three_layer_matches_loop_oracle():
    rng = np.random.default_rng(7)
    mlp = MLP.init("m", [6, 5, 4, 3], rng)
    for _, b in mlp.layers:
        b.values[...] = rng.normal(size=b.shape)
    x = rng.normal(size=6)
    want = loop_forward([(w.values.tolist(), b.values.tolist()) for w, b in mlp.layers], x)
    np.testing.assert_allclose(mlp.forward(x[None])[0][0], want, rtol=1e-13, atol=1e-13)


def test_shape_mismatch_is_construction_error():
    with pytest.raises(ShapeError):
        MLP([(ParamBlock("w0", np.zeros((3, 4))), ParamBlock("b0", np.zeros(4))),
             (ParamBlock("w1", np.zeros((5, 2))), ParamBlock("b1", np.zeros(2)))])


def test_backward_closed_form_half_squared_norm():
    rng = np.random.default_rng(0)
    W = ParamBlock("w", rng.normal(size=(4, 3)))
    b = ParamBlock("b", np.zeros(3))
    mlp = MLP([(W, b)])
    x = rng.normal(size=(1, 4))
    out, cache = mlp.forward(x)
    mlp.backward(cache, out)  # d(0.5 ||x W||^2)/d out = out
    # row-vector convention: out = x W, so dL/dW = x^T (x W)
    np.testing.assert_allclose(W.grad, x.T @ (x @ W.values), rtol=1e-14)


def test_independent_block_gets_zero_gradient():
    mlp = MLP.init("m", [3, 2], np.random.default_rng(0))
    unused = ParamBlock("unused", np.ones((2, 2)))
    out, cache = mlp.forward(np.ones((1, 3)))
    mlp.backward(cache, np.ones_like(out))
    assert np.array_equal(unused.grad, np.zeros((2, 2)))


def test_backward_without_forward_fails():
    mlp = MLP.init("m", [3, 2], np.random.default_rng(0))
    with pytest.raises(RuntimeError):
        mlp.backward(None, np.ones((1, 2)))


@pytest.mark.parametrize("seed", range(10))
def test_mlp_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    mlp = MLP.init("m", [5, 6, 4, 3], rng)
    for _, b in mlp.layers:  # non-zero biases keep pre-activations off the ReLU kink
        b.values[...] = rng.normal(scale=0.5, size=b.shape)
    x = rng.normal(size=(4, 5))
    target = rng.normal(size=(4, 3))

    def f():
        out, _ = mlp.forward(x)
        return 0.5 * float(np.sum((out - target) ** 2))

    out, cache = mlp.forward(x)
    mlp.backward(cache, out - target)
    for blk in mlp.blocks():
        assert relative_error(blk.grad, central_difference(f, blk.values)) < 1e-6


def test_embedding_gradient_touches_only_referenced_rows():
    table = ParamBlock("t", np.random.default_rng(0).normal(size=(6, 3)))
    x = sp.csr_matrix(np.array([[0, 1, 0, 0, 0, 0], [0, 0, 0, 2, 0, 0.0]]))
    out = embed_forward(x, table)
    np.testing.assert_array_equal(out[1], 2 * table.values[3])
    embed_backward(x, table, np.ones_like(out))
    touched = np.flatnonzero(np.abs(table.grad).sum(axis=1))
    assert touched.tolist() == [1, 3]


def test_adam_first_step_is_signed_learning_rate():
    for g in (3.0, -0.02, 1e4):
        blk = ParamBlock("p", np.array([1.0]))
        blk.grad[...] = g
        adam_step(AdamState(0.001), [blk])
        assert abs(blk.values[0] - (1.0 - 0.001 * math.copysign(1, g))) < 1e-8


def test_adam_zero_gradient_leaves_parameters_and_decays_moments():
    blk = ParamBlock("p", np.array([1.0, -2.0]))
    state = AdamState(0.1)
    blk.grad[...] = [1.0, 1.0]
    adam_step(state, [blk])
    before = blk.values.copy()
    m_before = state.first_moment["p"].copy()
    # a zero gradient after a non-zero one still moves through momentum;
    # from a fresh state it must not move at all
    fresh = ParamBlock("q", np.array([1.0, -2.0]))
    adam_step(AdamState(0.1), [fresh])
    assert np.array_equal(fresh.values, [1.0, -2.0])
    adam_step(state, [blk])
    np.testing.assert_allclose(state.first_moment["p"], 0.9 * m_before)
    assert not np.array_equal(blk.values, before)


def test_adam_rejects_non_finite_gradient_without_touching_anything():
    good = ParamBlock("good", np.ones(2))
    bad = ParamBlock("bad", np.ones(2))
    good.grad[...] = 1.0
    bad.grad[...] = [np.nan, 0.0]
    state = AdamState()
    with pytest.raises(NonFiniteGradientError, match="bad"):
        adam_step(state, [good, bad])
    assert np.array_equal(good.values, np.ones(2)) and state.step_count == 0


def test_adam_trajectories_are_bit_identical():
    def run():
        rng = np.random.default_rng(3)
        mlp = MLP.init("m", [4, 4, 2], rng)
        state = AdamState(0.01)
        x = rng.normal(size=(8, 4))
        for _ in range(20):
            out, cache = mlp.forward(x)
            mlp.backward(cache, out - 1.0)
            adam_step(state, mlp.blocks())
        return [b.values.copy() for b in mlp.blocks()]

    for a, b in zip(run(), run()):
        assert a.tobytes() == b.tobytes()


def test_clip_grad_norm():
    blk = ParamBlock("p", np.zeros(2))
    blk.grad[...] = [3.0, 4.0]
    assert clip_grad_norm([blk], 1.0) == 5.0
    np.testing.assert_allclose(blk.grad, [0.6, 0.8])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    blocks = [ParamBlock("a/w", rng.normal(size=(3, 2))), ParamBlock("a/b", rng.normal(size=2))]
    save_checkpoint(tmp_path / "x.ckpt", blocks, {"seed": 5})
    arrays, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"seed": 5}
    for blk in blocks:
        assert arrays[blk.name].tobytes() == blk.values.tobytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, [ParamBlock("w", np.arange(6.0))], {})
    raw = bytearray(path.read_bytes())
    raw[-40] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(path)


def test_checkpoint_is_little_endian_float64(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, [ParamBlock("w", np.array([1.5, -2.0]))], {})
    raw = path.read_bytes()
    assert raw[:8] == b"MIRECKP1"
    assert np.array([1.5, -2.0], dtype="<f8").tobytes() in raw


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_forward_does_not_mutate_inputs(n_in, n_out, seed):
    rng = np.random.default_rng(seed)
    mlp = MLP.init("m", [n_in, n_out], rng)
    x = rng.normal(size=(2, n_in))
    x0 = x.copy()
    w0 = [b.values.copy() for b in mlp.blocks()]
    mlp.forward(x)
    assert np.array_equal(x, x0)
    assert all(np.array_equal(a, b.values) for a, b in zip(w0, mlp.blocks()))
