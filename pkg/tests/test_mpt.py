"""
Unit tests for mpt.py
"""

import numpy as np
import pytest

import tensor_core as tc
from mpt import MptStack, PromptAttentionParams, fuse, fuse_branches, mpt_forward, prompt_attention
from tensor_core import ShapeMismatchError, Tensor, make_rng


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@pytest.fixture
def block(rng):
    return PromptAttentionParams.init(rng, 8, heads=2)


def test_attention_rows_sum_to_one(block, rng):
    """Every attention probability row sums to one, including for large inputs."""
    for magnitude in (1.0, 1e3):
        prompt = Tensor(magnitude * rng.standard_normal((3, 8)))
        text = Tensor(magnitude * rng.standard_normal((4, 8)))
        out, weights = prompt_attention(prompt, text, block, return_weights=True)
        assert weights.shape == (2, 7, 4)
        assert out.shape == (7, 8)
        np.testing.assert_allclose(weights.data.sum(axis=-1), np.ones((2, 7)), rtol=0, atol=1e-12)
        assert np.isfinite(out.data).all()


def test_constant_text_gives_identical_rows(block, rng):
    """With every text row equal, every output row in each segment is the same."""
    text = Tensor(np.tile(rng.standard_normal(8), (4, 1)))
    out = prompt_attention(Tensor(rng.standard_normal((4, 8))), text, block).data
    np.testing.assert_allclose(out[:4], np.tile(out[0], (4, 1)), rtol=0, atol=1e-12)
    np.testing.assert_allclose(out[4:], np.tile(out[4], (4, 1)), rtol=0, atol=1e-12)


def test_single_head_matches_dense_oracle(rng):
    """n=1, d=4, L=2 equals a hand-written attention computation."""
    params = PromptAttentionParams.init(rng, 4, heads=1)
    prompt = rng.standard_normal((2, 4))
    text = rng.standard_normal((2, 4))

    queries = np.vstack([prompt, text @ params.w_q.data])
    keys = text @ params.w_k.data
    values = text @ params.w_v.data
    expected = _softmax(queries @ keys.T / 2.0) @ values @ params.w_o.data

    out = prompt_attention(Tensor(prompt), Tensor(text), params).data
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)


def test_zero_query_key_projections_give_uniform_attention(rng):
    """W_Q = W_K = 0 makes every weight 1/L and the output ignores the order of the text rows."""
    params = PromptAttentionParams.init(rng, 8, heads=2)
    params.w_q.data[...] = 0.0
    params.w_k.data[...] = 0.0
    prompt = Tensor(rng.standard_normal((3, 8)))
    text = rng.standard_normal((3, 8))
    out, weights = prompt_attention(prompt, Tensor(text), params, return_weights=True)
    np.testing.assert_allclose(weights.data, np.full((2, 6, 3), 1 / 3), rtol=0, atol=1e-15)
    permuted = prompt_attention(prompt, Tensor(text[[2, 0, 1]]), params).data
    np.testing.assert_allclose(permuted, out.data, rtol=0, atol=1e-12)


def test_prompt_attention_rejects_width_mismatch(block, rng):
    """Prompt and text must share the block width."""
    with pytest.raises(ShapeMismatchError):
        prompt_attention(Tensor(rng.standard_normal((3, 6))), Tensor(rng.standard_normal((3, 8))), block)
    with pytest.raises(ShapeMismatchError):
        PromptAttentionParams.init(rng, 8, heads=3)


@pytest.mark.parametrize("length", [1, 3, 8])
def test_mpt_forward_shape(rng, length):
    """The prompt transformer returns one row per text utterance."""
    stack = MptStack.init(rng, 10, layers=2, heads=5, dropout=0.0)
    out = mpt_forward(Tensor(rng.standard_normal((length, 10))), Tensor(rng.standard_normal((length, 10))), stack)
    assert out.shape == (length, 10)


def test_zero_inputs_and_weights_are_finite(rng):
    """Zero prompt, text and weights give a finite all-zero output."""
    stack = MptStack.init(rng, 8, layers=2, heads=2, dropout=0.0)
    for tensor in stack.parameters().values():
        if tensor.ndim == 2:
            tensor.data[...] = 0.0
    out = mpt_forward(Tensor(np.zeros((3, 8))), Tensor(np.zeros((3, 8))), stack).data
    assert out.shape == (3, 8)
    assert np.isfinite(out).all()
    np.testing.assert_array_equal(out, np.zeros((3, 8)))


def test_mpt_forward_rejects_bad_inputs(rng):
    """Empty sequences, width mismatches and training dropout without a generator are rejected."""
    stack = MptStack.init(rng, 8, layers=1, heads=2, dropout=0.2)
    with pytest.raises(ShapeMismatchError):
        mpt_forward(Tensor(np.zeros((0, 8))), Tensor(np.zeros((0, 8))), stack)
    with pytest.raises(ShapeMismatchError):
        mpt_forward(Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 8))), stack)
    with pytest.raises(ValueError):
        mpt_forward(Tensor(np.ones((2, 8))), Tensor(np.ones((2, 8))), stack, training=True)
    with pytest.raises(ShapeMismatchError):
        MptStack.init(rng, 8, layers=0, heads=2)


def test_every_parameter_receives_gradient(rng):
    """Generic random inputs give a nonzero gradient to every parameter of the stack."""
    stack = MptStack.init(rng, 8, layers=2, heads=2, dropout=0.0)
    for tensor in stack.parameters().values():
        if tensor.ndim == 1:
            tensor.data += 0.1 * rng.standard_normal(tensor.shape)
    weights = Tensor(rng.standard_normal((3, 8)))
    out = mpt_forward(Tensor(rng.standard_normal((3, 8))), Tensor(rng.standard_normal((3, 8))), stack)
    tc.backward(tc.sum_(tc.mul(out, weights)))
    dead = [name for name, t in stack.parameters().items() if t.grad is None or not np.any(t.grad)]
    assert dead == []


def test_mpt_forward_gradients(rng):
    """Stack parameters and both inputs pass the finite-difference check at d=8, L=3, two blocks, two heads."""
    stack = MptStack.init(rng, 8, layers=2, heads=2, d_ff=16, dropout=0.0)
    prompt = rng.standard_normal((3, 8))
    text = rng.standard_normal((3, 8))
    weights = Tensor(rng.standard_normal((3, 8)))

    def loss(p, t):
        return tc.sum_(tc.mul(mpt_forward(p, t, stack), weights))

    reports = tc.grad_check_params(lambda: loss(Tensor(prompt), Tensor(text)), stack.parameters(), atol=1e-8, max_coords=24)
    assert all(r.passed for r in reports.values()), {k: r.to_dict() for k, r in reports.items() if not r.passed}
    assert tc.grad_check(lambda p: loss(p, Tensor(text)), Tensor(prompt), atol=1e-8).passed
    assert tc.grad_check(lambda t: loss(Tensor(prompt), t), Tensor(text), atol=1e-8).passed


def test_forward_is_deterministic():
    """Identical seeds and inputs give bitwise-identical outputs, dropout included."""
    outputs = []
    for _ in range(2):
        stack = MptStack.init(make_rng(5, "mpt"), 8, layers=2, heads=2, dropout=0.2)
        data = make_rng(5, "synthetic")
        prompt, text = Tensor(data.standard_normal((4, 8))), Tensor(data.standard_normal((4, 8)))
        outputs.append(mpt_forward(prompt, text, stack, training=True, rng=make_rng(5, "dropout")).data)
    np.testing.assert_array_equal(outputs[0], outputs[1])


def test_fuse_widths_and_slices(rng):
    """X_mpt is 2d wide and X_fusion 3d wide; the first d columns recover the text features."""
    text = rng.standard_normal((3, 4))
    x_tv = rng.standard_normal((3, 4))
    x_mpt, x_fusion = fuse(Tensor(x_tv), Tensor(np.zeros((3, 4))), Tensor(text))
    assert x_mpt.shape == (3, 8)
    assert x_fusion.shape == (3, 12)
    np.testing.assert_array_equal(x_mpt.data[:, 4:], np.zeros((3, 4)))
    np.testing.assert_array_equal(x_fusion.data[:, :4], text)
    np.testing.assert_array_equal(x_fusion.data[:, 4:8], x_tv)


def test_fuse_rejects_mismatch(rng):
    """Branches must match each other and the text features."""
    with pytest.raises(ShapeMismatchError):
        fuse(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 4))))
    with pytest.raises(ShapeMismatchError):
        fuse_branches([Tensor(np.zeros((3, 5)))], Tensor(np.zeros((3, 4))))


def test_fuse_branches_counts(rng):
    """One branch gives a 2d fusion; no branches leave the text features alone."""
    text = Tensor(rng.standard_normal((2, 4)))
    x_mpt, x_fusion = fuse_branches([Tensor(rng.standard_normal((2, 4)))], text)
    assert x_mpt.shape == (2, 4) and x_fusion.shape == (2, 8)
    x_mpt, x_fusion = fuse_branches([], text)
    assert x_mpt is None and x_fusion is text
