import numpy as np
import pytest

from oled.errors import NonFiniteError, ShapeError, TapeError
from oled.nn import (
    AdamState,
    BatchNorm,
    Clip,
    Conv2d,
    ConvTranspose2d,
    Dense,
    LayerStack,
    LeakyReLU,
    ReLU,
    Reshape,
    adam_step,
    backward,
    conv_out_size,
    conv_transpose_out_size,
    forward,
    grad_check,
)


def single(layer, in_shape):
    return LayerStack(in_shape, [("l", layer)])


def test_identity_1x1_conv():
    conv = Conv2d(1, 1, 1)
    conv.params["weight"][:] = 1.0
    x = np.array([[[[1, 2], [3, 4]]]], dtype=np.float32)
    y, _ = forward(single(conv, (1, 2, 2)), x)
    np.testing.assert_array_equal(y, x)


def test_all_ones_2x2_conv_sums_window():
    conv = Conv2d(1, 1, 2)
    conv.params["weight"][:] = 1.0
    x = np.array([[[[1, 2], [3, 4]]]], dtype=np.float32)
    y, _ = forward(single(conv, (1, 2, 2)), x)
    assert y.shape == (1, 1, 1, 1)
    assert y[0, 0, 0, 0] == 10.0


def test_clip_forward():
    y, _ = forward(single(Clip(-1, 1), (3,)), np.array([[-3, 0.2, 5]], dtype=np.float32))
    np.testing.assert_allclose(y, [[-1, 0.2, 1]])


def test_zero_upstream_gives_zero_gradients():
    rng = np.random.default_rng(1)
    stack = LayerStack((2, 8, 8), [
        ("c", Conv2d(2, 4, 3, stride=2, padding=1, rng=rng)),
        ("bn", BatchNorm(4)),
        ("a", LeakyReLU()),
        ("t", ConvTranspose2d(4, 2, 3, stride=2, padding=1, output_padding=1, rng=rng)),
    ])
    x = rng.standard_normal((3, 2, 8, 8)).astype(np.float32)
    y, tape = forward(stack, x)
    gx, grads = backward(stack, tape, np.zeros_like(y))
    assert not gx.any()
    assert set(grads) == set(stack.parameters())
    assert all(not g.any() for g in grads.values())


def test_dense_weight_gradient_outer_product():
    d = Dense(2, 1, bias=False)
    stack = single(d, (2,))
    y, tape = forward(stack, np.array([[1.0, 2.0]], dtype=np.float32))
    _, grads = backward(stack, tape, np.array([[3.0]], dtype=np.float32))
    np.testing.assert_array_equal(grads["l.weight"], [[3.0, 6.0]])


LAYER_CASES = {
    "conv2d": lambda rng: (single(Conv2d(2, 3, 3, stride=2, padding=1, rng=rng), (2, 5, 5)), (2, 2, 5, 5)),
    "conv2d-valid": lambda rng: (single(Conv2d(1, 2, 2, rng=rng), (1, 5, 5)), (3, 1, 5, 5)),
    "transposed-conv2d": lambda rng: (single(ConvTranspose2d(2, 3, 3, stride=2, padding=1, output_padding=1,
                                                             rng=rng), (2, 3, 3)), (2, 2, 3, 3)),
    "dense": lambda rng: (single(Dense(5, 4, rng=rng), (5,)), (3, 5)),
    "batchnorm": lambda rng: (single(BatchNorm(3), (3, 4, 4)), (2, 3, 4, 4)),
    "batchnorm-1d": lambda rng: (single(BatchNorm(5), (5,)), (4, 5)),
    "reshape": lambda rng: (single(Reshape((2, 5)), (10,)), (2, 10)),
}


@pytest.mark.parametrize("kind", sorted(LAYER_CASES))
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_grad_check_smooth_layers(kind, seed):
    rng = np.random.default_rng(seed)
    stack, shape = LAYER_CASES[kind](rng)
    report = grad_check(stack, rng.standard_normal(shape), tolerance=1e-3, seed=seed)
    assert report.passed, report.failures()


def away_from(points, shape, rng, margin=0.05):
    x = rng.standard_normal(shape)
    for p in points:
        near = np.abs(x - p) < margin
        x[near] = p + np.sign(x[near] - p + 1e-12) * margin * 2
    return x


@pytest.mark.parametrize("layer,kinks", [(LeakyReLU(0.2), [0.0]), (ReLU(), [0.0]), (Clip(-1, 1), [-1.0, 1.0])])
def test_piecewise_linear_layers_exact_away_from_kinks(layer, kinks):
    rng = np.random.default_rng(3)
    x = away_from(kinks, (4, 5), rng)
    report = grad_check(single(layer, (5,)), x, tolerance=1e-6)
    assert report.passed, report.errors


def test_grad_check_catches_a_wrong_gradient():
    class Broken(Dense):
        def backward(self, cache, gy):
            gx, grads = super().backward(cache, gy)
            return gx * 1.01, grads

    rng = np.random.default_rng(0)
    report = grad_check(single(Broken(3, 2, rng=rng), (3,)), rng.standard_normal((2, 3)))
    assert not report.passed
    assert "input" in report.failures()


def test_output_size_arithmetic():
    assert conv_out_size(32, 3, 2, 1) == 16
    assert conv_out_size(28, 5, 1, 0) == 24
    assert conv_transpose_out_size(16, 3, 2, 1, 1) == 32
    for size in (4, 8, 16):
        assert conv_out_size(conv_transpose_out_size(size, 3, 2, 1, 1), 3, 2, 1) == size
    conv = Conv2d(1, 1, 3, stride=2, padding=1)
    y, _ = forward(single(conv, (1, 9, 7)), np.zeros((1, 1, 9, 7), np.float32))
    assert y.shape[2:] == (conv_out_size(9, 3, 2, 1), conv_out_size(7, 3, 2, 1))


def test_shape_mismatch_names_layer():
    with pytest.raises(ShapeError, match="'second'"):
        LayerStack((3, 8, 8), [("first", Conv2d(3, 4, 3)), ("second", Conv2d(5, 4, 3))])
    stack = LayerStack((3, 8, 8), [("first", Conv2d(3, 4, 3))])
    with pytest.raises(ShapeError, match="'first'"):
        forward(stack, np.zeros((1, 2, 8, 8), np.float32))


def test_backward_rejects_foreign_tape():
    rng = np.random.default_rng(0)
    a = single(Dense(3, 2, rng=rng), (3,))
    b = single(Dense(3, 2, rng=rng), (3,))
    _, tape = forward(a, np.ones((2, 3), np.float32))
    with pytest.raises(TapeError):
        backward(b, tape, np.ones((2, 2), np.float32))
    _, none_tape = forward(a, np.ones((2, 3), np.float32), "infer")
    with pytest.raises(TapeError):
        backward(a, none_tape, np.ones((2, 2), np.float32))


def test_infer_mode_does_not_mutate_and_uses_running_stats():
    bn = BatchNorm(2)
    stack = single(bn, (2, 3, 3))
    x = np.random.default_rng(0).standard_normal((4, 2, 3, 3)).astype(np.float32) * 3 + 1
    before = {k: v.copy() for k, v in stack.state().items()}
    y, tape = forward(stack, x, "infer")
    assert tape is None
    for k, v in stack.state().items():
        np.testing.assert_array_equal(v, before[k])
    np.testing.assert_allclose(y, x / np.sqrt(1 + 1e-5), rtol=1e-6)
    forward(stack, x, "train")
    assert not np.array_equal(stack.state()["l.running_mean"], before["l.running_mean"])


def test_batchnorm_running_stats_follow_momentum():
    bn = BatchNorm(1, momentum=0.9)
    x = np.array([[1.0], [3.0]], dtype=np.float32)
    forward(single(bn, (1,)), x)
    np.testing.assert_allclose(bn.buffers["running_mean"], [0.2], rtol=1e-6)
    np.testing.assert_allclose(bn.buffers["running_var"], [0.9 + 0.1 * 1.0], rtol=1e-6)


def test_float32_throughout():
    rng = np.random.default_rng(0)
    stack = LayerStack((1, 8, 8), [("c", Conv2d(1, 2, 3, 2, 1, rng=rng)), ("bn", BatchNorm(2)),
                                   ("a", LeakyReLU()), ("t", ConvTranspose2d(2, 1, 3, 2, 1, 1, rng=rng)),
                                   ("clip", Clip())])
    y, tape = forward(stack, rng.standard_normal((2, 1, 8, 8)).astype(np.float32))
    assert y.dtype == np.float32
    gx, grads = backward(stack, tape, np.ones_like(y))
    assert gx.dtype == np.float32
    assert all(g.dtype == np.float32 for g in grads.values())


# --- Adam -------------------------------------------------------------------

def test_adam_zero_gradient_leaves_parameters():
    p = {"w": np.array([1.0, -2.0], dtype=np.float32)}
    adam_step(AdamState(), p, {"w": np.zeros(2, np.float32)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    state = AdamState(lr=0.01, b1=0.5, b2=0.9, eps=0.0)
    p = {"w": np.zeros(3, np.float32)}
    adam_step(state, p, {"w": np.ones(3, np.float32)})
    np.testing.assert_allclose(p["w"], -0.01, rtol=1e-6)
    assert state.t_step == 1


def test_adam_second_identical_step_also_moves_by_lr():
    state = AdamState(lr=0.01, b1=0.5, b2=0.9, eps=0.0)
    p = {"w": np.zeros(1, np.float32)}
    g = {"w": np.ones(1, np.float32)}
    adam_step(state, p, g)
    first = p["w"].copy()
    adam_step(state, p, g)
    np.testing.assert_allclose(p["w"] - first, -0.01, rtol=1e-5)
    assert state.t_step == 2


def test_adam_rejects_non_finite_without_touching_state():
    state = AdamState()
    p = {"a": np.zeros(2, np.float32), "b": np.zeros(2, np.float32)}
    with pytest.raises(NonFiniteError):
        adam_step(state, p, {"a": np.ones(2, np.float32), "b": np.array([1, np.nan], np.float32)})
    assert state.t_step == 0 and not state.m
    assert not p["a"].any()


def test_adam_matches_float64_reference():
    rng = np.random.default_rng(5)
    g_seq = [rng.standard_normal(4) for _ in range(5)]
    state = AdamState(lr=1e-3, b1=0.5, b2=0.9, eps=1e-7)
    p = {"w": np.zeros(4, np.float32)}
    ref, m, v = np.zeros(4), np.zeros(4), np.zeros(4)
    for t, g in enumerate(g_seq, 1):
        adam_step(state, p, {"w": g.astype(np.float32)})
        m = 0.5 * m + 0.5 * g
        v = 0.9 * v + 0.1 * g * g
        ref -= 1e-3 * (m / (1 - 0.5 ** t)) / (np.sqrt(v / (1 - 0.9 ** t)) + 1e-7)
    np.testing.assert_allclose(p["w"], ref, rtol=1e-4)


def test_training_steps_are_bit_identical_for_same_seed():
    def run():
        rng = np.random.default_rng(11)
        stack = LayerStack((1, 8, 8), [("c", Conv2d(1, 4, 3, 2, 1, rng=rng)), ("bn", BatchNorm(4)),
                                       ("a", LeakyReLU()), ("t", ConvTranspose2d(4, 1, 3, 2, 1, 1, rng=rng))])
        state = AdamState()
        x = rng.standard_normal((4, 1, 8, 8)).astype(np.float32)
        for _ in range(5):
            y, tape = forward(stack, x)
            _, grads = backward(stack, tape, 2 * (y - x))
            adam_step(state, stack.parameters(), grads)
        return stack.state()

    a, b = run(), run()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes()
