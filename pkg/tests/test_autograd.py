import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from splitfed.autograd import (
    Graph,
    NonFiniteError,
    ShapeError,
    Tensor,
    backward,
    batchnorm2d,
    concat_channels,
    conv2d,
    dice_loss,
    maxpool2d,
    mul,
    relu,
    softmax_channels,
    tensor_sum,
    upsample_nearest2x,
)
from splitfed.gradcheck import check_gradients, numeric_grad, rel_error

TOL = 1e-4
N_INSTANCES = 20


def rng(i):
    return np.random.default_rng(1000 + i)


# ------------------------------------------------------------------- conv2d

def test_conv_identity_kernel():
    x = rng(0).standard_normal((2, 1, 5, 6))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_zero_input_gives_bias():
    k = rng(1).standard_normal((3, 2, 3, 3))
    out = conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(k), Tensor(np.array([0.5, -1.0, 2.0])))
    for c, b in enumerate([0.5, -1.0, 2.0]):
        assert np.all(out.data[0, c] == b)


def test_conv_center_value():
    x = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.data[0, 0, 1, 1] == 45.0
    # corner sees the 2x2 block 1+2+4+5 under zero padding
    assert out.data[0, 0, 0, 0] == 12.0


def test_conv_matches_direct_loop():
    x = rng(2).standard_normal((2, 3, 5, 4))
    k = rng(3).standard_normal((2, 3, 3, 3))
    b = rng(4).standard_normal(2)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 2, 5, 4))
    for n in range(2):
        for o in range(2):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = (xp[n, :, i:i + 3, j:j + 3] * k[o]).sum() + b[o]
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(k), Tensor(b)).data, ref, rtol=0, atol=1e-12)


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(1, 3, 3, 3\)"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))), Tensor(np.zeros(1)))
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_conv_gradcheck(i):
    r = rng(i)
    c, o, k = r.integers(1, 4), r.integers(1, 4), r.choice([1, 3])
    x = r.standard_normal((2, c, 4, 5))
    assert check_gradients(conv2d, [x, r.standard_normal((o, c, k, k)), r.standard_normal(o)]) <= TOL


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(-5, 5, allow_nan=False), seed=st.integers(0, 10_000))
def test_conv_linear_in_input_and_kernel(alpha, seed):
    r = np.random.default_rng(seed)
    x, k = r.standard_normal((1, 2, 4, 4)), r.standard_normal((3, 2, 3, 3))
    zero = Tensor(np.zeros(3))
    base = conv2d(Tensor(x), Tensor(k), zero).data
    np.testing.assert_allclose(conv2d(Tensor(alpha * x), Tensor(k), zero).data, alpha * base, rtol=0, atol=1e-10)
    np.testing.assert_allclose(conv2d(Tensor(x), Tensor(alpha * k), zero).data, alpha * base, rtol=0, atol=1e-10)


# --------------------------------------------------------------------- relu

def test_relu_values_and_identity():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    x = np.array([0.5, 3.0, 1e-3])
    np.testing.assert_array_equal(relu(Tensor(x)).data, x)


def test_relu_gradient_mask():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    backward(tensor_sum(relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])
    fd = numeric_grad(lambda: float(relu(Tensor(x.data)).data.sum()), x.data)
    np.testing.assert_allclose(fd, [0.0, 1.0], atol=1e-9)


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_relu_gradcheck(i):
    x = rng(i).standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the kink
    assert check_gradients(relu, [x]) <= TOL


# ---------------------------------------------------------------- batchnorm

def _bn_train(x, g, b):
    c = x.shape[1]
    return batchnorm2d(x, g, b, np.zeros(c), np.ones(c), training=True)


def test_batchnorm_standardized_input_is_identity():
    x = rng(5).standard_normal((4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = _bn_train(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    # equal to x up to the variance epsilon
    assert np.max(np.abs(out.data - x / np.sqrt(1 + 1e-5))) < 1e-6


def test_batchnorm_zero_gamma_gives_beta():
    x = rng(6).standard_normal((2, 3, 4, 4))
    beta = np.array([0.1, -2.0, 3.0])
    out = _bn_train(Tensor(x), Tensor(np.zeros(3)), Tensor(beta))
    np.testing.assert_array_equal(out.data, np.broadcast_to(beta.reshape(1, 3, 1, 1), x.shape))


def test_batchnorm_running_stats_and_eval():
    x = rng(7).standard_normal((3, 2, 4, 4)) * 2 + 1
    rm, rv = np.zeros(2), np.ones(2)
    batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    n = 3 * 16
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1), rtol=1e-12)
    out = batchnorm2d(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=False)
    ref = (x - rm.reshape(1, 2, 1, 1)) / np.sqrt(rv.reshape(1, 2, 1, 1) + 1e-5)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12)


def test_batchnorm_single_element_train_rejected():
    with pytest.raises(ShapeError):
        _bn_train(Tensor(np.ones((1, 2, 1, 1))), Tensor(np.ones(2)), Tensor(np.zeros(2)))


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_batchnorm_gradcheck_train(i):
    r = rng(i)
    args = [r.standard_normal((2, 3, 4, 4)), r.standard_normal(3), r.standard_normal(3)]
    assert check_gradients(_bn_train, args) <= TOL


@pytest.mark.parametrize("i", range(5))
def test_batchnorm_gradcheck_eval(i):
    r = rng(i)
    rm, rv = r.standard_normal(3), r.uniform(0.5, 2.0, 3)

    def f(x, g, b):
        return batchnorm2d(x, g, b, rm, rv, training=False)
    args = [r.standard_normal((2, 3, 4, 4)), r.standard_normal(3), r.standard_normal(3)]
    assert check_gradients(f, args) <= TOL


# ------------------------------------------------------------ pool/upsample

def test_maxpool_examples():
    np.testing.assert_array_equal(maxpool2d(Tensor(np.full((1, 2, 4, 4), 3.5))).data, np.full((1, 2, 2, 2), 3.5))
    assert maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))).data.item() == 4.0


def test_maxpool_tie_routes_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(tensor_sum(maxpool2d(x)))
    np.testing.assert_array_equal(x.grad, [[[[1.0, 0.0], [0.0, 0.0]]]])


def test_maxpool_odd_rejected():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.zeros((1, 1, 3, 4))))


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_maxpool_gradcheck(i):
    assert check_gradients(maxpool2d, [rng(i).standard_normal((2, 2, 4, 6))]) <= TOL


def test_upsample_examples():
    out = upsample_nearest2x(Tensor(np.array([[[[7.0]]]])))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 7.0))
    x = np.abs(rng(8).standard_normal((2, 3, 4, 4)))
    np.testing.assert_array_equal(maxpool2d(upsample_nearest2x(Tensor(x))).data, x)


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_upsample_gradcheck(i):
    assert check_gradients(upsample_nearest2x, [rng(i).standard_normal((2, 2, 3, 4))]) <= TOL


# ------------------------------------------------------------------- concat

def test_concat_examples():
    x = rng(9).standard_normal((1, 2, 4, 4))
    np.testing.assert_array_equal(concat_channels(Tensor(x), Tensor(np.zeros((1, 0, 4, 4)))).data, x)
    assert concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 4, 4)))).shape == (1, 5, 4, 4)
    with pytest.raises(ShapeError):
        concat_channels(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 2, 2, 4))))


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_concat_gradcheck(i):
    r = rng(i)
    assert check_gradients(concat_channels, [r.standard_normal((2, 2, 3, 3)), r.standard_normal((2, 1, 3, 3))]) <= TOL


# ------------------------------------------------------------------ softmax

def test_softmax_equal_channels_uniform():
    out = softmax_channels(Tensor(np.full((2, 4, 3, 3), 1.7)))
    np.testing.assert_allclose(out.data, 0.25, rtol=0, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(x=arrays(np.float64, (2, 3, 2, 2), elements=st.floats(-50, 50)), c=st.floats(-100, 100))
def test_softmax_shift_invariance_and_simplex(x, c):
    a = softmax_channels(Tensor(x)).data
    b = softmax_channels(Tensor(x + c)).data
    assert np.max(np.abs(a - b)) <= 1e-12
    assert np.max(np.abs(a.sum(axis=1) - 1.0)) <= 1e-9
    assert np.all(a >= 0) and np.all(a <= 1)


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_softmax_gradcheck(i):
    assert check_gradients(softmax_channels, [2 * rng(i).standard_normal((2, 4, 3, 3))]) <= TOL


# --------------------------------------------------------------------- dice

def _onehot(labels, c):
    return (labels[:, None] == np.arange(c).reshape(1, -1, 1, 1)).astype(float)


def test_dice_perfect_prediction():
    t = _onehot(rng(10).integers(0, 3, (2, 4, 4)), 3)
    assert abs(dice_loss(Tensor(t), t).item()) <= 1e-5


def test_dice_hand_value():
    probs = np.array([0.5, 0.5]).reshape(1, 2, 1, 1)
    target = np.array([1.0, 0.0]).reshape(1, 2, 1, 1)
    eps = 1e-6
    # class 0 overlaps: (2*0.5)/(0.5+1); class 1 has no overlap: eps/(0.5+eps)
    exact = 1.0 - 0.5 * ((2 * 0.5 + eps) / (1.5 + eps) + eps / (0.5 + eps))
    got = dice_loss(Tensor(probs), target).item()
    assert abs(got - exact) <= 1e-15
    assert abs(got - 2.0 / 3.0) <= 2e-6


def test_dice_shape_mismatch():
    with pytest.raises(ShapeError):
        dice_loss(Tensor(np.zeros((1, 2, 2, 2))), np.zeros((1, 3, 2, 2)))


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_dice_gradcheck(i):
    r = rng(i)
    probs = softmax_channels(Tensor(r.standard_normal((2, 3, 4, 4)))).data
    target = _onehot(r.integers(0, 3, (2, 4, 4)), 3)
    assert check_gradients(lambda p: dice_loss(p, target), [probs]) <= TOL


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 20))
def test_dice_of_softmax_in_unit_interval(seed, scale):
    r = np.random.default_rng(seed)
    probs = softmax_channels(Tensor(scale * r.standard_normal((2, 4, 3, 3))))
    target = _onehot(r.integers(0, 4, (2, 3, 3)), 4)
    assert 0.0 <= dice_loss(probs, target).item() <= 1.0


# ----------------------------------------------------------------- backward

def test_backward_sum_of_leaf():
    x = Tensor(rng(11).standard_normal((3, 4)), requires_grad=True)
    backward(tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_constant_root():
    x = Tensor(rng(12).standard_normal(5), requires_grad=True)
    root = tensor_sum(mul(x, 0.0)) + 3.0
    backward(root)
    np.testing.assert_array_equal(x.grad, np.zeros(5))
    y = Tensor(np.ones(2), requires_grad=True)
    backward(Tensor(np.array(2.0)))  # root does not depend on y at all
    assert y.grad is None


def test_backward_rejects_non_scalar_root():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ShapeError):
        backward(relu(x))


def test_fanout_gradients_sum_exactly():
    r = rng(13)
    xv, a, b = r.standard_normal(6), r.standard_normal(6), r.standard_normal(6)

    def grad_of(build):
        x = Tensor(xv.copy(), requires_grad=True)
        backward(build(x))
        return x.grad
    g1 = grad_of(lambda x: tensor_sum(mul(relu(x), a)))
    g2 = grad_of(lambda x: tensor_sum(mul(x, b)))
    both = grad_of(lambda x: tensor_sum(mul(relu(x), a)) + tensor_sum(mul(x, b)))
    np.testing.assert_array_equal(both, g1 + g2)


def test_graph_is_topological_and_visits_once():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    h = relu(x)
    root = tensor_sum(concat_channels(h, h))
    g = Graph(root)
    ids = [id(n) for n in g.nodes]
    assert len(ids) == len(set(ids))
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            if p.requires_grad:
                assert pos[id(p)] < pos[id(n)]
    backward(root)
    np.testing.assert_array_equal(x.grad, np.full((1, 1, 2, 2), 2.0))


@pytest.mark.parametrize("i", range(N_INSTANCES))
def test_composite_graph_gradcheck(i):
    r = rng(i)

    def net(x, k1, b1, k2, b2, g, be):
        h = relu(_bn_train(conv2d(x, k1, b1), g, be))
        skip = h
        h = upsample_nearest2x(maxpool2d(h))
        h = conv2d(concat_channels(h, skip), k2, b2)
        return dice_loss(softmax_channels(h), target)
    target = _onehot(r.integers(0, 3, (2, 4, 4)), 3)
    args = [r.standard_normal((2, 1, 4, 4)), r.standard_normal((2, 1, 3, 3)), r.standard_normal(2),
            r.standard_normal((3, 4, 3, 3)), r.standard_normal(3), r.standard_normal(2) + 1.5,
            r.standard_normal(2)]
    assert check_gradients(net, args) <= TOL


def test_non_finite_from_finite_inputs_is_reported():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        mul(Tensor(np.array([1e300])), Tensor(np.array([1e300])))
    # non-finite inputs propagate without raising
    out = mul(Tensor(np.array([np.nan])), 2.0)
    assert np.isnan(out.data).all()


def test_rel_error_metric():
    assert rel_error(np.array([1000.0]), np.array([1001.0])) == pytest.approx(1 / 1001)
    assert rel_error(np.array([0.1]), np.array([0.2])) == pytest.approx(0.1)
