import math

import numpy as np
import pytest

from conftest import finite_diff_max_rel, rand_tensor
from rolegnn import tensor as T
from rolegnn.errors import ShapeError
from rolegnn.tensor import Adam, Tensor


def test_sigmoid_symmetry():
    assert T.sigmoid(Tensor(np.zeros(3))).values.tolist() == [0.5, 0.5, 0.5]


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    out = T.matmul(Tensor(np.eye(3)), Tensor(a))
    np.testing.assert_allclose(out.values, a)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_logsumexp_ln2():
    out = T.logsumexp(Tensor(np.array([[0.0, 0.0]])), axis=1)
    assert abs(out.values[0] - math.log(2.0)) < 1e-12


def test_backward_quadratic():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = T.sum_(T.mul(w, w))
    T.backward(loss)
    assert w.grad.tolist() == [2.0, 4.0]


def test_backward_requires_scalar():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with pytest.raises(ShapeError):
        T.backward(T.mul(w, w))


def test_shared_subexpression_accumulates():
    # loss = sum(u + u) with u = w * a: d loss / d w = 2 a
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    a = Tensor(np.array([3.0, 5.0]))
    u = T.mul(w, a)
    loss = T.sum_(T.add(u, u))
    T.backward(loss)
    assert w.grad.tolist() == [6.0, 10.0]


def test_scalar_graph_oracle():
    # hand-derived scalar graph: f = (x*y + x)^2, df/dx = 2(xy+x)(y+1)
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = Tensor(np.array([-0.5]), requires_grad=True)
    f = T.sumsq(T.add(T.mul(x, y), x))
    T.backward(f)
    v = 1.5 * -0.5 + 1.5
    assert abs(x.grad[0] - 2 * v * (-0.5 + 1)) < 1e-12
    assert abs(y.grad[0] - 2 * v * 1.5) < 1e-12


def test_disconnected_parameter_zero_grad():
    w = Tensor(np.array([1.0]), requires_grad=True)
    lonely = Tensor(np.array([5.0]), requires_grad=True)
    T.backward(T.sum_(T.mul(w, w)))
    assert lonely.grad.tolist() == [0.0]


def test_tape_cleared_after_backward():
    w = Tensor(np.ones(2), requires_grad=True)
    T.backward(T.sum_(T.mul(w, w)))
    assert T.tape_size() == 0


def test_no_grad_records_nothing():
    w = Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        T.sum_(T.mul(w, w))
    assert T.tape_size() == 0


def _primitive_cases(rng):
    """(name, params, build_loss) triples covering every primitive op."""
    cases = []

    def case(name, params, fn):
        cases.append((name, params, fn))

    a = rand_tensor(rng, (4, 3))
    b = rand_tensor(rng, (3, 5))
    case("matmul", [a, b], lambda: T.sum_(T.sigmoid(T.matmul(a, b))))

    x = rand_tensor(rng, (4, 3))
    y = rand_tensor(rng, (3,))
    case("add_broadcast", [x, y], lambda: T.sumsq(T.add(x, y)))
    case("sub", [x, y], lambda: T.sumsq(T.sub(x, y)))
    case("mul_broadcast", [x, y], lambda: T.sumsq(T.mul(x, y)))

    g = rand_tensor(rng, (4, 1))
    h = rand_tensor(rng, (4, 3))
    case("mul_gate", [g, h], lambda: T.sumsq(T.mul(g, h)))

    c1 = rand_tensor(rng, (3, 2))
    c2 = rand_tensor(rng, (3, 4))
    case("concat", [c1, c2],
         lambda: T.sumsq(T.tanh(T.concat([c1, c2], axis=1))))

    r = rand_tensor(rng, (2, 6))
    case("reshape", [r], lambda: T.sumsq(T.sigmoid(T.reshape(r, (3, 4)))))
    case("transpose", [r], lambda: T.sumsq(T.tanh(T.transpose(r))))

    s = rand_tensor(rng, (6, 3))
    case("slice_rows", [s], lambda: T.sumsq(T.slice_rows(s, 1, 4)))

    e = rand_tensor(rng, (5, 3))
    idx = rng.integers(0, 5, size=8)
    case("take_rows", [e], lambda: T.sumsq(T.sigmoid(T.take_rows(e, idx))))

    z = rand_tensor(rng, (4, 3))
    case("sigmoid", [z], lambda: T.sumsq(T.sigmoid(z)))
    zr = rand_tensor(rng, (4, 3), away_from_zero=True)
    case("relu", [zr], lambda: T.sumsq(T.relu(zr)))
    case("tanh", [z], lambda: T.sumsq(T.tanh(z)))

    m = rand_tensor(rng, (4, 3))
    case("mean_axis", [m], lambda: T.sumsq(T.mean(m, axis=0)))
    case("mean_all", [m], lambda: T.sumsq(T.mean(m)))
    case("sum_axis", [m], lambda: T.sumsq(T.sum_(m, axis=1)))
    case("logsumexp", [m], lambda: T.sumsq(T.logsumexp(m, axis=1)))
    case("sumsq_axis", [m], lambda: T.sum_(T.sumsq(m, axis=1)))
    case("scale", [m], lambda: T.sumsq(T.scale(m, -2.5)))

    d = rand_tensor(rng, (6, 4))
    case("dropout", [d],
         lambda: T.sumsq(T.dropout(d, 0.3, True, np.random.default_rng(11))))

    sv = rand_tensor(rng, (7, 3))
    seg = rng.integers(0, 4, size=7)
    case("segment_mean", [sv], lambda: T.sumsq(T.segment_mean(sv, seg, 5)))
    case("segment_sum", [sv], lambda: T.sumsq(T.segment_sum(sv, seg, 5)))
    sm = rand_tensor(rng, (7, 3), away_from_zero=True)
    case("segment_max", [sm], lambda: T.sumsq(T.segment_max(sm, seg, 5)))

    sp = rand_tensor(rng, (4, 3))
    case("softplus", [sp], lambda: T.sumsq(T.softplus(sp)))
    ab = rand_tensor(rng, (4, 3), away_from_zero=True)
    case("abs", [ab], lambda: T.sum_(T.abs_(ab)))

    lg = rand_tensor(rng, (6,))
    targets = rng.integers(0, 2, size=6).astype(float)
    case("bce_with_logits", [lg], lambda: T.bce_with_logits(lg, targets))
    return cases


@pytest.mark.parametrize("trial", range(3))
def test_gradcheck_every_primitive(trial):
    rng = np.random.default_rng(100 + trial)
    for name, params, fn in _primitive_cases(rng):
        worst = finite_diff_max_rel(fn, params)
        assert worst <= 1e-4, f"{name}: max rel err {worst:.2e}"


def test_init_param_bounds_and_determinism():
    p = T.init_param((3, 3), fan_in=3, seed=5)
    assert np.abs(p.values).max() <= 1.0  # sqrt(6/(3+3)) = 1
    q = T.init_param((3, 3), fan_in=3, seed=5)
    np.testing.assert_array_equal(p.values, q.values)
    assert p.requires_grad and p.grad.shape == (3, 3)


def test_init_param_mean_near_zero():
    p = T.init_param((100, 100), fan_in=100, seed=9)
    assert abs(p.values.mean()) < 0.02


def test_adam_quadratic_convergence():
    w = Tensor(np.array([0.0]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(200):
        T.backward(T.sumsq(T.add(w, Tensor(np.array([-3.0])))))
        opt.step()
    assert abs(w.values[0] - 3.0) < 1e-2


def test_adam_zero_grad_leaves_param():
    w = Tensor(np.array([1.5]), requires_grad=True)
    opt = Adam([w], lr=0.1)
    opt.step()  # grad is zero
    assert w.values[0] == 1.5


def test_adam_symmetry_and_grad_zeroing():
    w1 = Tensor(np.array([1.0]), requires_grad=True)
    w2 = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam([w1, w2], lr=0.05)
    w1.grad[:] = 0.7
    w2.grad[:] = 0.7
    opt.step()
    assert w1.values[0] == w2.values[0]
    assert w1.grad[0] == 0.0 and w2.grad[0] == 0.0


def test_dropout_eval_is_identity():
    x = Tensor(np.ones((5, 5)))
    assert T.dropout(x, 0.5, train=False) is x


def test_dropout_inverted_scaling():
    rng = np.random.default_rng(3)
    x = Tensor(np.ones((2000, 4)))
    out = T.dropout(x, 0.25, train=True, rng=rng)
    kept = out.values[out.values > 0]
    np.testing.assert_allclose(kept, 1.0 / 0.75)
    assert abs(out.values.mean() - 1.0) < 0.05


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    named = {"a.W": Tensor(rng.normal(size=(3, 4))),
             "b": Tensor(rng.normal(size=(7,)))}
    path = tmp_path / "params.bin"
    T.save_tensors(path, named)
    loaded = T.load_tensors(path)
    assert set(loaded) == {"a.W", "b"}
    for k in named:
        np.testing.assert_array_equal(loaded[k], named[k].values)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        T.load_tensors(path)
