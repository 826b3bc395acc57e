import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from advdpnp import tensor as T


def mlp_fn(inp):
    h = T.relu(T.affine(inp["w0"], inp["x"], inp["b0"]))
    h = T.relu(T.affine(inp["w1"], h, inp["b1"]))
    return T.sum(T.square(T.affine(inp["w2"], h, inp["b2"])))


def mlp_point(rng, widths=(4, 6, 5, 3), batch=7):
    p = {"x": rng.standard_normal((batch, widths[0]))}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        p[f"w{i}"] = rng.standard_normal((a, b))
        p[f"b{i}"] = rng.standard_normal(b)
    return p


def straight_line_mlp(p):
    # independent scalar-loop evaluation
    rows = []
    for x in p["x"]:
        h = list(x)
        for i in range(3):
            w, b = p[f"w{i}"], p[f"b{i}"]
            out = []
            for j in range(w.shape[1]):
                s = b[j]
                for k in range(w.shape[0]):
                    s += h[k] * w[k, j]
                out.append(s if i == 2 else (s if s > 0 else 0.0))
            h = out
        rows.append(sum(v * v for v in h))
    return sum(rows)


def test_affine_scalar():
    out = T.forward(lambda i: T.affine(i["w"], i["x"], i["b"]), {"w": [[2.0]], "x": [[3.0]], "b": [1.0]})
    assert out["output"].item() == 7.0


def test_relu_negative():
    assert T.forward(lambda i: T.relu(i["x"]), {"x": -5.0})["output"] == 0.0


def test_mlp_matches_straight_line(rng):
    for _ in range(5):
        p = mlp_point(rng)
        got = T.forward(mlp_fn, p)["output"]
        assert abs(float(got) - straight_line_mlp(p)) <= 1e-12 * max(1.0, abs(float(got)))


def test_square_gradient():
    g = T.backward(lambda i: T.square(i["x"]), {"x": 3.0})
    assert g["x"] == 6.0


def test_barrier_blocks_gradient():
    def fn(i):
        return T.sum(T.square(T.stop_gradient(i["x"])) + i["y"])

    g = T.backward(fn, {"x": [1.0, 2.0], "y": [0.5, 0.5]})
    assert np.array_equal(g["x"], np.zeros(2))
    assert np.array_equal(g["y"], np.ones(2))


def test_barrier_forwards_value():
    x = T.Tensor([1.5, -2.0], requires_grad=True)
    assert np.array_equal(T.stop_gradient(x).data, x.data)


def test_random_net_matches_finite_differences(rng):
    for _ in range(3):
        assert T.grad_check(mlp_fn, mlp_point(rng, widths=(3, 4, 4, 2), batch=3)) <= 1e-4


def test_sum_of_squares_gradcheck(rng):
    assert T.grad_check(lambda i: T.sum(T.square(i["a"])), {"a": rng.standard_normal((3, 4))}) <= 1e-9


def test_ce_gradcheck(rng):
    labels = np.array([0, 2, 1, 1])

    def fn(i):
        return T.mean(-T.pick(T.log_softmax(i["z"]), labels))

    assert T.grad_check(fn, {"z": rng.standard_normal((4, 3))}) <= 1e-6


@pytest.mark.parametrize("op", ["exp", "log_softmax", "softmax", "l2_norm", "transpose", "inner", "max"])
def test_primitive_gradcheck(rng, op):
    a = rng.uniform(0.5, 2.0, size=(3, 4))
    b = rng.standard_normal((3, 4))
    w = rng.standard_normal((4, 3))

    def fn(i):
        x = i["a"]
        if op == "inner":
            out = T.inner(x, i["b"])
        elif op == "transpose":
            out = T.transpose(x) @ T.Tensor(w.T)
        else:
            out = getattr(T, op)(x)
        return T.sum(T.square(out))

    assert T.grad_check(fn, {"a": a, "b": b}) <= 1e-6


def test_conv_and_pool_gradcheck(rng):
    def fn(i):
        h = T.conv2d(i["x"], i["w"], i["b"], padding=1)
        return T.sum(T.square(T.maxpool2d(T.relu(h))))

    point = {"x": rng.standard_normal((2, 2, 4, 4)), "w": rng.standard_normal((3, 2, 3, 3)),
             "b": rng.standard_normal(3)}
    assert T.grad_check(fn, point) <= 1e-5


def test_conv_matches_loop(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    got = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    want = np.zeros((1, 3, 5, 5))
    for o in range(3):
        for r in range(5):
            for c in range(5):
                want[0, o, r, c] = np.sum(xp[0, :, r:r + 3, c:c + 3] * w[o]) + b[o]
    assert np.allclose(got, want, atol=1e-12)


def test_relu_subgradient_at_kink():
    g = T.backward(lambda i: T.sum(T.relu(i["x"])), {"x": [0.0, 1.0, -1.0]})
    assert np.array_equal(g["x"], [0.0, 1.0, 0.0])


def test_max_gradient_goes_to_first_maximum():
    g = T.backward(lambda i: T.sum(T.max(i["x"])), {"x": [[1.0, 3.0, 3.0]]})
    assert np.array_equal(g["x"], [[0.0, 1.0, 0.0]])


def test_non_scalar_backward_rejected():
    with pytest.raises(T.ShapeError):
        T.backward(lambda i: i["x"] * 2.0, {"x": [1.0, 2.0]})


def test_shape_mismatch_names_node():
    with pytest.raises(T.ShapeError) as exc:
        T.forward(lambda i: T.matmul(i["a"], i["b"]), {"a": np.ones((2, 3)), "b": np.ones((2, 3))})
    assert "matmul" in str(exc.value)


def test_non_finite_names_node():
    with pytest.raises(T.NonFiniteError) as exc:
        T.forward(lambda i: T.log(i["x"]), {"x": [0.0]})
    assert exc.value.node == "log"


def test_grad_check_rejects_bad_step():
    with pytest.raises(ValueError):
        T.grad_check(lambda i: T.sum(i["x"]), {"x": [1.0]}, step=0.1)


def test_corrupted_rule_is_detected(monkeypatch, rng):
    good = T.BACKWARD_RULES["exp"]
    monkeypatch.setitem(T.BACKWARD_RULES, "exp", lambda node, g: [1.01 * p for p in good(node, g)])
    assert T.grad_check(lambda i: T.sum(T.exp(i["x"])), {"x": rng.standard_normal(4)}) > 1e-3


def test_trace_is_topological(rng):
    g = T.trace(mlp_fn, mlp_point(rng))
    for i, node in enumerate(g.nodes):
        assert all(p < i for p in node.parents)
    assert set(g.inputs) == {"x", "w0", "b0", "w1", "b1", "w2", "b2"}
    assert g.outputs["output"] == len(g.nodes) - 1


def test_trace_marks_barrier():
    g = T.trace(lambda i: T.sum(T.stop_gradient(i["x"])), {"x": [1.0]})
    assert sum(n.barrier for n in g.nodes) == 1


def test_forward_is_deterministic(rng):
    p = mlp_point(rng)
    a, b = T.backward(mlp_fn, p), T.backward(mlp_fn, p)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_shared_subexpression_accumulates():
    g = T.backward(lambda i: T.sum(i["x"] * i["x"] + i["x"]), {"x": [2.0]})
    assert g["x"][0] == 5.0


finite = st.floats(-10, 10, allow_nan=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3,), elements=finite), arrays(np.float64, (3,), elements=finite),
       st.floats(-3, 3), st.floats(-3, 3))
def test_gradient_is_linear(u, v, a, b):
    def fn(i):
        return T.sum(T.square(i["x"]) * a + i["x"] * b)

    ga = T.backward(fn, {"x": u})["x"]
    assert np.allclose(ga, 2 * a * u + b, atol=1e-12)
    gsum = T.backward(lambda i: T.sum(T.square(i["x"])) + T.sum(i["x"] * b), {"x": v})["x"]
    assert np.allclose(gsum, 2 * v + b, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 5), elements=finite))
def test_log_softmax_rows_normalize(z):
    ls = T.log_softmax(T.Tensor(z)).data
    assert np.allclose(np.exp(ls).sum(axis=1), 1.0, atol=1e-12)
