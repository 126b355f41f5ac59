import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argen import autograd as ag
from argen import kernels
from argen.autograd import Parameter, Tape, Tensor
from argen.checkpoint import load_checkpoint, save_checkpoint
from argen.errors import DataError, DimensionError, GradCheckRefused, NumericError
from argen.optim import Adam, clip_global_norm, global_norm


def _exact_softmax(values):
    getcontext().prec = 50
    exps = [Decimal(v).exp() for v in values]
    total = sum(exps)
    return [float(e / total) for e in exps]


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = ag.matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_annihilator(self):
        out = ag.matmul(Tensor(np.zeros((2, 2))), Tensor(np.arange(6.0).reshape(2, 3)))
        np.testing.assert_array_equal(out.data, np.zeros((2, 3)))

    def test_hand_product(self):
        out = ag.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0, 6.0], [7.0, 8.0]]))
        np.testing.assert_array_equal(out.data, [[19.0, 22.0], [43.0, 50.0]])

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ag.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ag.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    @pytest.mark.parametrize("x", [-1e3, 0.0, 7.5, 1e3])
    def test_single(self, x):
        assert ag.softmax(Tensor([x])).data.tolist() == [1.0]

    def test_against_extended_precision(self):
        np.testing.assert_allclose(ag.softmax(Tensor([1.0, 2.0, 3.0])).data, _exact_softmax([1, 2, 3]), rtol=1e-14)

    def test_empty(self):
        with pytest.raises(DimensionError):
            ag.softmax(Tensor(np.zeros(0)))

    def test_sums_to_one_random(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = rng.integers(1, 40)
            p = ag.softmax(Tensor(rng.uniform(-50, 50, size=n))).data
            assert (p >= 0).all()
            assert abs(p.sum() - 1.0) < 1e-12

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=30))
    def test_sums_to_one_property(self, logits):
        assert abs(ag.softmax(Tensor(logits)).data.sum() - 1.0) < 1e-9

    def test_mask_zeroes_positions(self):
        p = ag.softmax(Tensor([[1.0, 5.0, 2.0]]), mask=np.array([[1, 0, 1]])).data
        assert p[0, 1] == 0.0
        np.testing.assert_allclose(p[0, [0, 2]], _exact_softmax([1, 2]), rtol=1e-14)


class TestActivation:
    def test_symmetry_points(self):
        assert ag.activation(Tensor(0.0), "tanh").item() == 0.0
        assert ag.activation(Tensor(0.0), "sigmoid").item() == 0.5

    def test_saturation(self):
        assert abs(ag.activation(Tensor(40.0), "tanh").item() - 1.0) < 1e-9
        assert abs(ag.activation(Tensor(-40.0), "tanh").item() + 1.0) < 1e-9

    def test_sigmoid_one(self):
        assert abs(ag.activation(Tensor(1.0), "sigmoid").item() - 1.0 / (1.0 + math.exp(-1.0))) < 1e-15

    def test_non_finite(self):
        with pytest.raises(NumericError):
            ag.activation(Tensor([np.nan]), "tanh")


def _scalar_lstm(x, h, c, wx, wh, b):
    """Gate equations written out for d_in = d = 1."""
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    zi, zf, zg, zo = (wx[k] * x + wh[k] * h + b[k] for k in range(4))
    i, f, g, o = sig(zi), sig(zf), math.tanh(zg), sig(zo)
    c_new = f * c + i * g
    return o * math.tanh(c_new), c_new


class TestLSTMCell:
    def test_zero_weights(self):
        rng = np.random.default_rng(1)
        h, c = ag.lstm_cell(
            Tensor(rng.normal(size=3)), Tensor(np.zeros(2)), Tensor(np.zeros(2)),
            Tensor(np.zeros((3, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)),
        )
        np.testing.assert_array_equal(h.data, np.zeros(2))

    def test_scalar_hand_computation(self):
        wx, wh, b = [0.5, -0.3, 0.8, 1.2], [0.1, 0.4, -0.7, 0.2], [0.0, 1.0, 0.1, -0.2]
        h, c = ag.lstm_cell(
            Tensor([0.9]), Tensor([-0.4]), Tensor([0.3]),
            Tensor([wx]), Tensor([wh]), Tensor(b),
        )
        eh, ec = _scalar_lstm(0.9, -0.4, 0.3, wx, wh, b)
        assert abs(h.data[0] - eh) < 1e-14
        assert abs(c.data[0] - ec) < 1e-14

    def test_deterministic(self):
        rng = np.random.default_rng(2)
        args = [Tensor(rng.normal(size=s)) for s in [(3,), (2,), (2,), (3, 8), (2, 8), (8,)]]
        h1, c1 = ag.lstm_cell(*args)
        h2, c2 = ag.lstm_cell(*args)
        np.testing.assert_array_equal(h1.data, h2.data)
        np.testing.assert_array_equal(c1.data, c2.data)

    @pytest.mark.parametrize("max_scale,bound_ok", [(2.0, lambda h: (np.abs(h) < 1).all()),
                                                    (50.0, lambda h: (np.abs(h) <= 1).all())])
    def test_output_bounded(self, max_scale, bound_ok):
        # exact +-1 is only reachable once tanh/sigmoid round to 1 in float64
        rng = np.random.default_rng(3)
        for _ in range(200):
            scale = rng.uniform(0.1, max_scale)
            h, _ = ag.lstm_cell(
                Tensor(rng.normal(size=(4, 3)) * scale), Tensor(rng.uniform(-1, 1, (4, 2))),
                Tensor(rng.normal(size=(4, 2)) * scale), Tensor(rng.normal(size=(3, 8)) * scale),
                Tensor(rng.normal(size=(2, 8))), Tensor(rng.normal(size=8)),
            )
            assert bound_ok(h.data)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ag.lstm_cell(Tensor(np.zeros(3)), Tensor(np.zeros(2)), Tensor(np.zeros(2)),
                         Tensor(np.zeros((4, 8))), Tensor(np.zeros((2, 8))), Tensor(np.zeros(8)))


class TestCrossEntropy:
    def test_perfect(self):
        assert ag.cross_entropy(Tensor([0.0, 1.0, 0.0]), 1).item() == 0.0

    def test_uniform(self):
        assert abs(ag.cross_entropy(Tensor([0.25] * 4), 2).item() - math.log(4)) < 1e-15

    def test_quarter_among_others(self):
        assert abs(ag.cross_entropy(Tensor([0.6, 0.25, 0.1, 0.05]), 1).item() - math.log(4)) < 1e-15

    def test_floor(self):
        assert ag.cross_entropy(Tensor([1.0, 0.0]), 1).item() == pytest.approx(-math.log(1e-12))

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            ag.cross_entropy(Tensor([0.5, 0.5]), 2)


class TestBackward:
    def test_linear(self):
        w = Parameter("w", 0.7)
        with Tape() as tape:
            loss = w * 3.0
        tape.backward(loss)
        assert w.grad == 3.0

    def test_tanh_at_zero(self):
        w = Parameter("w", 0.0)
        with Tape() as tape:
            loss = ag.tanh(w)
        tape.backward(loss)
        assert w.grad == 1.0

    def test_unreached_stays_zero(self):
        w, u = Parameter("w", 1.0), Parameter("u", 2.0)
        with Tape() as tape:
            loss = w * w
        tape.backward(loss)
        assert u.grad == 0.0

    def test_non_scalar(self):
        w = Parameter("w", [1.0, 2.0])
        with Tape() as tape:
            y = w * 2.0
        with pytest.raises(DimensionError):
            tape.backward(y)

    def test_reverse_order(self):
        w = Parameter("w", 0.3)
        with Tape() as tape:
            a = ag.tanh(w)
            b = a * a
            loss = ag.sum(b)
        assert [n.outputs[0] for n in tape.nodes] == [a, b, loss]

    def test_mlp_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        w1 = Parameter("w1", rng.normal(size=(3, 5)))
        b1 = Parameter("b1", rng.normal(size=5))
        w2 = Parameter("w2", rng.normal(size=(5, 4)))
        x = Tensor(rng.normal(size=(2, 3)))

        def f():
            hidden = ag.tanh(x @ w1 + b1)
            probs = ag.softmax(hidden @ w2)
            return ag.cross_entropy(probs, [1, 3])

        report = ag.grad_check(f, [w1, b1, w2], eps=1e-5)
        assert report.passed(1e-4), report


class TestGradCheck:
    def test_quadratic(self):
        w = Parameter("w", 2.0)
        with Tape() as tape:
            loss = w * w
        tape.backward(loss)
        assert w.grad == 4.0
        report = ag.grad_check(lambda: w * w, [w], eps=1e-5)
        assert report.max_rel_error < 1e-8

    def test_refuses_live_dropout(self):
        w = Parameter("w", np.ones(20))
        drop = ag.Dropout(0.5, seed=0)
        drop.training = True
        with pytest.raises(GradCheckRefused):
            ag.grad_check(lambda: ag.sum(drop(w) * w), [w])

    def test_frozen_dropout_allowed(self):
        w = Parameter("w", np.linspace(-1, 1, 20))
        drop = ag.Dropout(0.5, seed=0)
        drop.training = True
        drop.freeze()

        def f():
            drop.begin_pass()
            return ag.sum(ag.tanh(drop(w)) * w)

        assert ag.grad_check(f, [w]).passed(1e-6)

    def test_rejects_bad_eps(self):
        with pytest.raises(ValueError):
            ag.grad_check(lambda: Tensor(0.0), [], eps=0.0)


_UNARY = ["tanh", "sigmoid", "square", "softmax", "scale"]


def _apply(op, t, rng_vals):
    if op == "tanh":
        return ag.tanh(t)
    if op == "sigmoid":
        return ag.sigmoid(t)
    if op == "square":
        return t * t
    if op == "softmax":
        return ag.softmax(t)
    return ag.scale(t, float(rng_vals))


@settings(max_examples=40, deadline=None)
@given(
    ops=st.lists(st.sampled_from(_UNARY + ["matmul", "add_bias", "lstm", "concat_self"]), min_size=1, max_size=5),
    seed=st.integers(0, 2**16),
)
def test_random_graph_gradients(ops, seed):
    rng = np.random.default_rng(seed)
    d = 3
    w = Parameter("w", rng.normal(scale=0.7, size=(d, d)))
    b = Parameter("b", rng.normal(scale=0.5, size=d))
    wx = Parameter("wx", rng.normal(scale=0.5, size=(d, 4 * d)))
    wh = Parameter("wh", rng.normal(scale=0.5, size=(d, 4 * d)))
    wc = Parameter("wc", rng.normal(scale=0.5, size=(2 * d, d)))
    x = Tensor(rng.normal(size=(2, d)))
    scales = rng.uniform(-1.5, 1.5, size=len(ops))

    def f():
        t = x
        for op, s in zip(ops, scales):
            if op == "matmul":
                t = t @ w
            elif op == "add_bias":
                t = t + b
            elif op == "lstm":
                t, _ = ag.lstm_cell(t, ag.tanh(t), t, wx, wh, ag.concat([b, b, b, b]))
            elif op == "concat_self":
                t = ag.concat([t, ag.tanh(t)]) @ wc
            else:
                t = _apply(op, t, s)
        probs = ag.softmax(t @ w)
        return ag.cross_entropy(probs, [0, 2])

    # central differences at eps=1e-5 carry ~1e-11 absolute roundoff on O(1)
    # losses, so gradients below 1e-6 are compared absolutely
    report = ag.grad_check(f, [w, b, wx, wh, wc], eps=1e-5, abs_floor=1e-6)
    assert report.passed(1e-4), (ops, report)


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(9)
        w = Parameter("w", rng.normal(size=(4, 4)))
        drop = ag.Dropout(0.8, seed=5)
        drop.training = True
        with Tape() as tape:
            loss = ag.sum(ag.tanh(drop(Tensor(rng.normal(size=(3, 4)))) @ w))
        tape.backward(loss)
        return loss.item(), w.grad.copy()

    (l1, g1), (l2, g2) = run(), run()
    assert l1 == l2
    np.testing.assert_array_equal(g1, g2)


class TestKernelsAgree:
    def test_backends_match(self):
        backends = kernels.available_backends()
        rng = np.random.default_rng(11)
        z = rng.normal(size=(5, 12)) * 3
        c = rng.normal(size=(5, 3))
        ref = backends["python"].lstm_gates_forward(z, c)
        for mod in backends.values():
            out = mod.lstm_gates_forward(z, c)
            for a, e in zip(out, ref):
                np.testing.assert_allclose(a, e, rtol=1e-13, atol=1e-15)
            dh, dc = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
            got = mod.lstm_gates_backward(dh, dc, ref[2], ref[3], c)
            want = backends["python"].lstm_gates_backward(dh, dc, ref[2], ref[3], c)
            for a, e in zip(got, want):
                np.testing.assert_allclose(a, e, rtol=1e-13, atol=1e-15)

    def test_sparse_scores_match(self):
        backends = kernels.available_backends()
        indptr = np.array([0, 2, 3, 5], dtype=np.int64)
        docs = np.array([0, 2, 1, 0, 1], dtype=np.int64)
        weights = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        for mod in backends.values():
            got = mod.accumulate_scores(indptr, docs, weights, [0, 2], [0.5, 2.0], 3)
            np.testing.assert_allclose(got, [0.5 + 8.0, 10.0, 1.0])


def test_clip_global_norm_exact():
    p = Parameter("p", np.zeros(2))
    q = Parameter("q", np.zeros(1))
    p.grad = np.array([6.0, 0.0])
    q.grad = np.array([8.0])
    before = clip_global_norm([p, q], 2.0)
    assert before == 10.0
    assert abs(global_norm([p, q]) - 2.0) < 1e-15


def test_adam_minimises_quadratic():
    w = Parameter("w", np.array([3.0, -2.0]))
    opt = Adam([w], lr=0.1)
    for _ in range(300):
        opt.zero_grad()
        with Tape() as tape:
            loss = ag.sum(w * w)
        tape.backward(loss)
        opt.step()
    assert np.abs(w.data).max() < 1e-2


def test_checkpoint_roundtrip(tmp_path):
    tensors = {"a": np.arange(6.0).reshape(2, 3), "b": np.array([1.5])}
    save_checkpoint(tmp_path / "x.ckpt", tensors, {"seed": 3})
    save_checkpoint(tmp_path / "y.ckpt", tensors, {"seed": 3})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()
    loaded, meta = load_checkpoint(tmp_path / "x.ckpt")
    assert meta == {"seed": 3}
    for k, v in tensors.items():
        np.testing.assert_array_equal(loaded[k], v)


def test_checkpoint_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"nope")
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "bad")
