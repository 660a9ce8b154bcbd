import numpy as np
import pytest

from spruft import tensor as T
from spruft.tensor import ContractError, ShapeError, Tape, backward, cache_total

from conftest import central_diff, rel_err


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        tape = Tape()
        m = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = T.matmul(tape.constant(np.eye(2)), tape.constant(m))
        np.testing.assert_array_equal(out.data, m)

    def test_hand_value(self):
        tape = Tape()
        out = tape.constant([[1.0, 2.0]]) @ tape.constant([[3.0], [4.0]])
        assert out.data.tolist() == [[11.0]]

    def test_triple_loop_oracle(self, rng):
        a, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 3))
        tape = Tape()
        out = T.matmul(tape.constant(a), tape.constant(b))
        np.testing.assert_allclose(out.data, naive_matmul(a, b), atol=1e-12, rtol=0)

    def test_shape_error_names_both_shapes(self):
        tape = Tape()
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(tape.constant(np.ones((2, 3))), tape.constant(np.ones((2, 3))))


class TestBackward:
    def test_linear_map_gradient_is_outer_product(self):
        tape = Tape()
        w = np.arange(6.0).reshape(2, 3)
        x = np.array([1.0, -2.0, 0.5])
        W = tape.param("W", w, trainable=True)
        loss = T.sum(T.matmul(W, tape.constant(x.reshape(3, 1))))
        g = backward(tape, loss)["W"]
        np.testing.assert_array_equal(g, np.outer(np.ones(2), x))

    def test_all_frozen_gives_empty_map(self, rng):
        tape = Tape()
        W = tape.param("W", rng.standard_normal((3, 3)))
        loss = T.sum(T.matmul(W, tape.constant(rng.standard_normal((3, 2)))))
        assert backward(tape, loss) == {}

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        W = tape.param("W", np.ones((2, 2)), trainable=True)
        with pytest.raises(ContractError):
            backward(tape, W @ tape.constant(np.ones((2, 1))))

    def test_unreached_leaf_gets_zeros(self):
        tape = Tape()
        a = tape.param("a", np.ones(3), trainable=True)
        tape.param("b", np.ones(2), trainable=True)
        g = backward(tape, T.sum(a * 2.0))
        np.testing.assert_array_equal(g["b"], np.zeros(2))
        np.testing.assert_array_equal(g["a"], np.full(3, 2.0))

    def test_determinism(self, rng):
        w, x = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))

        def run():
            tape = Tape()
            W = tape.param("W", w, trainable=True)
            loss = T.mean(T.gelu(T.linear(tape.constant(x), W)))
            return loss.item(), backward(tape, loss)["W"]

        (l1, g1), (l2, g2) = run(), run()
        assert l1 == l2
        np.testing.assert_array_equal(g1, g2)


def _scalar(op_out):
    # weighted sum so that every output coordinate matters
    w = np.cos(np.arange(op_out.size)).reshape(op_out.shape)
    return T.sum(T.mul(op_out, op_out.tape.constant(w)))


OPS = {
    "add": lambda a, b: T.add(a, b),
    "sub": lambda a, b: T.sub(a, b),
    "mul": lambda a, b: T.mul(a, b),
    "matmul": lambda a, b: T.matmul(a, T.transpose(b)),
    "linear": lambda a, b: T.linear(a, b),
    "relu": lambda a, b: T.relu(T.add(a, b)),
    "gelu": lambda a, b: T.gelu(T.mul(a, b)),
    "softmax": lambda a, b: T.softmax(T.add(a, b)),
    "mean_axis": lambda a, b: T.mean(T.mul(a, b), axis=0),
    "reshape": lambda a, b: T.reshape(T.add(a, b), (a.shape[1], a.shape[0])),
    "gather_scatter": lambda a, b: T.scatter_cols(T.gather_cols(T.mul(a, b), [0, 2]), [1, 3], 5),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(10))
def test_op_gradients_match_central_differences(name, seed):
    rng = np.random.default_rng(seed)
    a0, b0 = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    if name == "relu":
        a0 += np.sign(a0 + b0) * 0.1  # keep away from the kink

    def loss_and_grads():
        tape = Tape()
        a = tape.param("a", a0, trainable=True)
        b = tape.param("b", b0, trainable=True)
        loss = _scalar(OPS[name](a, b))
        return loss.item(), backward(tape, loss)

    _, grads = loss_and_grads()
    for key, arr in (("a", a0), ("b", b0)):
        fd = central_diff(lambda: loss_and_grads()[0], arr)
        assert rel_err(grads[key], fd) < 1e-6, key


@pytest.mark.parametrize("seed", range(10))
def test_layer_norm_and_cross_entropy_gradients(seed):
    rng = np.random.default_rng(seed)
    x0, g0, s0 = rng.standard_normal((4, 5)), rng.standard_normal(5), rng.standard_normal(5)
    labels = rng.integers(0, 5, size=4)

    def run():
        tape = Tape()
        x = tape.param("x", x0, trainable=True)
        g = tape.param("g", g0, trainable=True)
        s = tape.param("s", s0, trainable=True)
        loss = T.cross_entropy(T.layer_norm(x, g, s), labels)
        return loss.item(), backward(tape, loss)

    _, grads = run()
    for key, arr in (("x", x0), ("g", g0), ("s", s0)):
        assert rel_err(grads[key], central_diff(lambda: run()[0], arr)) < 1e-6


class TestLedger:
    def test_empty_tape(self):
        assert cache_total(Tape()) == 0

    def test_frozen_matmul_caches_nothing(self, rng):
        tape = Tape()
        W = tape.param("W", rng.standard_normal((3, 4)))
        T.linear(tape.constant(rng.standard_normal((6, 4))), W)
        assert cache_total(tape) == 0

    def test_lora_chain_entries(self, rng):
        b, d_in, r, d_out = 6, 5, 2, 4
        tape = Tape()
        x = tape.constant(rng.standard_normal((b, d_in)))
        A = tape.param("A", rng.standard_normal((r, d_in)), trainable=True)
        B = tape.param("B", np.zeros((d_out, r)), trainable=True)
        T.linear(T.linear(x, A), B)
        counts = sorted(e.element_count for e in tape.ledger)
        assert counts == sorted([b * d_in, b * r])

    def test_entry_counts_match_buffer_shapes(self, rng):
        tape = Tape()
        x = tape.constant(rng.standard_normal((3, 4)))
        W = tape.param("W", rng.standard_normal((2, 4)), trainable=True)
        T.softmax(T.linear(x, W))
        for e in tape.ledger:
            assert e.element_count > 0 and e.reason

    def test_dropout_mask_is_kind_mask(self, rng):
        tape = Tape()
        x = tape.param("x", rng.standard_normal((3, 4)), trainable=True)
        T.dropout(x, 0.5, rng)
        assert cache_total(tape, "mask") == 12
        tape2 = Tape()
        x2 = tape2.param("x", np.ones((3, 4)), trainable=True)
        T.dropout(x2, 0.5, rng, training=False)
        assert cache_total(tape2) == 0

    def test_values_stay_finite(self, rng):
        tape = Tape()
        x = tape.constant(rng.standard_normal((4, 3)) * 50)
        out = T.cross_entropy(T.softmax(x), np.array([0, 1, 2, 0]))
        assert np.isfinite(out.data).all()
