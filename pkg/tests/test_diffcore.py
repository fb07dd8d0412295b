import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from uqstp import diffcore as dc


def backprop(f, *xs):
    vals = [dc.Value(x, requires_grad=True) for x in xs]
    with dc.Tape() as tape:
        out = f(*vals)
    tape.backward(out)
    return out, [v.grad for v in vals]


def test_relu_values():
    assert np.array_equal(dc.relu(dc.Value([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_matmul_identity():
    X = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(dc.matmul(np.eye(2), X).data, X)


def test_grad_of_sum_of_squares_matches_central_difference():
    _, (g,) = backprop(lambda x: dc.sum_axis(x * x), [1.0, 2.0])
    h = 1e-5
    f = lambda v: float(np.sum(np.asarray(v) ** 2))
    num = [(f([1 + h, 2]) - f([1 - h, 2])) / (2 * h), (f([1, 2 + h]) - f([1, 2 - h])) / (2 * h)]
    assert np.allclose(g, num, atol=1e-8)
    assert np.allclose(g, [2.0, 4.0])


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        dc.matmul(np.ones((2, 3)), np.ones((4, 5)))
    with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
        dc.add(np.ones(2), np.ones(3))


def test_second_backward_rejected():
    x = dc.Value([1.0], requires_grad=True)
    with dc.Tape() as tape:
        y = dc.sum_axis(x * 3.0)
    tape.backward(y)
    with pytest.raises(RuntimeError, match="already replayed"):
        tape.backward(y)


def test_backward_needs_scalar():
    x = dc.Value([1.0, 2.0], requires_grad=True)
    with dc.Tape() as tape:
        y = x * 2.0
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(y)


def test_no_tape_means_plain_forward():
    x = dc.Value([1.0, 2.0], requires_grad=True)
    y = x * x
    assert y.parents == () and not y.requires_grad


def test_grad_accumulates_over_reuse():
    _, (g,) = backprop(lambda x: dc.sum_axis(x * x + x * 3.0), [2.0])
    assert np.allclose(g, [7.0])


# eig_sym

def test_eig_identity():
    w, V = dc.eig_sym(np.eye(2))
    assert np.allclose(w.data, [1, 1])
    assert np.allclose(V.data @ V.data.T, np.eye(2), atol=1e-12)


def test_eig_diagonal():
    w, V = dc.eig_sym(np.diag([1.0, 2.0]))
    assert np.allclose(w.data, [1, 2])
    assert np.allclose(np.abs(V.data), np.eye(2))


def test_eig_swap_matrix():
    w, _ = dc.eig_sym(np.array([[0.0, 1.0], [1.0, 0.0]]))
    assert np.allclose(w.data, [-1.0, 1.0], atol=1e-12)


def test_eig_rejects_nonsymmetric_and_large():
    with pytest.raises(ValueError, match="symmetric"):
        dc.eig_sym(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(ValueError):
        dc.eig_sym(np.eye(17))


def test_eig_nonconvergence_names_matrix():
    S = np.stack([np.eye(3), np.array([[1.0, 2.0, 3.0], [2.0, 1.0, 4.0], [3.0, 4.0, 1.0]])])
    with pytest.raises(np.linalg.LinAlgError, match="matrix #1"):
        dc.symmetric_eigh(S, max_sweeps=1)


def test_eig_reconstruction_100_random():
    rng = np.random.default_rng(0)
    for i in range(100):
        M = [2, 3, 4, 5][i % 4]
        P = rng.normal(size=(M, M))
        S = (P + P.T) / 2
        w, V = dc.symmetric_eigh(S)
        assert np.linalg.norm(V @ np.diag(w) @ V.T - S) <= 1e-8
        assert np.abs(V @ V.T - np.eye(M)).max() <= 1e-8
        assert np.all(np.abs(S @ V - V * w) <= 1e-8)
        assert np.all(np.diff(w) >= 0)


def test_eig_matches_lapack():
    rng = np.random.default_rng(5)
    P = rng.normal(size=(20, 4, 4))
    S = (P + np.swapaxes(P, 1, 2)) / 2
    w, _ = dc.symmetric_eigh(S)
    assert np.allclose(w, np.linalg.eigvalsh(S), atol=1e-10)


def test_eig_degenerate_gradient_finite():
    S = dc.Value(np.eye(3), requires_grad=True)
    with dc.Tape() as tape:
        w, V = dc.eig_sym(S)
        loss = dc.sum_axis(w) + dc.sum_axis(V * V)
    tape.backward(loss)
    assert np.all(np.isfinite(S.grad))


# clamp_min

def test_clamp_min_values_and_noop():
    assert np.allclose(dc.clamp_min(dc.Value([-1.0, 1.0]), 1e-4).data, [1e-4, 1.0])
    x = np.array([0.5, 2.0, 3.0])
    assert np.array_equal(dc.clamp_min(x, 0.1).data, x)


def test_clamp_min_gradient():
    _, (g,) = backprop(lambda x: dc.sum_axis(dc.clamp_min(x, 1.0)), [0.5, 2.0])
    assert np.array_equal(g, [0.0, 1.0])


def test_clamp_min_equality_gradient_is_zero():
    _, (g,) = backprop(lambda x: dc.sum_axis(dc.clamp_min(x, 1.0)), [1.0])
    assert np.array_equal(g, [0.0])


@pytest.mark.parametrize("floor", [0.0, -1.0])
def test_clamp_min_rejects_nonpositive_floor(floor):
    with pytest.raises(ValueError):
        dc.clamp_min(dc.Value([1.0]), floor)


# grad_check

def test_grad_check_square():
    rep = dc.grad_check(lambda x: dc.sum_axis(x * x), [dc.Value([3.0])], h=1e-5)
    assert float(rep) <= 1e-6


def test_grad_check_constant():
    rep = dc.grad_check(lambda x: dc.sum_axis(x * 0.0) + 4.0, [dc.Value([1.0, 2.0])])
    assert float(rep) == 0.0


def test_grad_check_gaussian_nll_graph():
    from uqstp import mpp
    rng = np.random.default_rng(3)
    A = dc.Value(rng.normal(size=(2, 2)))
    mu = dc.Value(rng.normal(size=2))
    x = rng.normal(size=2)
    f = lambda A, mu: mpp.gaussian_nll(x, mu, A @ dc.swap_last(A) + np.eye(2))
    assert float(dc.grad_check(f, [A, mu])) <= 1e-4


def test_grad_check_reports_nan_coordinates():
    with np.errstate(invalid="ignore"):
        rep = dc.grad_check(lambda x: dc.sum_axis(dc.log(x)), [dc.Value([1.0, -1.0])])
    assert not rep.ok() and rep.nan_coords and np.isnan(float(rep))


def test_grad_check_detects_wrong_gradient():
    rep = dc.grad_check(lambda x: dc.sum_axis(x * x), [dc.Value([1.0, 2.0])], analytic_scale=1.5)
    assert not rep.ok()


@given(hnp.arrays(np.float64, (3,), elements=st.floats(-2, 2)),
       st.floats(-3, 3), st.floats(-3, 3))
def test_backward_is_linear(x, a, b):
    f = lambda v: dc.sum_axis(dc.sigmoid(v) * v)
    g = lambda v: dc.sum_axis(dc.exp(v * 0.5))
    _, (gf,) = backprop(f, x)
    _, (gg,) = backprop(g, x)
    _, (gc,) = backprop(lambda v: f(v) * a + g(v) * b, x)
    assert np.allclose(gc, a * gf + b * gg, atol=1e-10, rtol=0)


def test_all_ops_pass_randomized_grad_checks():
    from uqstp import gradsuite
    fast = [n for n in gradsuite.CHECKS if n not in ("mdgcn", "itcn") and not n.startswith("mpp_")]
    for r in gradsuite.run_suite(instances=10, only=fast):
        assert r.ok, (r.op, r.max_rel_err)


def test_einsum_rejects_unsupported_spec():
    with pytest.raises(ValueError, match="unsupported"):
        dc.einsum("ii,ij->j", np.eye(2), np.eye(2))


def test_shift_right_is_causal_delay():
    out = dc.shift_right(dc.Value([[1.0, 2.0, 3.0]]), 1).data
    assert np.array_equal(out, [[0.0, 1.0, 2.0]])
    assert np.array_equal(dc.shift_right(dc.Value([1.0, 2.0]), 5).data, [0.0, 0.0])


def test_weight_norm_scale_invariance():
    rng = np.random.default_rng(2)
    v, g = rng.normal(size=(3, 2, 2)), rng.normal(size=3)
    w1 = dc.weight_norm(v, g).data
    w2 = dc.weight_norm(7.5 * v, g).data
    assert np.allclose(w1, w2, atol=1e-10)
    assert np.allclose(np.sqrt((w1 ** 2).sum(axis=(1, 2))), np.abs(g))
    with pytest.raises(ValueError, match="zero norm"):
        dc.weight_norm(np.zeros((1, 2)), np.ones(1))


def test_cholesky_rejects_non_pd():
    with pytest.raises(ValueError, match="not positive definite"):
        dc.logdet_pd(np.array([[1.0, 2.0], [2.0, 1.0]]))
