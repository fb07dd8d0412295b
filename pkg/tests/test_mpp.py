import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import special

from uqstp import diffcore as dc
from uqstp import mpp


def test_half_vector_examples():
    assert np.array_equal(mpp.half_vector_to_symmetric([1.0, 2.0, 3.0]).data, [[1, 2], [2, 3]])
    assert np.array_equal(mpp.half_vector_to_symmetric([4.0]).data, [[4.0]])
    assert mpp.half_vector_to_symmetric(np.arange(6.0)).shape == (3, 3)
    with pytest.raises(ValueError, match="M=3"):
        mpp.half_vector_to_symmetric(np.arange(5.0), M=3)


@given(st.integers(1, 5), st.integers(0, 10_000))
def test_half_vector_round_trip(M, seed):
    z = np.random.default_rng(seed).normal(size=mpp.half_size(M))
    S = mpp.half_vector_to_symmetric(z).data
    assert np.array_equal(S, S.T)
    assert np.array_equal(mpp.symmetric_to_half(S), z)


def test_clamp_examples():
    W = np.array([[2.0, 0.5], [0.5, 1.0]])
    assert np.abs(mpp.clamp_to_pd(W).data - W).max() <= 1e-10
    out = mpp.clamp_to_pd(np.array([[0.0, 1.0], [1.0, 0.0]]), 1e-4).data
    assert np.allclose(out, [[0.50005, 0.49995], [0.49995, 0.50005]], atol=1e-12)


def test_pd_guarantee_bulk():
    rng = np.random.default_rng(0)
    for M in range(1, 6):
        Z = rng.normal(size=(10 ** 4, mpp.half_size(M))) * 2
        S = mpp.clamp_to_pd(mpp.half_vector_to_symmetric(Z), 1e-4).data
        assert np.abs(S - np.swapaxes(S, 1, 2)).max() <= 1e-12
        assert np.linalg.eigvalsh(S).min() >= 1e-4 - 1e-9
        again = mpp.clamp_to_pd(S, 1e-4).data
        assert np.abs(again - S).max() <= 1e-9


def test_gaussian_nll_examples():
    assert mpp.gaussian_nll([0.5, -1.0], [0.5, -1.0], np.eye(2)).data == 0.0
    x, mu = np.array([1.0, 3.0]), np.array([0.0, 1.0])
    assert np.isclose(mpp.gaussian_nll(x, mu, np.eye(2)).data, 0.5 * np.sum((x - mu) ** 2), atol=1e-12)
    val = float(mpp.gaussian_nll([1.0, 1.0], [0.0, 0.0], 2 * np.eye(2)).data)
    assert abs(val - (np.log(2) + 0.5)) <= 1e-10


def test_gaussian_nll_rejects_non_pd():
    with pytest.raises(ValueError):
        mpp.gaussian_nll([0.0, 0.0], [0.0, 0.0], np.array([[1.0, 2.0], [2.0, 1.0]]))


@given(st.integers(0, 10_000), st.floats(0.1, 3.0), st.floats(0.1, 3.0))
def test_nll_increases_along_rays(seed, t1, dt):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3, 3))
    S = A @ A.T + 0.1 * np.eye(3)
    mu, v = rng.normal(size=3), rng.normal(size=3)
    a = float(mpp.gaussian_nll(mu + t1 * v, mu, S).data)
    b = float(mpp.gaussian_nll(mu + (t1 + dt) * v, mu, S).data)
    assert b > a


@given(hnp.arrays(np.float64, (3,), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (3,), elements=st.floats(-5, 5)),
       hnp.arrays(np.float64, (3,), elements=st.floats(1e-3, 10)))
def test_diagonal_gaussian_equals_univariate_sum(x, mu, var):
    got = float(mpp.gaussian_nll(x, mu, np.diag(var)).data)
    want = float(np.sum([0.5 * np.log(v) + 0.5 * (a - b) ** 2 / v for a, b, v in zip(x, mu, var)]))
    assert abs(got - want) <= 1e-10 * max(1.0, abs(want))


def test_laplace_examples():
    val = float(mpp.laplace_nll([1.0, 2.0], [1.0, 2.0], np.eye(2)).data)
    assert abs(val - np.log(2 * np.pi)) <= 1e-12
    rng = np.random.default_rng(0)
    A = rng.normal(size=(2, 2))
    B = A @ A.T + np.eye(2)
    x, mu = rng.normal(size=2), rng.normal(size=2)
    lap = float(mpp.laplace_nll(x, mu, B).data) - float(mpp.laplace_nll(mu, mu, B).data)
    gau = float(mpp.gaussian_nll(x, mu, B).data) - float(mpp.gaussian_nll(mu, mu, B).data)
    assert np.isclose(lap, gau, atol=1e-12) and lap >= 0


def test_negbinom_examples():
    val = float(mpp.negbinom_nll([2.0], [1.0], [0.5], [2.0], np.eye(1)).data)
    assert abs(val - 2 * np.log(2)) <= 1e-10
    zero = float(mpp.negbinom_nll([0.0], [1.0], [0.3], [0.0], np.eye(1)).data)
    assert abs(zero) <= 1e-12


def test_negbinom_matches_scipy_terms():
    rng = np.random.default_rng(1)
    x = rng.integers(0, 6, size=3).astype(float)
    r, p = rng.uniform(0.5, 3, size=3), rng.uniform(0.1, 0.9, size=3)
    mu = rng.normal(size=3)
    count = -(special.gammaln(x + r) - special.gammaln(x + 1) - special.gammaln(r)) + r / p * np.log1p(p / r * x)
    want = count.sum() + 0.5 * np.sum((x - mu) ** 2)
    assert np.isclose(float(mpp.negbinom_nll(x, r, p, mu, np.eye(3)).data), want, atol=1e-10)


def test_negbinom_mean_gradient_zero_at_observation():
    mu = dc.Value([2.0, 1.0], requires_grad=True)
    with dc.Tape() as tape:
        L = mpp.negbinom_nll([2.0, 1.0], [1.0, 2.0], [0.5, 0.4], mu, np.eye(2) * 0.7)
    tape.backward(L)
    assert np.array_equal(mu.grad, [0.0, 0.0])


@pytest.mark.parametrize("x,r,p", [([-1.0], [1.0], [0.5]), ([1.0], [0.0], [0.5]), ([1.0], [1.0], [1.0])])
def test_negbinom_domain(x, r, p):
    with pytest.raises(ValueError):
        mpp.negbinom_nll(x, r, p, [0.0], np.eye(1))


def test_prediction_interval_examples():
    f = mpp.DistForecast(np.array([[5.0]]), np.array([[[4.0]]]))
    lo, hi = mpp.prediction_interval(f)
    assert np.allclose([lo[0, 0], hi[0, 0]], [1.08, 8.92])
    g = mpp.DistForecast(np.array([[0.0]]), np.array([[[1.0]]]))
    lo, hi = mpp.prediction_interval(g)
    assert np.isclose(hi[0, 0] - g.mu[0, 0], 1.96)
    h = mpp.DistForecast(np.array([[0.0]]), np.array([[[0.0]]]))
    lo, hi = mpp.prediction_interval(h, v_min=1e-4)
    assert np.isclose(hi[0, 0], 1.96 * 1e-2)


@pytest.mark.parametrize("kind", ["gaussian", "laplace", "negbinom", "diag_gaussian", "deterministic"])
def test_forward_shapes(kind):
    cfg = mpp.MppConfig(kind=kind, hidden=4)
    params = mpp.init_params(cfg, 3, 5, 2, np.random.default_rng(0))
    E = np.random.default_rng(1).normal(size=(4, 6, 3, 5))
    out = mpp.mpp_forward(E, params, cfg, 2)
    assert out.mu.shape == (4, 2, 6, 3)
    if kind != "deterministic":
        assert out.sigma.shape == (4, 2, 6, 3, 3)
    if kind == "negbinom":
        assert np.all(out.r.data > 0) and np.all((out.p.data > 0) & (out.p.data < 1))
    target = np.abs(np.random.default_rng(2).normal(size=(4, 2, 6, 3)))
    assert np.isfinite(float(mpp.head_loss(out, target, kind).data))


def test_forward_pd_over_random_draws():
    cfg = mpp.MppConfig(hidden=3)
    E = np.random.default_rng(0).normal(size=(1, 1, 2, 3))
    for s in range(1000):
        params = mpp.init_params(cfg, 2, 3, 1, np.random.default_rng(s))
        for k in params:
            params[k] = dc.Value(np.random.default_rng([s, 1]).normal(size=params[k].shape))
        sig = mpp.mpp_forward(E, params, cfg, 1).sigma.data
        assert np.linalg.eigvalsh(sig).min() >= cfg.v_min - 1e-9


def test_single_variable_variance_floor():
    cfg = mpp.MppConfig(hidden=3)
    params = mpp.init_params(cfg, 1, 2, 1, np.random.default_rng(0))
    params["mpp.z.lin2.b"] = dc.Value(np.full_like(params["mpp.z.lin2.b"].data, -5.0))
    out = mpp.mpp_forward(np.zeros((1, 2, 1, 2)), params, cfg, 1)
    assert out.sigma.shape[-2:] == (1, 1) and np.all(out.sigma.data >= cfg.v_min - 1e-12)


@pytest.mark.parametrize("check", ["gaussian_nll_chain", "laplace_nll_chain", "negbinom_nll_chain",
                                   "mpp_gaussian_head"])
def test_chain_gradients(check):
    from uqstp import gradsuite
    assert gradsuite.run_check(check, instances=3).ok


def test_config_bounds():
    with pytest.raises(ValueError):
        mpp.MppConfig(v_min=1e-1)
    with pytest.raises(ValueError):
        mpp.MppConfig(kind="student_t")


def test_forecast_dump_packs_lower_triangle():
    S = np.array([[[2.0, 0.3], [0.3, 1.0]]])
    d = mpp.DistForecast(np.zeros((1, 2)), S, variable_names=["a", "b"]).to_dict()
    assert d["sigma_lower"] == [[2.0, 0.3, 1.0]]
