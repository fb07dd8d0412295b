import numpy as np
import pytest

from uqstp import dataset as ds
from uqstp import diffcore as dc
from uqstp import graph as G
from uqstp import mpp
from uqstp import training as tr
from uqstp.model import ModelConfig, build_variant

TINY = ModelConfig(mdgcn_hidden=4, embed_dim=4, itcn_channels=2, head_hidden=4)


@pytest.fixture(scope="module")
def prep():
    g = G.build_adjacency(G.pairwise_distances(ds.random_centroids(5, 2)), 9.0, 0.1)
    d = ds.generate_synthetic(5, 2, 120, g, 0.6, seed=4)
    return tr.prepare(d.tensor, g, t=6, T=1, cheb_order=TINY.cheb_order)


def cfg(**kw):
    base = dict(batch_size=16, max_epochs=2, t=6, T=1, seed=3)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_lr_schedule_examples():
    c = tr.TrainConfig()
    assert all(tr.lr_schedule(e, c) == 1e-3 for e in range(10))
    assert np.isclose(tr.lr_schedule(10, c), 5e-4)
    assert tr.lr_schedule(20, c) == 1e-5 and tr.lr_schedule(500, c) == 1e-5
    m = tr.TrainConfig(decay_mode="multiply", decay=0.5)
    assert np.isclose(tr.lr_schedule(25, m), 2.5e-4)


def test_adam_zero_gradient_leaves_params():
    p = {"w": dc.Value(np.array([1.0, -2.0]))}
    tr.adam_step(p, {"w": np.zeros(2)}, tr.AdamState(), 0.1)
    assert np.array_equal(p["w"].data, [1.0, -2.0])


def test_adam_first_step_sign():
    p = {"w": dc.Value(np.array([0.0, 0.0]))}
    tr.adam_step(p, {"w": np.array([3.0, -0.2])}, tr.AdamState(), 0.01)
    assert np.allclose(p["w"].data, [-0.01, 0.01], atol=1e-8)


def test_adam_two_steps_against_hand_recurrence():
    p = {"w": dc.Value(np.array([0.5]))}
    st = tr.AdamState()
    tr.adam_step(p, {"w": np.array([1.0])}, st, 0.1)
    tr.adam_step(p, {"w": np.array([1.0])}, st, 0.1)
    x, m, v = 0.5, 0.0, 0.0
    for k in (1, 2):
        m = 0.9 * m + 0.1 * 1.0
        v = 0.999 * v + 0.001 * 1.0
        x -= 0.1 * (m / (1 - 0.9 ** k)) / (np.sqrt(v / (1 - 0.999 ** k)) + 1e-8)
    assert abs(p["w"].data[0] - x) <= 1e-12


def test_adam_nan_names_parameter():
    p = {"layer.w": dc.Value(np.zeros(2))}
    with pytest.raises(FloatingPointError, match="layer.w"):
        tr.adam_step(p, {"layer.w": np.array([np.nan, 0.0])}, tr.AdamState(), 0.1)


def test_clip_global_norm():
    g = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert tr.clip_global_norm(g, 1.0) == 5.0
    assert np.isclose(np.sqrt(g["a"] ** 2 + g["b"] ** 2), 1.0)


def test_prepare_fits_on_train(prep):
    assert prep.train.inputs.shape[1:] == (5, 2, 6)
    assert prep.train.inputs.min() >= 0 and prep.train.inputs.max() <= 1
    assert len(prep.train) == 96 - 6 and len(prep.val) == 12 - 6


def test_zero_epochs_returns_initial(prep):
    res = tr.train(cfg(max_epochs=0), prep, TINY)
    assert res.history == [] and res.checkpoint.epoch == 0
    fresh = build_variant("full", "gaussian", TINY, 2, 6, 1, prep.supports, 3)
    for k, v in fresh.state_arrays().items():
        assert np.array_equal(res.checkpoint.params[k], v)


def test_training_reduces_loss_and_is_deterministic(prep, tmp_path):
    a = tr.train(cfg(max_epochs=4), prep, TINY)
    b = tr.train(cfg(max_epochs=4), prep, TINY)
    assert [(r.train_loss, r.val_loss) for r in a.history] == [(r.train_loss, r.val_loss) for r in b.history]
    assert a.checkpoint.to_bytes() == b.checkpoint.to_bytes()
    assert a.history[-1].train_loss < a.initial_train_loss
    assert len(a.history) == 4
    c = tr.train(cfg(max_epochs=2, seed=4), prep, TINY)
    assert c.history[0].train_loss != a.history[0].train_loss


def test_early_stopping_patience(prep):
    res = tr.train(cfg(max_epochs=30, patience=1, lr0=0.5, decay=0.0), prep, TINY)
    assert len(res.history) < 30


def test_checkpoint_round_trip(prep, tmp_path):
    res = tr.train(cfg(max_epochs=1), prep, TINY)
    path = tmp_path / "m.ckpt"
    res.checkpoint.save(path)
    raw = path.read_bytes()
    assert raw[:4] == b"UQST"
    ck = tr.Checkpoint.load(path)
    assert ck.to_bytes() == raw
    model = ck.build_model()
    X = prep.test.inputs
    assert np.array_equal(model.predict(X).mu, res.model.predict(X).mu)
    r1 = tr.evaluate_model(res.model, prep.test, prep.spec, prep.variable_names, selective=True).to_dict()
    r2 = tr.evaluate_model(model, prep.test, ck.spec, prep.variable_names, selective=True).to_dict()
    assert r1 == r2


def test_checkpoint_rejects_corruption():
    with pytest.raises(ValueError, match="magic"):
        tr.Checkpoint.from_bytes(b"XXXX" + bytes(20))
    ck = tr.Checkpoint({"w": np.ones((2, 3))}, {"a": 1}, None, 1.5, 3)
    assert tr.Checkpoint.from_bytes(ck.to_bytes()).params["w"].shape == (2, 3)
    with pytest.raises(ValueError, match="trailing"):
        tr.Checkpoint.from_bytes(ck.to_bytes() + b"\0")


def test_no_mpp_trains_on_mae(prep):
    res = tr.train(cfg(max_epochs=1, variant="no-mpp"), prep, TINY)
    assert res.model.kind == "deterministic"
    out = res.model.forward(prep.val.inputs)
    mae = np.abs(out.mu.data - tr.targets_tn(prep.val)).mean()
    assert np.isclose(res.history[0].val_loss, mae)


def test_indep_univariate_loss_is_sum_of_univariate(prep):
    model = build_variant("indep-univariate", "gaussian", TINY, 2, 6, 1, prep.supports, 0)
    X, Y = prep.val.inputs, prep.val.targets
    out = model.forward(X)
    var = np.diagonal(out.sigma.data, axis1=-2, axis2=-1)
    assert np.count_nonzero(out.sigma.data[..., 0, 1]) == 0
    want = mpp.univariate_gaussian_nll(tr.targets_tn(prep.val), out.mu.data, var).mean()
    assert abs(float(model.loss(X, Y).data) - want) <= 1e-10


@pytest.mark.parametrize("variant,dist", [("full", "laplace"), ("full", "negbinom"), ("no-mdgcn", "gaussian"),
                                          ("no-itcn", "gaussian")])
def test_variants_train_finite(prep, variant, dist):
    res = tr.train(cfg(max_epochs=1, variant=variant, dist=dist), prep, TINY)
    assert np.isfinite(res.history[0].train_loss)


def test_invalid_combinations():
    with pytest.raises(ValueError):
        tr.TrainConfig(variant="indep-univariate", dist="laplace")
    with pytest.raises(ValueError):
        tr.TrainConfig(variant="bogus")
    with pytest.raises(ValueError, match="unknown train config"):
        tr.TrainConfig.from_dict({"lr": 1.0})


def test_history_csv(prep, tmp_path):
    res = tr.train(cfg(max_epochs=2), prep, TINY)
    tr.write_history(res.history, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss,lr" and len(lines) == 3
