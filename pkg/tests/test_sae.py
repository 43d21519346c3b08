import json
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from embedlab import sae
from embedlab.exceptions import DataError, FormatError, RangeError, ShapeError, TrainingDiverged

import oracles


def _model(d=3, k=2, seed=0, **kw):
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(d, k * d))
    return sae.SaeModel(W, rng.normal(size=(k * d, d)), **kw)


def test_default_config_values():
    cfg = sae.SaeTrainConfig()
    assert cfg.l1_coef == 3e-5 and cfg.expansion == 8
    assert cfg.learning_rate == 5e-4 and cfg.betas == (0.9, 0.999)
    assert cfg.batch_size == 4096 and cfg.eps == 1e-8
    with pytest.raises(RangeError):
        sae.SaeTrainConfig(l1_coef=-1)
    with pytest.raises(RangeError):
        sae.SaeTrainConfig(expansion=0)


def test_model_invariants():
    with pytest.raises(ShapeError):
        sae.SaeModel(np.ones((3, 6)), np.ones((6, 2)))
    with pytest.raises(ShapeError):
        sae.SaeModel(np.ones((3, 4)), np.ones((4, 3)))
    with pytest.raises(DataError):
        sae.SaeModel(np.full((2, 2), np.nan), np.ones((2, 2)))
    m = _model()
    assert (m.d, m.m, m.expansion) == (3, 6, 2)


def test_encode_examples():
    m = _model()
    assert np.all(sae.sae_encode(m, np.zeros((2, 3))) == 0)
    eye = sae.SaeModel(np.hstack([np.eye(3), np.zeros((3, 3))]), np.vstack([np.eye(3), np.zeros((3, 3))]))
    a = sae.sae_encode(eye, np.array([[-1.0, 2.0, -3.0]]))
    assert a.tolist() == [[0.0, 2.0, 0.0, 0.0, 0.0, 0.0]]
    X = np.random.default_rng(1).normal(size=(5, 3))
    assert sae.sae_decode(m, sae.sae_encode(m, X)).tobytes() == sae.sae_reconstruct(m, X).tobytes()
    with pytest.raises(ShapeError):
        sae.sae_encode(m, np.ones((1, 4)))


def test_decode_examples():
    m = _model()
    assert np.all(sae.sae_decode(m, np.zeros((1, 6))) == 0)
    for c in range(6):
        np.testing.assert_array_equal(sae.sae_decode(m, np.eye(6)[[c]])[0], m.decoder[c])
    A = np.abs(np.random.default_rng(2).normal(size=(4, 6)))
    np.testing.assert_allclose(sae.sae_decode(m, A), oracles.naive_matmul(A, m.decoder), atol=1e-12)
    with pytest.raises(ShapeError):
        sae.sae_decode(m, np.ones((1, 5)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 100_000))
def test_activations_nonnegative(seed):
    rng = np.random.default_rng(seed)
    m = _model(seed=seed)
    assert np.all(sae.sae_encode(m, rng.normal(scale=10, size=(7, 3))) >= 0)


def _flat_loss(model, X, key, lam):
    def f(w):
        return sae.sae_loss_grad(sae.SaeModel(**{**_fields(model), key: w}), X, lam)[0]
    return f


def _fields(m):
    return dict(encoder=m.encoder, decoder=m.decoder, l1_coef=m.l1_coef, seed=m.seed,
                pre_bias=m.pre_bias, center=m.center)


def _away_from_kinks(rng, d=3, k=2, n=6, bias=False):
    while True:
        m = _model(d, k, seed=int(rng.integers(1 << 30)),
                   pre_bias=rng.normal(size=d) * 0.1 if bias else None)
        X = rng.normal(size=(n, d))
        Z = (X - m.offset()) @ m.encoder
        if np.min(np.abs(Z)) > 1e-4:
            return m, X


@pytest.mark.parametrize("bias", [False, True])
def test_gradients_match_finite_differences(bias):
    rng = np.random.default_rng(7)
    for _ in range(20):
        m, X = _away_from_kinks(rng, bias=bias)
        lam = float(rng.uniform(0, 0.5))
        _, g = sae.sae_loss_grad(m, X, lam)
        for key in g:
            num = oracles.central_gradient(_flat_loss(m, X, key, lam), getattr(m, key))
            assert oracles.rel_err(g[key], num) < 1e-5, key


def test_zero_lambda_is_plain_mse_gradient():
    rng = np.random.default_rng(3)
    m, X = _away_from_kinks(rng)
    loss, g = sae.sae_loss_grad(m, X, 0.0)
    R = sae.sae_reconstruct(m, X) - X
    assert loss == pytest.approx(np.sum(R**2) / X.shape[0])
    A = sae.sae_encode(m, X)
    np.testing.assert_allclose(g["decoder"], 2 * A.T @ R / X.shape[0], atol=1e-12)


def test_perfect_autoencoder_has_zero_reconstruction_gradient():
    # W_E = [I, -I], W_D = [I; -I] reproduces any x exactly
    d = 3
    m = sae.SaeModel(np.hstack([np.eye(d), -np.eye(d)]), np.vstack([np.eye(d), -np.eye(d)]))
    X = np.random.default_rng(4).normal(size=(5, d))
    loss, g = sae.sae_loss_grad(m, X, 0.0)
    assert loss == pytest.approx(0.0, abs=1e-24)
    assert np.abs(g["encoder"]).max() < 1e-12 and np.abs(g["decoder"]).max() < 1e-12


def test_training_deterministic_and_curve_shape():
    X = np.random.default_rng(0).normal(size=(300, 4))
    cfg = sae.SaeTrainConfig(expansion=2, learning_rate=1e-2, batch_size=64, n_epochs=5, seed=3)
    m1, c1 = sae.sae_train(X, cfg)
    m2, c2 = sae.sae_train(X, cfg)
    assert c1 == c2 and len(c1) == 5
    assert m1.encoder.tobytes() == m2.encoder.tobytes()
    assert m1.seed == 3
    m3, c3 = sae.sae_train(X, sae.SaeTrainConfig(expansion=2, learning_rate=1e-2, batch_size=64, n_epochs=5, seed=4))
    assert c3 != c1


def test_initialization_rule():
    cfg = sae.SaeTrainConfig(expansion=3)
    m = sae.init_model(5, cfg, np.random.default_rng(0))
    assert m.encoder.shape == (5, 15)
    assert np.abs(m.encoder).max() <= 1 / np.sqrt(5)
    np.testing.assert_array_equal(m.decoder, m.encoder.T)


def test_divergence_raises():
    X = np.random.default_rng(0).normal(size=(200, 4))
    cfg = sae.SaeTrainConfig(l1_coef=0, expansion=2, learning_rate=1e300, batch_size=32, n_epochs=3)
    with pytest.raises(TrainingDiverged) as exc:
        sae.sae_train(X, cfg)
    assert exc.value.epoch == 0


def test_final_epoch_guard_warns():
    X = np.random.default_rng(0).normal(size=(200, 4))
    cfg = sae.SaeTrainConfig(l1_coef=0, expansion=2, learning_rate=1.0, batch_size=32, n_epochs=4)
    with pytest.warns(RuntimeWarning, match="exceeds 1.05x"):
        _, curve = sae.sae_train(X, cfg)
    assert curve[-1] > 1.05 * min(curve)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        sae.sae_train(X, sae.SaeTrainConfig(expansion=2, learning_rate=1e-2, batch_size=32, n_epochs=4))


def test_last_partial_batch_is_used():
    X = np.random.default_rng(1).normal(size=(10, 2))
    seen = []
    sae.sae_train(X, sae.SaeTrainConfig(expansion=1, batch_size=4, n_epochs=1),
                  callback=lambda e, loss: seen.append(loss))
    assert len(seen) == 1 and np.isfinite(seen[0])


def test_center_and_bias():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(400, 3)) + 5.0
    m, _ = sae.sae_train(X, sae.SaeTrainConfig(expansion=2, center=True, bias=True, n_epochs=3, batch_size=100))
    np.testing.assert_allclose(m.center, X.mean(axis=0))
    assert m.pre_bias is not None and m.pre_bias.shape == (3,)


def test_file_round_trip(tmp_path):
    m = replace(_model(pre_bias=np.array([0.1, -0.2, 0.3]), center=np.array([1.0, 2.0, 3.0]), l1_coef=1e-3), seed=9)
    p = tmp_path / "m.sae"
    sae.save_sae(p, m)
    back = sae.load_sae(p)
    ref = sae.as_float32(m)
    for key in ("encoder", "decoder", "pre_bias", "center"):
        assert getattr(back, key).tobytes() == getattr(ref, key).tobytes()
    assert back.l1_coef == 1e-3 and back.seed == 9
    raw = p.read_bytes()
    assert raw[:8] == b"DFMZSAE1"
    hlen = int.from_bytes(raw[8:12], "little")
    header = json.loads(raw[12:12 + hlen])
    assert header["d"] == 3 and header["m"] == 6 and header["lambda"] == 1e-3 and header["seed"] == 9
    assert raw[12 + hlen:12 + hlen + 8] == b"DFMZEMB1"
    p.write_bytes(raw + b"x")
    with pytest.raises(FormatError):
        sae.load_sae(p)
    p.write_bytes(b"NOTASAE!" + raw[8:])
    with pytest.raises(FormatError):
        sae.load_sae(p)


def test_estimator_api():
    X = np.random.default_rng(6).normal(size=(128, 4))
    est = sae.SparseAutoencoder(expansion=2, batch_size=32, n_epochs=3, learning_rate=1e-2).fit(X)
    A = est.transform(X)
    assert A.shape == (128, 8) and np.all(A >= 0)
    np.testing.assert_allclose(est.reconstruct(X), est.inverse_transform(A))
    assert est.score(X) == pytest.approx(-sae.reconstruction_mse(est.model_, X))
    assert clone(est).get_params() == est.get_params()
    w = sae.SparseAutoencoder.from_model(est.model_)
    np.testing.assert_array_equal(w.transform(X), A)


def test_sparsity_grows_with_l1_when_bias_enabled():
    rng = np.random.default_rng(0)
    basis = np.linalg.qr(rng.normal(size=(6, 2)))[0]
    X = rng.normal(size=(2000, 2)) @ basis.T
    zeros, mses = [], []
    for lam in (0.0, 1e-2, 1e-1, 1.0):
        cfg = sae.SaeTrainConfig(l1_coef=lam, expansion=4, bias=True, n_epochs=20, batch_size=256,
                                 learning_rate=5e-3, seed=0)
        m, _ = sae.sae_train(X, cfg)
        zeros.append(np.mean(sae.sae_encode(m, X) == 0))
        mses.append(sae.reconstruction_mse(m, X))
    assert all(a < b for a, b in zip(zeros, zeros[1:]))
    assert mses[0] < mses[-1]
