"""Sparse autoencoder over embedding rows.

Row-vector convention: for inputs ``X`` (n x d), encoder ``W_E`` (d x m) and
decoder ``W_D`` (m x d),

    A = relu(X @ W_E)          latent activations
    SAE(X) = A @ W_D           reconstruction

and the per-sample training loss is ``||SAE(x) - x||^2 + l1 * sum(a)``,
averaged over the mini-batch. No bias terms unless ``bias=True``, which adds
a trained pre-encoder offset subtracted before encoding and added back after
decoding.
"""

from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix
from .exceptions import DataError, FormatError, RangeError, ShapeError, TrainingDiverged
from .store import _read_matrix, _write_matrix

SAE_MAGIC = b"DFMZSAE1"


@dataclass(frozen=True, eq=False)
class SaeModel:
    encoder: np.ndarray  # W_E, (d, m)
    decoder: np.ndarray  # W_D, (m, d)
    l1_coef: float = 3e-5
    seed: int | None = None
    pre_bias: np.ndarray | None = None  # (d,)
    center: np.ndarray | None = None  # (d,), fixed training mean

    def __post_init__(self):
        d, m = self.encoder.shape
        if self.decoder.shape != (m, d):
            raise ShapeError(f"decoder shape {self.decoder.shape} does not match encoder {(d, m)}")
        if m % d:
            raise ShapeError(f"latent dim {m} is not a multiple of input dim {d}")
        for name in ("pre_bias", "center"):
            vec = getattr(self, name)
            if vec is not None and np.shape(vec) != (d,):
                raise ShapeError(f"{name} must have shape ({d},)")
        if not (np.all(np.isfinite(self.encoder)) and np.all(np.isfinite(self.decoder))):
            raise DataError("model weights are not finite")

    @property
    def d(self) -> int:
        return self.encoder.shape[0]

    @property
    def m(self) -> int:
        return self.encoder.shape[1]

    @property
    def expansion(self) -> int:
        return self.m // self.d

    def offset(self):
        off = np.zeros(self.d)
        if self.center is not None:
            off = off + self.center
        if self.pre_bias is not None:
            off = off + self.pre_bias
        return off

    def concept_directions(self) -> np.ndarray:
        """Decoder rows: the feature-space direction written by each latent."""
        return np.asarray(self.decoder, dtype=np.float64)


@dataclass(frozen=True)
class SaeTrainConfig:
    l1_coef: float = 3e-5
    expansion: int = 8
    learning_rate: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 4096
    n_epochs: int = 50
    seed: int = 0
    bias: bool = False
    center: bool = False
    eps: float = 1e-8

    def __post_init__(self):
        if self.l1_coef < 0:
            raise RangeError("l1_coef must be nonnegative")
        if self.expansion < 1:
            raise RangeError("expansion must be >= 1")
        if self.batch_size < 1 or self.n_epochs < 1:
            raise RangeError("batch_size and n_epochs must be positive")


def _pre_activation(model, X):
    off = model.offset()
    Xc = X - off if off.any() else X
    return Xc @ np.asarray(model.encoder, dtype=np.float64)


def sae_encode(model: SaeModel, X) -> np.ndarray:
    """Nonnegative latent activations ``relu((x - offset) @ W_E)``."""
    X = check_matrix(X, dim=model.d, name="features")
    return np.maximum(_pre_activation(model, X), 0.0)


def sae_decode(model: SaeModel, A) -> np.ndarray:
    A = check_matrix(A, dim=model.m, name="latents")
    out = A @ np.asarray(model.decoder, dtype=np.float64)
    off = model.offset()
    return out + off if off.any() else out


def sae_reconstruct(model: SaeModel, X) -> np.ndarray:
    return sae_decode(model, sae_encode(model, X))


def reconstruction_mse(model: SaeModel, X) -> float:
    X = check_matrix(X, dim=model.d, name="features")
    return float(np.mean((sae_reconstruct(model, X) - X) ** 2))


def sae_loss_grad(model: SaeModel, X, l1_coef=None):
    """Batch-mean loss and gradients.

    Returns ``(loss, grads)`` where ``grads`` maps ``"encoder"``,
    ``"decoder"`` and, when the model has one, ``"pre_bias"`` to arrays of
    the parameter's shape. The ReLU subgradient at 0 is taken as 0.
    """
    X = check_matrix(X, dim=model.d, name="features")
    lam = model.l1_coef if l1_coef is None else l1_coef
    n = X.shape[0]
    W_E = np.asarray(model.encoder, dtype=np.float64)
    W_D = np.asarray(model.decoder, dtype=np.float64)
    off = model.offset()
    Xc = X - off
    Z = Xc @ W_E
    A = np.maximum(Z, 0.0)
    R = A @ W_D - Xc
    loss = (np.sum(R * R) + lam * np.sum(A)) / n
    dR = (2.0 / n) * R
    dA = dR @ W_D.T + lam / n
    dZ = dA * (Z > 0)
    grads = {"encoder": Xc.T @ dZ, "decoder": A.T @ dR}
    if model.pre_bias is not None:
        # offset enters as -off before encoding and +off after decoding
        grads["pre_bias"] = dR.sum(axis=0) - (dZ @ W_E.T).sum(axis=0)
    return float(loss), grads


def init_model(d: int, cfg: SaeTrainConfig, rng, center=None) -> SaeModel:
    m = cfg.expansion * d
    bound = 1.0 / np.sqrt(d)
    W_E = rng.uniform(-bound, bound, size=(d, m))
    return SaeModel(
        encoder=W_E,
        decoder=W_E.T.copy(),
        l1_coef=cfg.l1_coef,
        seed=cfg.seed,
        pre_bias=np.zeros(d) if cfg.bias else None,
        center=center,
    )


def sae_train(data, cfg: SaeTrainConfig | None = None, callback=None):
    """Train with Adam on shuffled mini-batches (last partial batch kept).

    Returns ``(model, loss_curve)`` where ``loss_curve[e]`` is the
    sample-weighted mean batch loss of epoch ``e``. Deterministic per
    ``cfg.seed``.
    """
    cfg = cfg or SaeTrainConfig()
    X = check_matrix(data, name="training data")
    n, d = X.shape
    rng = np.random.default_rng(cfg.seed)
    center = X.mean(axis=0) if cfg.center else None
    model = init_model(d, cfg, rng, center=center)
    params = {"encoder": model.encoder, "decoder": model.decoder}
    if model.pre_bias is not None:
        params["pre_bias"] = model.pre_bias
    m1 = {k: np.zeros_like(v) for k, v in params.items()}
    m2 = {k: np.zeros_like(v) for k, v in params.items()}
    b1, b2 = cfg.betas
    step = 0
    curve = []
    for epoch in range(cfg.n_epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = sae_loss_grad(model, X[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch)
            total += loss * idx.size
            step += 1
            for k, g in grads.items():
                m1[k] = b1 * m1[k] + (1 - b1) * g
                m2[k] = b2 * m2[k] + (1 - b2) * g * g
                mhat = m1[k] / (1 - b1**step)
                vhat = m2[k] / (1 - b2**step)
                params[k] = params[k] - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
            if not all(np.all(np.isfinite(v)) for v in params.values()):
                raise TrainingDiverged(epoch)
            model = replace(model, **params)
        mean_loss = total / n
        if not np.isfinite(mean_loss):
            raise TrainingDiverged(epoch)
        curve.append(float(mean_loss))
        if callback is not None:
            callback(epoch, mean_loss)
    if curve[-1] > 1.05 * min(curve):
        warnings.warn(
            f"final epoch loss {curve[-1]:.6g} exceeds 1.05x the best epoch loss {min(curve):.6g}",
            RuntimeWarning,
            stacklevel=2,
        )
    return model, curve


def save_sae(path, model: SaeModel) -> None:
    """Write magic, u32 JSON-header length, JSON header, then DFMZEMB1 blocks."""
    header = {
        "d": model.d,
        "m": model.m,
        "expansion": model.expansion,
        "lambda": model.l1_coef,
        "seed": model.seed,
        "pre_bias": model.pre_bias is not None,
        "center": model.center is not None,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SAE_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        _write_matrix(fh, np.asarray(model.encoder, dtype="<f4"))
        _write_matrix(fh, np.asarray(model.decoder, dtype="<f4"))
        for vec in (model.pre_bias, model.center):
            if vec is not None:
                _write_matrix(fh, np.asarray(vec, dtype="<f4").reshape(1, -1))


def load_sae(path) -> SaeModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != SAE_MAGIC:
        raise FormatError(f"{path}: not an SAE model file")
    (hlen,) = struct.unpack("<I", blob[8:12])
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    fh = io.BytesIO(blob[12 + hlen :])
    enc = _read_matrix(fh, str(path)).data.astype(np.float64)
    dec = _read_matrix(fh, str(path)).data.astype(np.float64)
    pre_bias = _read_matrix(fh, str(path)).data[0].astype(np.float64) if header.get("pre_bias") else None
    center = _read_matrix(fh, str(path)).data[0].astype(np.float64) if header.get("center") else None
    if fh.read(1):
        raise FormatError(f"{path}: trailing bytes")
    if enc.shape != (header["d"], header["m"]):
        raise FormatError(f"{path}: encoder shape disagrees with header")
    return SaeModel(enc, dec, float(header["lambda"]), header.get("seed"), pre_bias, center)


def as_float32(model: SaeModel) -> SaeModel:
    """The model exactly as it would be after a save/load round trip."""
    def cast(a):
        return None if a is None else np.asarray(a, dtype="<f4").astype(np.float64)

    return replace(
        model,
        encoder=cast(model.encoder),
        decoder=cast(model.decoder),
        pre_bias=cast(model.pre_bias),
        center=cast(model.center),
    )


class SparseAutoencoder(TransformerMixin, BaseEstimator):
    """Scikit-learn wrapper; ``transform`` encodes, ``inverse_transform`` decodes.

    Parameters mirror :class:`SaeTrainConfig`.
    """

    def __init__(
        self,
        l1_coef=3e-5,
        expansion=8,
        learning_rate=5e-4,
        betas=(0.9, 0.999),
        batch_size=4096,
        n_epochs=50,
        seed=0,
        bias=False,
        center=False,
    ):
        self.l1_coef = l1_coef
        self.expansion = expansion
        self.learning_rate = learning_rate
        self.betas = betas
        self.batch_size = batch_size
        self.n_epochs = n_epochs
        self.seed = seed
        self.bias = bias
        self.center = center

    def config(self) -> SaeTrainConfig:
        return SaeTrainConfig(
            l1_coef=self.l1_coef,
            expansion=self.expansion,
            learning_rate=self.learning_rate,
            betas=tuple(self.betas),
            batch_size=self.batch_size,
            n_epochs=self.n_epochs,
            seed=self.seed,
            bias=self.bias,
            center=self.center,
        )

    def fit(self, X, y=None):
        self.model_, self.loss_curve_ = sae_train(X, self.config())
        self.n_features_in_ = self.model_.d
        return self

    @classmethod
    def from_model(cls, model: SaeModel):
        est = cls(l1_coef=model.l1_coef, expansion=model.expansion, bias=model.pre_bias is not None)
        est.model_ = model
        est.loss_curve_ = []
        est.n_features_in_ = model.d
        return est

    def transform(self, X):
        check_is_fitted(self, "model_")
        return sae_encode(self.model_, X)

    def inverse_transform(self, A):
        check_is_fitted(self, "model_")
        return sae_decode(self.model_, A)

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def score(self, X, y=None):
        """Negative reconstruction MSE (higher is better)."""
        check_is_fitted(self, "model_")
        return -reconstruction_mse(self.model_, X)
