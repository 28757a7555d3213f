"""Deterministic encoder/decoder pair and the encoder-feature perceptual distance."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DomainError, TrainingError
from .nn import MLP, SGD
from .schedule import to_data, to_model

_NORM_EPS = 1e-24


@dataclass
class AutoEncoder:
    encoder: MLP
    decoder: MLP

    @classmethod
    def create(cls, dim, latent, hidden=64, seed=0, allow_full=False):
        if latent >= dim and not allow_full:
            raise DomainError(f"latent size {latent} must be smaller than data size {dim}")
        rng = np.random.default_rng(seed)
        mid = () if hidden is None else (hidden,)
        return cls(MLP((dim, *mid, latent), rng), MLP((latent, *mid, dim), rng))

    @classmethod
    def identity(cls, dim):
        """Linear AE with m = d and identity weights (tests only)."""
        ae = cls.create(dim, dim, hidden=None, allow_full=True)
        ae.encoder.weights[0] = np.eye(dim)
        ae.decoder.weights[0] = np.eye(dim)
        return ae

    @property
    def dim(self):
        return self.encoder.sizes[0]

    @property
    def latent_dim(self):
        return self.encoder.sizes[-1]

    def copy(self):
        return AutoEncoder(self.encoder.copy(), self.decoder.copy())

    def to_dict(self):
        return {"encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(MLP.from_dict(d["encoder"]), MLP.from_dict(d["decoder"]))


def _check(ae, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != ae.dim:
        raise DomainError(f"input dimension {x.shape[-1]} != autoencoder dimension {ae.dim}")
    return x


def encode(ae: AutoEncoder, x):
    return ae.encoder.forward(to_model(_check(ae, x)))


def decode(ae: AutoEncoder, z, clamp=True):
    return to_data(ae.decoder.forward(np.asarray(z, dtype=float)), clamp=clamp)


def reconstruct_ae(ae: AutoEncoder, x, clamp=True):
    return decode(ae, encode(ae, x), clamp=clamp)


def ae_vjp(ae: AutoEncoder, x, v):
    """v^T d D(E(x)) / dx through the clamped reconstruction."""
    x = _check(ae, x)
    z, enc_acts = ae.encoder.forward(to_model(x), keep=True)
    out, dec_acts = ae.decoder.forward(z, keep=True)
    raw = to_data(out, clamp=False)
    g = np.where((raw > 0.0) & (raw < 1.0), 0.5 * np.asarray(v, dtype=float), 0.0)
    gz = ae.decoder.backward(dec_acts, g, param_grads=False)[0]
    return 2.0 * ae.encoder.backward(enc_acts, gz, param_grads=False)[0]


def decoder_vjp(ae: AutoEncoder, z, v):
    """v^T d decode(z, clamp=False) / dz."""
    return ae.decoder.vjp(np.asarray(z, dtype=float), 0.5 * np.asarray(v, dtype=float))


def _unit(h):
    norm = np.sqrt(np.sum(h * h, axis=-1, keepdims=True) + _NORM_EPS)
    return h / norm, norm


def _layers(ae, x):
    _, acts = ae.encoder.forward(to_model(x), keep=True)
    return acts


def perceptual_distance(ae: AutoEncoder, x, y):
    """Sum over encoder layers (input included) of the mean squared difference
    of unit-normalised activations.  Symmetric, non-negative, zero at x = y."""
    x, y = _check(ae, x), _check(ae, y)
    total = 0.0
    for hx, hy in zip(_layers(ae, x), _layers(ae, y)):
        nx, ny = _unit(hx)[0], _unit(hy)[0]
        total = total + np.mean((nx - ny) ** 2, axis=-1)
    return total


def _distance_grad_one(ae, acts, others):
    """Gradient of the distance w.r.t. the input behind ``acts``."""
    grads = []
    for h, other in zip(acts, others):
        n, norm = _unit(h)
        gn = 2.0 * (n - _unit(other)[0]) / h.shape[-1]
        grads.append((gn - n * np.sum(n * gn, axis=-1, keepdims=True)) / norm)
    last = len(acts) - 1
    extra = {i: grads[i] for i in range(1, last)}
    g_in = ae.encoder.backward(acts, grads[last], param_grads=False, extra_hidden=extra)[0]
    return 2.0 * (g_in + grads[0])


def perceptual_distance_grad(ae: AutoEncoder, x, y):
    """(distance, d/dx, d/dy)."""
    x, y = _check(ae, x), _check(ae, y)
    ax, ay = _layers(ae, x), _layers(ae, y)
    dist = sum(np.mean((_unit(hx)[0] - _unit(hy)[0]) ** 2, axis=-1) for hx, hy in zip(ax, ay))
    return dist, _distance_grad_one(ae, ax, ay), _distance_grad_one(ae, ay, ax)


@dataclass
class AETrainConfig:
    lr: float = 0.05
    iters: int = 3000
    batch: int = 128
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.batch <= 0 or self.iters <= 0 or self.lr < 0:
            raise ConfigError("batch and iters must be positive, lr non-negative")


def train_autoencoder(ae: AutoEncoder, data, config: AETrainConfig):
    """Minimise mean squared model-space reconstruction error; returns (ae, loss trace)."""
    data = to_model(_check(ae, data))
    rng = np.random.default_rng(config.seed)
    params = ae.encoder.params + ae.decoder.params
    opt = SGD(params, config.lr, config.momentum)
    trace = np.empty(config.iters)
    for it in range(config.iters):
        batch = data[rng.integers(0, len(data), size=config.batch)]
        z, enc_acts = ae.encoder.forward(batch, keep=True)
        out, dec_acts = ae.decoder.forward(z, keep=True)
        err = out - batch
        loss = float(np.mean(err * err))
        if not np.isfinite(loss) or loss > 1e3:
            raise TrainingError(f"autoencoder training diverged at iteration {it}")
        trace[it] = loss
        gz, dec_grads = ae.decoder.backward(dec_acts, 2.0 * err / err.size)
        _, enc_grads = ae.encoder.backward(enc_acts, gz)
        if config.lr > 0:
            opt.step(params, enc_grads + dec_grads)
    return ae, trace
