"""Noise-prediction models: exact Gaussian-mixture scores and a trainable denoiser."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, DomainError, TrainingError
from .nn import MLP, SGD
from .schedule import DiffusionSchedule, alpha_bar, reconstruct, TrajectoryState


@dataclass
class GaussianMixture:
    """Isotropic mixture sum_k w_k N(mu_k, var_k I), in model space."""

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.asarray(self.variances, dtype=float).ravel()
        k = len(self.weights)
        if self.means.shape[0] != k or len(self.variances) != k:
            raise DomainError("weights, means and variances disagree on K")
        if np.any(self.weights <= 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise DomainError("mixture weights must be positive and sum to 1")
        if np.any(self.variances <= 0):
            raise DomainError("mixture variances must be positive")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return len(self.weights)

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        noise = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.sqrt(self.variances[comp])[:, None] * noise

    def noised(self, t, schedule):
        ab = alpha_bar(schedule, t)
        return np.sqrt(ab) * self.means, ab * self.variances + (1.0 - ab)

    def shifted(self, offset=0.0, var_scale=1.0):
        """Means moved by ``offset``; component spread (standard deviation)
        multiplied by ``var_scale``."""
        return GaussianMixture(self.weights.copy(), self.means + offset, self.variances * var_scale ** 2)

    def to_dict(self):
        return {"weights": self.weights.tolist(), "means": self.means.tolist(),
                "variances": self.variances.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["weights"], d["means"], d["variances"])


def _check_dim(mixture, x):
    if x.shape[-1] != mixture.dim:
        raise DomainError(f"point dimension {x.shape[-1]} != mixture dimension {mixture.dim}")


def _responsibilities(mixture, x, t, schedule):
    """Posterior component weights of the noised mixture, computed without
    materialising the (n, K, d) difference tensor."""
    means, var = mixture.noised(t, schedule)
    sq = (np.sum(x * x, axis=-1)[..., None] - 2.0 * x @ means.T
          + np.sum(means * means, axis=-1))
    sq = np.maximum(sq, 0.0)
    d = mixture.dim
    logits = np.log(mixture.weights) - 0.5 * d * np.log(2 * np.pi * var) - 0.5 * sq / var
    log_norm = logsumexp(logits, axis=-1, keepdims=True)
    return np.exp(logits - log_norm), means, var, log_norm[..., 0]


def gmm_log_density(mixture, x, t, schedule):
    x = np.asarray(x, dtype=float)
    _check_dim(mixture, x)
    return _responsibilities(mixture, x, t, schedule)[3]


def _score_from(r, means, var, x):
    w = r / var
    return w @ means - np.sum(w, axis=-1, keepdims=True) * x


def gmm_score(mixture, x, t, schedule):
    """Exact score of the noised mixture at x."""
    x = np.asarray(x, dtype=float)
    _check_dim(mixture, x)
    r, means, var, _ = _responsibilities(mixture, x, t, schedule)
    return _score_from(r, means, var, x)


def gmm_score_vjp(mixture, x, t, schedule, v):
    """v^T J of the score, from the closed-form Hessian of the log-density.

    With component scores s_k = -(x - m_k)/v_k and posterior weights r_k the
    Hessian is -sum_k r_k/v_k I + sum_k r_k s_k s_k^T - s s^T (symmetric).
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    _check_dim(mixture, x)
    r, means, var, _ = _responsibilities(mixture, x, t, schedule)
    score = _score_from(r, means, var, x)
    sv = (v @ means.T - np.sum(x * v, axis=-1, keepdims=True)) / var    # s_k . v
    c = r * sv / var
    out = -np.sum(r / var, axis=-1, keepdims=True) * v
    out += c @ means - np.sum(c, axis=-1, keepdims=True) * x
    out -= np.sum(score * v, axis=-1, keepdims=True) * score
    return out


class ScoreModel:
    """A noise predictor eps(x, t) plus its input VJP; score follows from eps."""

    dim: int
    schedule: DiffusionSchedule

    def eps(self, x, t):
        raise NotImplementedError

    def eps_vjp(self, x, t, v):
        raise NotImplementedError

    def score(self, x, t):
        return -self.eps(x, t) / self.schedule.sigma(max(t, self.schedule.t_min))

    def score_vjp(self, x, t, v):
        return -self.eps_vjp(x, t, v) / self.schedule.sigma(max(t, self.schedule.t_min))

    def eps_with_scale(self, x, t):
        """eps(x, t) and a per-sample scalar approximating d eps/dx.

        The scalar only preconditions the exact step reversal; the default is
        the value for a standard normal, sigma(t).
        """
        sig = self.schedule.sigma(max(t, self.schedule.t_min))
        return self.eps(x, t), np.full(np.shape(x)[:-1] + (1,), sig)


class AnalyticScore(ScoreModel):
    def __init__(self, mixture: GaussianMixture, schedule: DiffusionSchedule):
        self.mixture = mixture
        self.schedule = schedule
        self.dim = mixture.dim

    def score(self, x, t):
        return gmm_score(self.mixture, x, t, self.schedule)

    def score_vjp(self, x, t, v):
        return gmm_score_vjp(self.mixture, x, t, self.schedule, v)

    def eps(self, x, t):
        return -self.schedule.sigma(t) * gmm_score(self.mixture, x, t, self.schedule)

    def eps_vjp(self, x, t, v):
        return -self.schedule.sigma(t) * gmm_score_vjp(self.mixture, x, t, self.schedule, v)

    def eps_with_scale(self, x, t):
        x = np.asarray(x, dtype=float)
        _check_dim(self.mixture, x)
        r, means, var, _ = _responsibilities(self.mixture, x, t, self.schedule)
        sig = self.schedule.sigma(t)
        return -sig * _score_from(r, means, var, x), sig * np.sum(r / var, axis=-1, keepdims=True)


class ConstantEps(ScoreModel):
    """eps independent of (x, t); DDIM round trips through it are exact."""

    def __init__(self, value, schedule):
        self.value = np.asarray(value, dtype=float)
        self.schedule = schedule
        self.dim = self.value.shape[-1]

    def eps(self, x, t):
        return np.broadcast_to(self.value, np.shape(x)).copy()

    def eps_vjp(self, x, t, v):
        return np.zeros_like(np.asarray(v, dtype=float))


class DenoiserNet(ScoreModel):
    """tanh MLP eps(x, t); time enters as the two extra features t and sigma(t).

    With ``precond=v`` the MLP output m is read as a denoised centre and
    eps = sigma/c * (x - sqrt(ab) m) with c = ab*v + sigma^2, which is exact
    for Gaussian data of per-dimension variance v centred at m.  The MLP then
    only has to learn a bounded, low-rank map instead of a steep identity.
    """

    def __init__(self, dim, hidden=(32,), schedule=None, seed=0, zero=False, precond=None):
        self.dim = int(dim)
        self.schedule = schedule or DiffusionSchedule()
        hidden = (hidden,) if np.isscalar(hidden) else tuple(hidden)
        if precond is not None and precond <= 0:
            raise ConfigError("precond variance must be positive")
        self.precond = None if precond is None else float(precond)
        self.mlp = MLP((self.dim + 2, *hidden, self.dim), np.random.default_rng(seed), zero=zero)
        if self.precond is not None:
            self.mlp.weights[-1][:] = 0.0       # start from the plain Gaussian denoiser

    def _inputs(self, x, t):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise DomainError(f"input dimension {x.shape[-1]} != net dimension {self.dim}")
        t = np.broadcast_to(np.asarray(t, dtype=float), x.shape[:-1])
        sig = self.schedule.sigma(np.maximum(t, self.schedule.t_min))
        return np.concatenate([x, t[..., None], sig[..., None]], axis=-1)

    def _coeffs(self, x, t):
        """(gain, mix) with eps = gain * (x - mix * mlp_out), per sample."""
        t = np.broadcast_to(np.maximum(np.asarray(t, dtype=float), self.schedule.t_min),
                            np.shape(x)[:-1])[..., None]
        ab = alpha_bar(self.schedule, t)
        sig = np.sqrt(1.0 - ab)
        return sig / (ab * self.precond + sig * sig), np.sqrt(ab)

    def eps(self, x, t):
        out = self.mlp.forward(self._inputs(x, t))
        if self.precond is None:
            return out
        gain, mix = self._coeffs(x, t)
        return gain * (np.asarray(x, dtype=float) - mix * out)

    def eps_vjp(self, x, t, v):
        return net_vjp(self, x, t, v)[0]

    def eps_with_scale(self, x, t):
        if self.precond is None:
            return super().eps_with_scale(x, t)
        return self.eps(x, t), self._coeffs(x, t)[0]

    def to_dict(self):
        return {"dim": self.dim, "mlp": self.mlp.to_dict(), "schedule": self.schedule.to_dict(),
                "precond": self.precond}

    @classmethod
    def from_dict(cls, d):
        net = cls.__new__(cls)
        net.dim = int(d["dim"])
        net.schedule = DiffusionSchedule(**d["schedule"])
        net.precond = d.get("precond")
        net.mlp = MLP.from_dict(d["mlp"])
        return net


def net_eps(net: DenoiserNet, x, t):
    return net.eps(x, t)


def net_vjp(net: DenoiserNet, x, t, v, param_grads=False):
    """Reverse-mode derivative of v . eps(x, t): (input cotangent, parameter grads)."""
    v = np.asarray(v, dtype=float)
    _, acts = net.mlp.forward(net._inputs(x, t), keep=True)
    if net.precond is None:
        g_in, grads = net.mlp.backward(acts, v, param_grads=param_grads)
        return g_in[..., :net.dim], grads
    gain, mix = net._coeffs(x, t)
    g_out = -gain * mix * v
    g_in, grads = net.mlp.backward(acts, g_out, param_grads=param_grads)
    return gain * v + g_in[..., :net.dim], grads


@dataclass
class TrainConfig:
    batch: int = 128
    lr: float = 0.05
    iters: int = 3000
    seed: int = 0
    momentum: float = 0.9

    def __post_init__(self):
        if self.batch <= 0 or self.iters <= 0 or self.lr < 0:
            raise ConfigError("batch and iters must be positive, lr non-negative")


def train_denoiser(net: DenoiserNet, mixture: GaussianMixture, config: TrainConfig):
    """Denoising score matching on draws from ``mixture``; returns (net, loss trace)."""
    rng = np.random.default_rng(config.seed)
    sched = net.schedule
    opt = SGD(net.mlp.params, config.lr, config.momentum)
    trace = np.empty(config.iters)
    for it in range(config.iters):
        x0 = mixture.sample(config.batch, rng)
        noise = rng.standard_normal(x0.shape)
        t = rng.uniform(sched.t_min, 1.0, size=config.batch)
        ab = alpha_bar(sched, t)[:, None]
        xt = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
        inputs = net._inputs(xt, t)
        out, acts = net.mlp.forward(inputs, keep=True)
        if net.precond is None:
            pred, dpred = out, 1.0
        else:
            gain, mix = net._coeffs(xt, t)
            pred, dpred = gain * (xt - mix * out), -gain * mix
        err = pred - noise
        loss = float(np.mean(np.sum(err * err, axis=1)) / net.dim)
        if not np.isfinite(loss) or loss > 1e3:
            raise TrainingError(f"denoiser training diverged at iteration {it} (loss={loss:.3g})")
        trace[it] = loss
        _, grads = net.mlp.backward(acts, dpred * 2.0 * err / (config.batch * net.dim))
        if config.lr > 0:
            opt.step(net.mlp.params, grads)
    return net, trace


def smoothed(trace, window=100):
    trace = np.asarray(trace, dtype=float)
    window = max(1, min(window, len(trace)))
    kernel = np.ones(window) / window
    return np.convolve(trace, kernel, mode="valid")


GENERATOR_KINDS = ("analytic-exact", "analytic-shifted", "trained")


@dataclass
class GeneratorSpec:
    id: str
    kind: str = "analytic-exact"
    offset: float = 0.0
    var_scale: float = 1.0
    seed: int = 0
    hidden: int = 32
    train: dict = field(default_factory=dict)

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, "offset": self.offset, "var_scale": self.var_scale,
                "seed": self.seed, "hidden": self.hidden, "train": dict(self.train)}


def make_generator(spec: GeneratorSpec, base: GaussianMixture, schedule: DiffusionSchedule):
    if spec.kind == "analytic-exact":
        return AnalyticScore(base, schedule)
    if spec.kind == "analytic-shifted":
        return AnalyticScore(base.shifted(spec.offset, spec.var_scale), schedule)
    if spec.kind == "trained":
        # var_scale misspecifies the preconditioner's prior std
        net = DenoiserNet(base.dim, spec.hidden, schedule, seed=spec.seed,
                          precond=float(np.mean(base.variances)) * spec.var_scale ** 2)
        cfg = TrainConfig(**{"seed": spec.seed, **spec.train})
        return train_denoiser(net, base, cfg)[0]
    raise ConfigError(f"unknown generator kind {spec.kind!r}; expected one of {GENERATOR_KINDS}")


def sample_fakes(model: ScoreModel, n, steps, schedule, rng):
    """Generator output: DDIM reconstruction of standard-normal draws at t=1."""
    noise = rng.standard_normal((n, model.dim))
    return reconstruct(TrajectoryState(noise, 1.0), steps, model, schedule)
