"""Non-flow baselines: a conditional Gaussian mixture and deterministic heads.

The mixture maps the conditioning vector through one MLP to component
logits, means, and log standard deviations (diagonal covariance). The
deterministic heads are plain MLP predictors: per-dimension logits with a
sigmoid cross-entropy loss for classification, direct values with a squared
loss for regression.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .compute import Mlp, ParamStore, init_mlp_params, mlp_forward, no_grad
from .compute import tensor as T
from .compute.tensor import Tensor
from .errors import ConfigError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)
LOG_STD_BOUND = 7.0


@dataclass(frozen=True)
class GmmConfig:
    dim: int
    context_dim: int
    components: int = 5
    hidden: tuple = (16,)
    activation: str = "tanh"
    dropout: float = 0.0

    def __post_init__(self):
        if self.dim < 1 or self.context_dim < 1:
            raise ConfigError("GmmConfig needs dim >= 1 and context_dim >= 1")
        if self.components < 1:
            raise ConfigError("components must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def build_gmm(config, seed=0, params=None):
    """Mixture conditioner with zero final weights.

    The mean bias slots get a small seeded spread: with more than one
    component a perfectly symmetric start gives every component identical
    gradients, so the mixture could never separate. Passing `params` lets
    the mixture share a store with other trainable pieces.
    """
    if params is None:
        params = ParamStore()
    m, d = config.components, config.dim
    net = Mlp(
        in_features=config.context_dim,
        hidden=config.hidden,
        out_features=m + 2 * m * d,
        activation=config.activation,
        dropout=config.dropout,
    )
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    init_mlp_params(net, params, "gmm", rng, zero_last=True)
    last = len(net.widths) - 2
    bias = np.zeros(m + 2 * m * d)
    bias[m : m + m * d] = rng.normal(size=m * d) * 0.1
    params.set_value(f"gmm.b{last}", bias)
    return GmmModel(config, params, net)


class GmmModel:
    def __init__(self, config, params, net):
        self.config = config
        self.params = params
        self.net = net

    def _prepare(self, y, ctx):
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        if single:
            y = y[None, :]
        if y.shape[1] != self.config.dim:
            raise ShapeError(f"expected labels of dim {self.config.dim}, got {y.shape}")
        if not isinstance(ctx, Tensor):
            if ctx is None:
                raise ShapeError("gmm needs a context")
            ctx = np.asarray(ctx, dtype=np.float64)
            if ctx.ndim == 1:
                ctx = np.broadcast_to(ctx, (y.shape[0], ctx.shape[0])).copy()
        width = ctx.data.shape[1] if isinstance(ctx, Tensor) else ctx.shape[1]
        if width != self.config.context_dim:
            raise ShapeError(
                f"expected context of dim {self.config.context_dim}, got {width}"
            )
        return y, ctx, single

    def _components(self, ctx, mode, rng=None):
        """Split conditioner output into (log_weights, means, log_stds)."""
        m, d = self.config.components, self.config.dim
        out = mlp_forward(self.net, self.params, ctx, "gmm", mode, rng)
        logits = T.take_cols(out, np.arange(m))
        log_w = logits - T.logsumexp(logits, axis=1, keepdims=True)
        means = [
            T.take_cols(out, np.arange(m + k * d, m + (k + 1) * d)) for k in range(m)
        ]
        log_stds = [
            T.clip(
                T.take_cols(out, np.arange(m + m * d + k * d, m + m * d + (k + 1) * d)),
                -LOG_STD_BOUND,
                LOG_STD_BOUND,
            )
            for k in range(m)
        ]
        return log_w, means, log_stds

    def log_prob_graph(self, y, ctx, mode="eval", rng=None):
        y_t = y if isinstance(y, Tensor) else Tensor(y)
        ctx_t = ctx if isinstance(ctx, Tensor) else Tensor(ctx)
        m, d = self.config.components, self.config.dim
        log_w, means, log_stds = self._components(ctx_t, mode, rng)
        cols = []
        for k in range(m):
            zed = (y_t - means[k]) * T.exp(-log_stds[k])
            comp = (
                -0.5 * d * LOG_2PI
                - T.tsum(log_stds[k], axis=1, keepdims=True)
                - 0.5 * T.tsum(zed * zed, axis=1, keepdims=True)
            )
            cols.append(T.take_cols(log_w, np.array([k])) + comp)
        return T.logsumexp(T.concat(cols, axis=1), axis=1)

    def log_prob(self, y, ctx=None, mode="eval"):
        y, ctx, single = self._prepare(y, ctx)
        with no_grad():
            lp = self.log_prob_graph(y, ctx, mode=mode)
        return float(lp.data[0]) if single else lp.data

    def sample(self, ctx=None, n=1, seed=0):
        """Component choice then a diagonal-normal draw, one context."""
        ctx = np.asarray(ctx, dtype=np.float64)
        if ctx.ndim != 1:
            raise ShapeError("sample expects a single context vector")
        rng = np.random.default_rng(seed)
        with no_grad():
            log_w, means, log_stds = self._components(Tensor(ctx[None, :]), "eval")
        weights = np.exp(log_w.data[0])
        weights = weights / weights.sum()
        mu = np.stack([mk.data[0] for mk in means])
        sigma = np.exp(np.stack([sk.data[0] for sk in log_stds]))
        comp = rng.choice(self.config.components, size=n, p=weights)
        eps = rng.standard_normal((n, self.config.dim))
        return mu[comp] + sigma[comp] * eps

    def config_echo(self):
        return asdict(self.config)


@dataclass(frozen=True)
class HeadConfig:
    in_features: int
    dim: int
    task: str = "classification"
    hidden: tuple = (16,)
    activation: str = "tanh"
    dropout: float = 0.0

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.in_features < 1 or self.dim < 1:
            raise ConfigError("HeadConfig needs in_features >= 1 and dim >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def build_head(config, seed=0):
    params = ParamStore()
    net = Mlp(
        in_features=config.in_features,
        hidden=config.hidden,
        out_features=config.dim,
        activation=config.activation,
        dropout=config.dropout,
    )
    init_mlp_params(net, params, "head", np.random.default_rng(np.random.SeedSequence(seed)))
    return DeterministicHead(config, params, net)


class DeterministicHead:
    def __init__(self, config, params, net):
        self.config = config
        self.params = params
        self.net = net

    def raw_graph(self, x, mode="eval", rng=None):
        x_t = x if isinstance(x, Tensor) else Tensor(x)
        return mlp_forward(self.net, self.params, x_t, "head", mode, rng)

    def loss_graph(self, x, y, mode="train", rng=None):
        """Mean per-example loss: sigmoid BCE or squared error, summed over dims."""
        out = self.raw_graph(x, mode, rng)
        y_t = y if isinstance(y, Tensor) else Tensor(y)
        if self.config.task == "classification":
            out = T.clip(out, -15.0, 15.0)
            per = y_t * T.softplus(-out) + (1.0 - y_t) * T.softplus(out)
        else:
            err = out - y_t
            per = err * err
        return T.tmean(T.tsum(per, axis=1))

    def loss(self, x, y, mode="eval"):
        with no_grad():
            return float(self.loss_graph(x, y, mode=mode).data)

    def predict(self, x):
        """Class decisions (sigmoid >= 0.5, ties to 1) or raw values."""
        with no_grad():
            out = self.raw_graph(x, "eval").data
        if self.config.task == "classification":
            return (out >= 0.0).astype(np.int64)
        return out

    def config_echo(self):
        return asdict(self.config)
