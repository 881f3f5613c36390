"""Conditional normalizing flows over label vectors.

Three transform families share one scaffold: additive coupling (nice),
affine coupling (realnvp), and masked autoregressive (maf). Every layer
record is transform + optional invertible batch norm, with a fixed
dimension-reversal permutation between consecutive layers. The conditioning
vector (text embedding, optionally concatenated with an annotator profile)
is appended to every conditioner input and never transformed itself.

The forward direction maps data y to base noise z; log_prob(y, ctx) is the
standard-normal base density at z plus the accumulated log-determinant.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from .compute import Mlp, ParamStore, init_mlp_params, mlp_forward, no_grad
from .compute import tensor as T
from .compute.mlp import batch_norm_forward, _init_batch_norm
from .compute.tensor import Tensor
from .errors import ConfigError, NumericalError, ShapeError

LOG_2PI = math.log(2.0 * math.pi)
KINDS = ("nice", "realnvp", "maf")
BN_EPS = 1e-5


@dataclass(frozen=True)
class FlowConfig:
    kind: str
    dim: int
    context_dim: int = 0
    num_layers: int = 2
    blocks_per_layer: int = 2
    hidden_features: int = 8
    dropout: float = 0.0
    batch_norm_within: bool = False
    batch_norm_between: bool = False
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown flow kind {self.kind!r}")
        if self.dim < 1:
            raise ConfigError("dim must be >= 1")
        if self.kind in ("nice", "realnvp") and self.dim < 2:
            raise ConfigError(f"{self.kind} coupling needs dim >= 2")
        if self.context_dim < 0:
            raise ConfigError("context_dim must be >= 0")
        if self.num_layers < 1 or self.blocks_per_layer < 1:
            raise ConfigError("num_layers and blocks_per_layer must be >= 1")
        if self.hidden_features < 1:
            raise ConfigError("hidden_features must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")


@dataclass(frozen=True)
class _Coupling:
    pass_idx: np.ndarray
    trans_idx: np.ndarray
    restore: np.ndarray
    net: Mlp
    prefix: str
    additive: bool


@dataclass(frozen=True)
class _Made:
    masks: tuple
    prefix: str
    batch_norm: bool


@dataclass(frozen=True)
class _Record:
    perm: np.ndarray | None
    transform: object
    bn_prefix: str | None


def _made_masks(dim, context_dim, hidden, blocks):
    """MADE connectivity masks for input [y | ctx] -> hidden^blocks -> (mu, alpha).

    y inputs carry degrees 1..D, context inputs degree 0 (visible to every
    unit). Output slot for dimension d may depend only on strictly lower
    degrees, so dimension 1 sees just the context.
    """
    d_in = np.concatenate([np.arange(1, dim + 1), np.zeros(context_dim, dtype=int)])
    if dim > 1:
        d_hidden = (np.arange(hidden) % (dim - 1)) + 1
    else:
        d_hidden = np.zeros(hidden, dtype=int)
    d_out = np.concatenate([np.arange(1, dim + 1), np.arange(1, dim + 1)])
    masks = [(d_hidden[None, :] >= d_in[:, None]).astype(np.float64)]
    for _ in range(blocks - 1):
        masks.append((d_hidden[None, :] >= d_hidden[:, None]).astype(np.float64))
    masks.append((d_out[None, :] > d_hidden[:, None]).astype(np.float64))
    return tuple(masks)


def _init_masked_params(params, prefix, masks, rng, batch_norm):
    for i, mask in enumerate(masks):
        fan_in, fan_out = mask.shape
        last = i == len(masks) - 1
        if last:
            w = np.zeros((fan_in, fan_out))
        else:
            w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        params.add(f"{prefix}.w{i}", w)
        params.add(f"{prefix}.b{i}", np.zeros(fan_out))
        if batch_norm and not last:
            _init_batch_norm(params, f"{prefix}.bn{i}", fan_out)


def _masked_forward(made, params, x, mode):
    h = x
    last = len(made.masks) - 1
    for i, mask in enumerate(made.masks):
        w = params.tensor(f"{made.prefix}.w{i}") * mask
        h = T.matmul(h, w) + params.tensor(f"{made.prefix}.b{i}")
        if i < last:
            h = T.tanh(h)
            if made.batch_norm:
                h = batch_norm_forward(h, params, f"{made.prefix}.bn{i}", mode)
    return h


def build_flow(config, seed=0, params=None):
    """Construct a flow whose transform starts as the identity map.

    All conditioner final layers are zero, batch-norm layers start as the
    identity on their frozen statistics, and the nice scaling vector is zero,
    so log_prob at init equals the base log density (in eval mode). Passing
    `params` lets the flow share a store with other trainable pieces.
    """
    if params is None:
        params = ParamStore()
    children = np.random.SeedSequence(seed).spawn(config.num_layers)
    records = []
    d = config.dim
    for k in range(config.num_layers):
        rng = np.random.default_rng(children[k])
        prefix = f"flow.l{k}"
        if config.kind == "maf":
            masks = _made_masks(
                d, config.context_dim, config.hidden_features, config.blocks_per_layer
            )
            _init_masked_params(
                params, prefix, masks, rng, config.batch_norm_within
            )
            transform = _Made(masks, prefix, config.batch_norm_within)
        else:
            half = (d + 1) // 2
            if k % 2 == 0:
                pass_idx = np.arange(half)
                trans_idx = np.arange(half, d)
            else:
                pass_idx = np.arange(half, d)
                trans_idx = np.arange(half)
            out = len(trans_idx) if config.kind == "nice" else 2 * len(trans_idx)
            net = Mlp(
                in_features=len(pass_idx) + config.context_dim,
                hidden=(config.hidden_features,) * config.blocks_per_layer,
                out_features=out,
                activation=config.activation,
                dropout=config.dropout,
                batch_norm=config.batch_norm_within,
            )
            init_mlp_params(net, params, prefix, rng, zero_last=True)
            transform = _Coupling(
                pass_idx,
                trans_idx,
                np.argsort(np.concatenate([pass_idx, trans_idx])),
                net,
                prefix,
                additive=config.kind == "nice",
            )
        bn_prefix = None
        if config.batch_norm_between:
            bn_prefix = f"{prefix}.between"
            _init_batch_norm(params, bn_prefix, d)
        perm = np.arange(d)[::-1].copy() if k > 0 else None
        records.append(_Record(perm, transform, bn_prefix))
    if config.kind == "nice":
        params.add("flow.scale.log_scale", np.zeros(d))
    return FlowModel(config, params, records)


class FlowModel:
    def __init__(self, config, params, records):
        self.config = config
        self.params = params
        self.records = records

    # -- shape plumbing -----------------------------------------------------

    def _prepare(self, y, ctx):
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        if single:
            y = y[None, :]
        if y.ndim != 2 or y.shape[1] != self.config.dim:
            raise ShapeError(f"expected labels of dim {self.config.dim}, got {y.shape}")
        ctx = self._prepare_ctx(ctx, y.shape[0])
        return y, ctx, single

    def _prepare_ctx(self, ctx, batch):
        c = self.config.context_dim
        if c == 0:
            return np.zeros((batch, 0))
        if isinstance(ctx, Tensor):
            if ctx.data.ndim != 2 or ctx.data.shape != (batch, c):
                raise ShapeError(f"expected context {(batch, c)}, got {ctx.data.shape}")
            return ctx
        if ctx is None:
            raise ShapeError(f"model needs a context of dim {c}")
        ctx = np.asarray(ctx, dtype=np.float64)
        if ctx.ndim == 1:
            if ctx.shape[0] != c:
                raise ShapeError(f"expected context of dim {c}, got {ctx.shape[0]}")
            ctx = np.broadcast_to(ctx, (batch, c)).copy()
        if ctx.shape != (batch, c):
            raise ShapeError(f"expected context {(batch, c)}, got {ctx.shape}")
        return ctx

    # -- forward (data -> base) ---------------------------------------------

    def forward_graph(self, y, ctx, mode="eval", rng=None):
        """Recorded forward pass. Returns (z, log_det) as tensors (B, D), (B,)."""
        if mode not in ("train", "eval"):
            raise ConfigError(f"unknown mode {mode!r}")
        h = y if isinstance(y, Tensor) else Tensor(y)
        ctx_t = ctx if isinstance(ctx, Tensor) else Tensor(ctx)
        logdet = Tensor(np.zeros(h.data.shape[0]))
        for k, record in enumerate(self.records):
            if record.perm is not None:
                h = T.take_cols(h, record.perm)
            h, contrib = self._transform(record.transform, h, ctx_t, mode, rng)
            logdet = logdet + contrib
            if record.bn_prefix is not None:
                h, contrib = self._bn_forward(record.bn_prefix, h, mode)
                logdet = logdet + contrib
            if not np.all(np.isfinite(h.data)):
                raise NumericalError("non-finite flow output", layer=k)
        if self.config.kind == "nice":
            log_scale = self.params.tensor("flow.scale.log_scale")
            h = h * T.exp(log_scale)
            logdet = logdet + T.tsum(log_scale)
        return h, logdet

    def _transform(self, transform, h, ctx, mode, rng):
        if isinstance(transform, _Made):
            inp = _cat_ctx(h, ctx)
            out = _masked_forward(transform, self.params, inp, mode)
            d = self.config.dim
            mu = T.take_cols(out, np.arange(d))
            alpha = T.take_cols(out, np.arange(d, 2 * d))
            z = (h - mu) * T.exp(-alpha)
            return z, T.tsum(-alpha, axis=1)
        ya = T.take_cols(h, transform.pass_idx)
        yb = T.take_cols(h, transform.trans_idx)
        out = mlp_forward(
            transform.net, self.params, _cat_ctx(ya, ctx), transform.prefix, mode, rng
        )
        if transform.additive:
            zb = yb + out
            contrib = Tensor(np.zeros(h.data.shape[0]))
        else:
            nb = len(transform.trans_idx)
            log_s = T.take_cols(out, np.arange(nb))
            t = T.take_cols(out, np.arange(nb, 2 * nb))
            zb = yb * T.exp(log_s) + t
            contrib = T.tsum(log_s, axis=1)
        return T.take_cols(T.concat([ya, zb], axis=1), transform.restore), contrib

    def _bn_forward(self, prefix, h, mode):
        p = self.params
        log_gamma = p.tensor(f"{prefix}.log_gamma")
        beta = p.tensor(f"{prefix}.beta")
        if mode == "train":
            mean = T.tmean(h, axis=0, keepdims=True)
            centered = h - mean
            var = T.tmean(centered * centered, axis=0, keepdims=True)
            momentum = 0.1
            p.set_value(
                f"{prefix}.running_mean",
                (1 - momentum) * p.value(f"{prefix}.running_mean")
                + momentum * mean.data[0],
            )
            p.set_value(
                f"{prefix}.running_var",
                (1 - momentum) * p.value(f"{prefix}.running_var")
                + momentum * var.data[0],
            )
        else:
            mean = Tensor(p.value(f"{prefix}.running_mean")[None, :])
            var = Tensor(p.value(f"{prefix}.running_var")[None, :])
            centered = h - mean
        z = centered * (var + BN_EPS) ** -0.5 * T.exp(log_gamma) + beta
        contrib = T.tsum(log_gamma - 0.5 * T.log(var + BN_EPS))
        return z, contrib

    def forward(self, y, ctx=None, mode="eval"):
        """Map labels to base noise. Returns (z, log_det) as arrays."""
        y, ctx, single = self._prepare(y, ctx)
        with no_grad():
            z, logdet = self.forward_graph(y, ctx, mode=mode)
        if single:
            return z.data[0], float(logdet.data[0])
        return z.data, logdet.data

    # -- inverse (base -> data) ---------------------------------------------

    def inverse(self, z, ctx=None):
        """Map base noise back to label space. Eval mode only."""
        z, ctx, single = self._prepare(z, ctx)
        ctx_arr = ctx.data if isinstance(ctx, Tensor) else ctx
        with no_grad():
            h = z
            if self.config.kind == "nice":
                h = h * np.exp(-self.params.value("flow.scale.log_scale"))
            for k in reversed(range(len(self.records))):
                record = self.records[k]
                if record.bn_prefix is not None:
                    h = self._bn_inverse(record.bn_prefix, h)
                h = self._transform_inverse(record.transform, h, ctx_arr)
                if record.perm is not None:
                    h = h[:, np.argsort(record.perm)]
                if not np.all(np.isfinite(h)):
                    raise NumericalError("non-finite inverse output", layer=k)
        return h[0] if single else h

    def _bn_inverse(self, prefix, z):
        p = self.params
        std = np.sqrt(p.value(f"{prefix}.running_var") + BN_EPS)
        centered = (z - p.value(f"{prefix}.beta")) * np.exp(
            -p.value(f"{prefix}.log_gamma")
        )
        return centered * std + p.value(f"{prefix}.running_mean")

    def _transform_inverse(self, transform, z, ctx):
        if isinstance(transform, _Made):
            d = self.config.dim
            y = np.zeros_like(z)
            for col in range(d):
                out = _masked_forward(
                    transform, self.params, Tensor(_cat_arr(y, ctx)), "eval"
                ).data
                mu, alpha = out[:, :d], out[:, d:]
                y[:, col] = z[:, col] * np.exp(alpha[:, col]) + mu[:, col]
            return y
        ya = z[:, transform.pass_idx]
        zb = z[:, transform.trans_idx]
        out = mlp_forward(
            transform.net, self.params, _cat_arr(ya, ctx), transform.prefix, "eval"
        )
        if transform.additive:
            yb = zb - out
        else:
            nb = len(transform.trans_idx)
            yb = (zb - out[:, nb:]) * np.exp(-out[:, :nb])
        return np.concatenate([ya, yb], axis=1)[:, transform.restore]

    # -- densities and sampling ----------------------------------------------

    def log_prob_graph(self, y, ctx, mode="eval", rng=None):
        z, logdet = self.forward_graph(y, ctx, mode=mode, rng=rng)
        base = -0.5 * self.config.dim * LOG_2PI - 0.5 * T.tsum(z * z, axis=1)
        return base + logdet

    def log_prob(self, y, ctx=None, mode="eval"):
        """Conditional log density, array in, array (or scalar) out."""
        y, ctx, single = self._prepare(y, ctx)
        with no_grad():
            lp = self.log_prob_graph(y, ctx, mode=mode)
        return float(lp.data[0]) if single else lp.data

    def sample(self, ctx=None, n=1, seed=0):
        """Draw n labels for one context by inverting base-normal noise."""
        rng = np.random.default_rng(seed)
        z = rng.standard_normal((n, self.config.dim))
        if self.config.context_dim > 0:
            ctx = np.asarray(ctx, dtype=np.float64)
            if ctx.ndim != 1:
                raise ShapeError("sample expects a single context vector")
            ctx = np.broadcast_to(ctx, (n, self.config.context_dim)).copy()
        return self.inverse(z, ctx)

    def config_echo(self):
        return asdict(self.config)


def _cat_ctx(h, ctx):
    if ctx.data.shape[1] == 0:
        return h
    return T.concat([h, ctx], axis=1)


def _cat_arr(h, ctx):
    if ctx.shape[1] == 0:
        return h
    return np.concatenate([h, ctx], axis=1)


def base_log_prob(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :]
    return -0.5 * z.shape[1] * LOG_2PI - 0.5 * np.sum(z * z, axis=1)
