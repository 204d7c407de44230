"""Small numpy networks with exact summed-loss gradients.

Supports dense, convolution and batch-normalization layers. Batch-norm
statistics are built from plain sums so that a batch split over several
participants normalizes exactly like the concatenated batch; the sums are
combined through a :class:`SumReducer`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import (
    ConfigurationError,
    DegenerateBatchError,
    FormatError,
    NumericError,
    ProtocolOrderError,
)

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

_CKPT_MAGIC = b"STRP"
_CKPT_VERSION = 1


@dataclass
class ModelParams:
    """Trainable tensors plus non-trainable buffers (batch-norm running stats)."""

    tensors: list
    buffers: list = field(default_factory=list)

    @property
    def param_count(self) -> int:
        return int(sum(t.size for t in self.tensors))

    def copy(self) -> "ModelParams":
        return ModelParams([t.copy() for t in self.tensors], [b.copy() for b in self.buffers])

    def flat(self) -> np.ndarray:
        if not self.tensors:
            return np.zeros(0)
        return np.concatenate([t.ravel() for t in self.tensors])

    def with_flat(self, vec) -> "ModelParams":
        vec = np.asarray(vec)
        if vec.size != self.param_count:
            raise ConfigurationError(f"expected {self.param_count} values, got {vec.size}")
        out, pos = [], 0
        for t in self.tensors:
            out.append(vec[pos:pos + t.size].reshape(t.shape).astype(t.dtype, copy=True))
            pos += t.size
        return ModelParams(out, [b.copy() for b in self.buffers])

    def same_shapes(self, other) -> bool:
        return len(self.tensors) == len(other.tensors) and all(
            a.shape == b.shape for a, b in zip(self.tensors, other.tensors)
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors + self.buffers)

    def max_abs_diff(self, other) -> float:
        if not self.same_shapes(other):
            raise ConfigurationError("parameter shapes differ")
        if not self.tensors:
            return 0.0
        return float(max(np.max(np.abs(a - b)) if a.size else 0.0
                         for a, b in zip(self.tensors, other.tensors)))

    def to_bytes(self) -> bytes:
        """Checkpoint layout, all integers little-endian uint32.

        ``magic "STRP" | version | n_tensors | n_buffers`` followed, for each
        tensor then each buffer, by ``ndim | dim_0 .. dim_{ndim-1}``; after all
        headers come the float64 little-endian values in the same order, C-order.
        """
        arrays = self.tensors + self.buffers
        head = [_CKPT_MAGIC, struct.pack("<III", _CKPT_VERSION, len(self.tensors), len(self.buffers))]
        for a in arrays:
            head.append(struct.pack("<I", a.ndim))
            head.append(struct.pack(f"<{a.ndim}I", *a.shape))
        body = [np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays]
        return b"".join(head + body)

    @property
    def nbytes(self) -> int:
        arrays = self.tensors + self.buffers
        return 16 + sum(4 + 4 * a.ndim + 8 * a.size for a in arrays)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ModelParams":
        if len(data) < 16 or data[:4] != _CKPT_MAGIC:
            raise FormatError("bad checkpoint magic", 0)
        version, n_t, n_b = struct.unpack_from("<III", data, 4)
        if version != _CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", 4)
        pos, shapes = 16, []
        for _ in range(n_t + n_b):
            if pos + 4 > len(data):
                raise FormatError("truncated shape header", pos)
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            if pos + 4 * ndim > len(data):
                raise FormatError("truncated shape header", pos)
            shapes.append(struct.unpack_from(f"<{ndim}I", data, pos))
            pos += 4 * ndim
        arrays = []
        for shape in shapes:
            n = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * n > len(data):
                raise FormatError("truncated tensor data", pos)
            arrays.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64))
            pos += 8 * n
        if pos != len(data):
            raise FormatError("trailing bytes after checkpoint", pos)
        return cls(arrays[:n_t], arrays[n_t:])


@dataclass
class GradientSum:
    """Gradient of a summed loss together with the number of summed terms."""

    grads: list
    num_terms: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "GradientSum":
        return cls([np.zeros_like(t) for t in params.tensors], 0)

    def __add__(self, other: "GradientSum") -> "GradientSum":
        if len(self.grads) != len(other.grads):
            raise ConfigurationError("gradient shapes differ")
        return GradientSum([a + b for a, b in zip(self.grads, other.grads)],
                           self.num_terms + other.num_terms)

    def scaled(self, factor: float) -> "GradientSum":
        return GradientSum([g * factor for g in self.grads], self.num_terms)

    def flat(self) -> np.ndarray:
        if not self.grads:
            return np.zeros(0)
        return np.concatenate([g.ravel() for g in self.grads])


def sum_gradients(parts, like: ModelParams) -> GradientSum:
    """Add gradient sums in the given order (fixed order keeps results reproducible)."""
    total = GradientSum.zeros_like(like)
    for part in parts:
        total = total + part
    return total


def sgd_step(params: ModelParams, grad: GradientSum, lr: float, normalizer: int) -> ModelParams:
    """Return ``params - lr * grad / normalizer``; the input is not modified."""
    if normalizer < 1:
        raise ConfigurationError(f"normalizer must be >= 1, got {normalizer}")
    if len(grad.grads) != len(params.tensors) or any(
        g.shape != t.shape for g, t in zip(grad.grads, params.tensors)
    ):
        raise ConfigurationError("gradient does not match parameter shapes")
    scale = lr / normalizer
    return ModelParams([t - scale * g for t, g in zip(params.tensors, grad.grads)],
                       [b.copy() for b in params.buffers])


# -- batch normalization over split batches ---------------------------------------


class SumReducer:
    """Exact element-wise summation of per-participant partial sums.

    Partials are added left to right in the order given, so the result does
    not depend on scheduling. Subclasses may override :meth:`observe` to
    account for the exchanged values.
    """

    def reduce(self, partials):
        partials = list(partials)
        if not partials:
            raise ConfigurationError("nothing to reduce")
        self.observe(partials)
        total = np.array(partials[0], dtype=np.result_type(partials[0], np.float64), copy=True)
        for p in partials[1:]:
            total = total + p
        return total

    def observe(self, partials) -> None:
        pass


@dataclass
class BnBatchStats:
    sum_x: np.ndarray
    sum_sq_dev: np.ndarray
    count: int
    grad_sum: np.ndarray | None = None
    grad_xhat_sum: np.ndarray | None = None

    @property
    def mean(self) -> np.ndarray:
        return self.sum_x / self.count

    @property
    def var(self) -> np.ndarray:
        return self.sum_sq_dev / self.count


@dataclass
class BnCache:
    xhat: list
    inv_std: np.ndarray
    gamma: np.ndarray
    stats: BnBatchStats


def _channel_axes(x):
    return (0,) + tuple(range(2, x.ndim))


def _per_channel(v, ndim):
    return v.reshape((1, -1) + (1,) * (ndim - 2))


def bn_forward_distributed(local_inputs, gamma, beta, reducer, eps=BN_EPS):
    """Normalize every participant's activations with global batch statistics.

    Two reductions are made: the channel sums (and counts) give the mean, then
    the summed squared deviations from that mean give the variance.
    Returns ``(outputs, stats, cache)``.
    """
    if not local_inputs:
        raise DegenerateBatchError("no participants")
    local_inputs = [np.asarray(x) for x in local_inputs]
    counts = [x.size // x.shape[1] if x.size else 0 for x in local_inputs]
    sums = [x.sum(axis=_channel_axes(x)) for x in local_inputs]
    totals = reducer.reduce([np.append(s, c) for s, c in zip(sums, counts)])
    sum_x, m = totals[:-1], int(round(totals[-1]))
    if m < 2:
        raise DegenerateBatchError(f"batch-norm needs at least 2 values per channel, got {m}")
    mean = sum_x / m
    sq = [((x - _per_channel(mean, x.ndim)) ** 2).sum(axis=_channel_axes(x)) for x in local_inputs]
    sum_sq_dev = reducer.reduce(sq)
    var = sum_sq_dev / m
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = [(x - _per_channel(mean, x.ndim)) * _per_channel(inv_std, x.ndim) for x in local_inputs]
    outs = [_per_channel(gamma, h.ndim) * h + _per_channel(beta, h.ndim) for h in xhat]
    stats = BnBatchStats(sum_x, sum_sq_dev, m)
    return outs, stats, BnCache(xhat, inv_std, np.asarray(gamma), stats)


def bn_backward_distributed(upstream, cache, reducer):
    """Backward pass matching :func:`bn_forward_distributed`.

    Returns ``(input_grads, gamma_grads, beta_grads)``, one entry per
    participant. Parameter gradients are local sums; adding them over
    participants gives the full-batch gradient.
    """
    if cache is None:
        raise ProtocolOrderError("batch-norm backward called without a forward cache")
    if len(upstream) != len(cache.xhat):
        raise ConfigurationError("participant count differs from the forward pass")
    m = cache.stats.count
    dxhat = [dy * _per_channel(cache.gamma, dy.ndim) for dy in upstream]
    g = reducer.reduce([d.sum(axis=_channel_axes(d)) for d in dxhat])
    gx = reducer.reduce([(h * d).sum(axis=_channel_axes(d)) for h, d in zip(cache.xhat, dxhat)])
    cache.stats.grad_sum, cache.stats.grad_xhat_sum = g, gx
    dx = []
    for h, d in zip(cache.xhat, dxhat):
        nd = d.ndim
        dx.append(_per_channel(cache.inv_std / m, nd)
                  * (m * d - _per_channel(g, nd) - h * _per_channel(gx, nd)))
    dgamma = [(dy * h).sum(axis=_channel_axes(dy)) for dy, h in zip(upstream, cache.xhat)]
    dbeta = [dy.sum(axis=_channel_axes(dy)) for dy in upstream]
    return dx, dgamma, dbeta


# -- layers -------------------------------------------------------------------------


class Layer:
    n_params = 0
    n_buffers = 0

    def output_shape(self, in_shape):
        return in_shape

    def init(self, rng, in_shape, dtype):
        return [], []

    def forward(self, x, p):
        return x, None

    def backward(self, dout, cache, p):
        return dout, []


class Dense(Layer):
    n_params = 2

    def __init__(self, units):
        self.units = units

    def output_shape(self, in_shape):
        if len(in_shape) != 1:
            raise ConfigurationError(f"Dense expects flat input, got shape {in_shape}")
        return (self.units,)

    def init(self, rng, in_shape, dtype):
        bound = np.sqrt(6.0 / in_shape[0])
        w = rng.uniform(-bound, bound, size=(in_shape[0], self.units)).astype(dtype)
        return [w, np.zeros(self.units, dtype=dtype)], []

    def forward(self, x, p):
        return x @ p[0] + p[1], x

    def backward(self, dout, x, p):
        return dout @ p[0].T, [x.T @ dout, dout.sum(axis=0)]


class ReLU(Layer):
    def forward(self, x, p):
        mask = x > 0
        return x * mask, mask

    def backward(self, dout, mask, p):
        return dout * mask, []


class Flatten(Layer):
    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, p):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, shape, p):
        return dout.reshape(shape), []


class Conv2D(Layer):
    """Valid-padding, stride-1 convolution over ``(n, C, H, W)`` inputs."""

    n_params = 2

    def __init__(self, filters, kernel=3):
        self.filters = filters
        self.kernel = kernel

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ConfigurationError(f"Conv2D expects (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        k = self.kernel
        if h < k or w < k:
            raise ConfigurationError(f"input {in_shape} smaller than kernel {k}")
        return (self.filters, h - k + 1, w - k + 1)

    def init(self, rng, in_shape, dtype):
        fan_in = in_shape[0] * self.kernel ** 2
        bound = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(self.filters, in_shape[0], self.kernel, self.kernel))
        return [w.astype(dtype), np.zeros(self.filters, dtype=dtype)], []

    def forward(self, x, p):
        win = sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))
        out = np.einsum("nchwij,fcij->nfhw", win, p[0], optimize=True) + p[1][None, :, None, None]
        return out, x

    def backward(self, dout, x, p):
        k = self.kernel
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        dw = np.einsum("nchwij,nfhw->fcij", win, dout, optimize=True)
        db = dout.sum(axis=(0, 2, 3))
        padded = np.pad(dout, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        dwin = sliding_window_view(padded, (k, k), axis=(2, 3))
        dx = np.einsum("nfhwij,fcij->nchw", dwin, p[0][:, :, ::-1, ::-1], optimize=True)
        return dx, [dw, db]


class BatchNorm(Layer):
    """Per-channel batch normalization (axis 1) with EMA running statistics."""

    n_params = 2
    n_buffers = 2

    def init(self, rng, in_shape, dtype):
        c = in_shape[0]
        return ([np.ones(c, dtype=dtype), np.zeros(c, dtype=dtype)],
                [np.zeros(c, dtype=dtype), np.ones(c, dtype=dtype)])

    def forward_inference(self, x, p, buffers):
        mean, var = buffers
        nd = x.ndim
        xhat = (x - _per_channel(mean, nd)) / np.sqrt(_per_channel(var, nd) + BN_EPS)
        return _per_channel(p[0], nd) * xhat + _per_channel(p[1], nd)


# -- network ------------------------------------------------------------------------


def _softmax_xent(logits, y):
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(y))
    loss = float(np.sum(lse - shifted[rows, y]))
    probs = np.exp(shifted - lse[:, None])
    probs[rows, y] -= 1.0
    return loss, probs


class Network:
    """Sequential stack of layers with a softmax cross-entropy (summed) loss."""

    def __init__(self, layers, input_shape, num_classes, dtype=np.float64):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.num_classes = int(num_classes)
        self.dtype = np.dtype(dtype)
        self._param_slices, self._buffer_slices = [], []
        shape, pi, bi = self.input_shape, 0, 0
        for layer in self.layers:
            if isinstance(layer, BatchNorm) and not shape:
                raise ConfigurationError("BatchNorm needs a channel axis")
            shape = layer.output_shape(shape)
            self._param_slices.append(slice(pi, pi + layer.n_params))
            self._buffer_slices.append(slice(bi, bi + layer.n_buffers))
            pi += layer.n_params
            bi += layer.n_buffers
        if shape != (self.num_classes,):
            raise ConfigurationError(f"network output shape {shape} != ({self.num_classes},)")

    @property
    def has_bn(self) -> bool:
        return any(isinstance(layer, BatchNorm) for layer in self.layers)

    def init_params(self, seed=0) -> ModelParams:
        rng = np.random.default_rng(seed)
        tensors, buffers, shape = [], [], self.input_shape
        for layer in self.layers:
            t, b = layer.init(rng, shape, self.dtype)
            tensors += t
            buffers += b
            shape = layer.output_shape(shape)
        return ModelParams(tensors, buffers)

    def zero_params(self) -> ModelParams:
        p = self.init_params(0)
        return ModelParams([np.zeros_like(t) for t in p.tensors], p.buffers)

    def _check_batch(self, params, X, y):
        X = np.asarray(X, dtype=self.dtype)
        if X.ndim == 1 and self.input_shape == (X.shape[0],):
            X = X[None]
        if X.shape[1:] != self.input_shape:
            raise ConfigurationError(f"input shape {X.shape[1:]} != model input {self.input_shape}")
        y = np.asarray(y, dtype=np.int64).reshape(-1)
        if len(y) != len(X):
            raise ConfigurationError("features and labels differ in length")
        if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
            raise ConfigurationError("label out of range")
        if len(params.tensors) != sum(layer.n_params for layer in self.layers):
            raise ConfigurationError("parameters do not belong to this architecture")
        return X, y

    def _forward_parts(self, params, xs, reducer, training=True):
        caches, bn_stats = [], []
        for idx, layer in enumerate(self.layers):
            p = params.tensors[self._param_slices[idx]]
            if isinstance(layer, BatchNorm):
                if training:
                    if reducer is None:
                        raise ConfigurationError("batch-norm model needs a stats reducer in training mode")
                    xs, stats, cache = bn_forward_distributed(xs, p[0], p[1], reducer)
                    bn_stats.append(stats)
                    caches.append(cache)
                else:
                    buf = params.buffers[self._buffer_slices[idx]]
                    xs = [layer.forward_inference(x, p, buf) for x in xs]
                    caches.append(None)
            else:
                outs, cs = [], []
                for x in xs:
                    o, c = layer.forward(x, p)
                    outs.append(o)
                    cs.append(c)
                xs = outs
                caches.append(cs)
            for x in xs:
                if not np.all(np.isfinite(x)):
                    raise NumericError(f"non-finite activation at layer {idx}", idx)
        return xs, caches, bn_stats

    def forward_loss(self, params, X, y, bn=None):
        """Summed cross-entropy over the batch; returns ``(loss_sum, cache)``."""
        X, y = self._check_batch(params, X, y)
        if len(y) == 0:
            raise ConfigurationError("forward_loss needs a non-empty batch")
        logits, caches, stats = self._forward_parts(params, [X], bn)
        loss, dlogits = _softmax_xent(logits[0], y)
        return loss, {"caches": caches, "dlogits": [dlogits], "bn_stats": stats}

    def loss_and_grads_parts(self, params, parts, bn=None):
        """Summed loss and per-participant gradient sums for a split batch.

        ``parts`` is a sequence of ``(X, y)``; batch-norm layers are computed
        over the union of all parts. Returns ``(loss_sum, grads, bn_stats)``.
        """
        checked = [self._check_batch(params, X, y) for X, y in parts]
        nonempty = [i for i, (_, y) in enumerate(checked) if len(y)]
        grads = [GradientSum.zeros_like(params) for _ in checked]
        if not nonempty:
            return 0.0, grads, []
        xs = [checked[i][0] for i in nonempty]
        logits, caches, bn_stats = self._forward_parts(params, xs, bn)
        loss, douts = 0.0, []
        for i, z in zip(nonempty, logits):
            part_loss, d = _softmax_xent(z, checked[i][1])
            loss += part_loss
            douts.append(d)
        layer_grads = [[None] * len(nonempty) for _ in self.layers]
        for idx in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[idx]
            p = params.tensors[self._param_slices[idx]]
            if isinstance(layer, BatchNorm):
                douts, dg, db = bn_backward_distributed(douts, caches[idx], bn)
                layer_grads[idx] = [[a, b] for a, b in zip(dg, db)]
            else:
                new = []
                for j, d in enumerate(douts):
                    dx, g = layer.backward(d, caches[idx][j], p)
                    new.append(dx)
                    layer_grads[idx][j] = g
                douts = new
        for j, i in enumerate(nonempty):
            flat = [g for idx in range(len(self.layers)) for g in layer_grads[idx][j]]
            grads[i] = GradientSum(flat, len(checked[i][1]))
        return loss, grads, bn_stats

    def grad_summed(self, params, X, y, bn=None) -> GradientSum:
        """Gradient of the summed loss over ``(X, y)``."""
        _, grads, _ = self.loss_and_grads_parts(params, [(X, y)], bn)
        return grads[0]

    def logits(self, params, X):
        X = np.asarray(X, dtype=self.dtype)
        if X.shape[1:] != self.input_shape:
            raise ConfigurationError(f"input shape {X.shape[1:]} != model input {self.input_shape}")
        out, _, _ = self._forward_parts(params, [X], None, training=False)
        return out[0]

    def predict(self, params, X):
        return np.argmax(self.logits(params, X), axis=1)

    def update_running_stats(self, params, bn_stats, momentum=BN_MOMENTUM) -> ModelParams:
        """EMA of global batch statistics into the running-stat buffers."""
        out = params.copy()
        k = 0
        for idx, layer in enumerate(self.layers):
            if isinstance(layer, BatchNorm):
                s = bn_stats[k]
                k += 1
                sl = self._buffer_slices[idx]
                mean_buf, var_buf = out.buffers[sl]
                mean_buf *= momentum
                mean_buf += (1 - momentum) * s.mean
                var_buf *= momentum
                var_buf += (1 - momentum) * s.var
        return out


def logistic(input_shape, num_classes, dtype=np.float64):
    return Network([Flatten(), Dense(num_classes)], input_shape, num_classes, dtype)


def mlp(input_shape, num_classes, hidden=32, bn=False, dtype=np.float64):
    layers = [Flatten(), Dense(hidden)]
    if bn:
        layers.append(BatchNorm())
    layers += [ReLU(), Dense(num_classes)]
    return Network(layers, input_shape, num_classes, dtype)


def cnn(input_shape, num_classes, channels=(8, 16), hidden=32, kernel=3, bn=False, dtype=np.float64):
    """Two convolutions and two dense layers, optionally with batch-norm."""
    layers = []
    for c in channels:
        layers.append(Conv2D(c, kernel))
        if bn:
            layers.append(BatchNorm())
        layers.append(ReLU())
    layers += [Flatten(), Dense(hidden), ReLU(), Dense(num_classes)]
    return Network(layers, input_shape, num_classes, dtype)


ARCHITECTURES = {"logistic": logistic, "mlp": mlp, "cnn": cnn}


def build_model(name, input_shape, num_classes, **kwargs) -> Network:
    try:
        factory = ARCHITECTURES[name]
    except KeyError:
        raise ConfigurationError(f"unknown architecture {name!r}") from None
    return factory(input_shape, num_classes, **kwargs)
