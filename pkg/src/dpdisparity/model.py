"""Small classifiers: MLPs with optional conv / max-pool layers.

Parameters live in one flat float64 vector (a "ParamVector").  Each layer
owns a contiguous slice of it, weights first and then biases, in layer
order.  Activations use channels-first layout ``(batch, channels, h, w)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numeric_core import NumericError, RandomSource

__all__ = [
    "Linear",
    "ReLU",
    "Conv2D",
    "MaxPool2D",
    "Flatten",
    "ModelSpec",
    "SpecError",
    "Batch",
    "mlp_spec",
    "desk_spec",
    "reference_convnet_spec",
    "init_params",
    "unflatten",
    "flatten",
    "forward",
    "loss_and_grad",
    "per_example_grads",
    "predict",
    "clipped_grad_sum",
]


class SpecError(ValueError):
    """A model spec whose layer shapes do not chain."""


@dataclass(frozen=True)
class Linear:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class MaxPool2D:
    k: int


@dataclass(frozen=True)
class Flatten:
    pass


Layer = Union[Linear, ReLU, Conv2D, MaxPool2D, Flatten]


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        shapes = self.shapes()
        if shapes[-1] != (self.num_classes,):
            raise SpecError(f"final output shape {shapes[-1]} != ({self.num_classes},)")

    def shapes(self) -> list[tuple]:
        """Per-example activation shapes, input first."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            shape = _out_shape(layer, shape, i)
            out.append(shape)
        return out

    def layout(self) -> dict[int, tuple[int, int]]:
        """Map layer index to its ``(offset, length)`` slice of the ParamVector."""
        offset = 0
        out = {}
        for i, layer in enumerate(self.layers):
            n = _param_count(layer)
            if n:
                out[i] = (offset, n)
                offset += n
        return out

    @property
    def num_params(self) -> int:
        return sum(n for _, n in self.layout().values())


def _out_shape(layer, shape: tuple, i: int) -> tuple:
    if isinstance(layer, Linear):
        if shape != (layer.in_features,):
            raise SpecError(f"layer {i}: Linear expects ({layer.in_features},), got {shape}")
        return (layer.out_features,)
    if isinstance(layer, ReLU):
        return shape
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[0] != layer.in_channels:
            raise SpecError(f"layer {i}: Conv2D expects ({layer.in_channels}, h, w), got {shape}")
        oh = (shape[1] - layer.kernel) // layer.stride + 1
        ow = (shape[2] - layer.kernel) // layer.stride + 1
        if oh < 1 or ow < 1:
            raise SpecError(f"layer {i}: kernel {layer.kernel} larger than input {shape}")
        return (layer.out_channels, oh, ow)
    if isinstance(layer, MaxPool2D):
        if len(shape) != 3 or shape[1] < layer.k or shape[2] < layer.k:
            raise SpecError(f"layer {i}: MaxPool2D({layer.k}) cannot pool {shape}")
        return (shape[0], shape[1] // layer.k, shape[2] // layer.k)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    raise SpecError(f"layer {i}: unknown layer type {type(layer).__name__}")


def _param_count(layer) -> int:
    if isinstance(layer, Linear):
        return layer.in_features * layer.out_features + layer.out_features
    if isinstance(layer, Conv2D):
        return layer.out_channels * (layer.in_channels * layer.kernel**2 + 1)
    return 0


def mlp_spec(input_dim: int, hidden: Sequence[int], num_classes: int) -> ModelSpec:
    layers = []
    prev = input_dim
    for h in hidden:
        layers += [Linear(prev, h), ReLU()]
        prev = h
    layers.append(Linear(prev, num_classes))
    return ModelSpec(tuple(layers), (input_dim,), num_classes)


def desk_spec() -> ModelSpec:
    """784 -> 128 -> 10 MLP used for fast runs."""
    return mlp_spec(784, [128], 10)


def reference_convnet_spec() -> ModelSpec:
    """Two conv + two linear layers on 1x28x28 input, 431,080 parameters."""
    return ModelSpec(
        (
            Conv2D(1, 20, 5, 1), ReLU(), MaxPool2D(2),
            Conv2D(20, 50, 5, 1), ReLU(), MaxPool2D(2),
            Flatten(),
            Linear(800, 500), ReLU(),
            Linear(500, 10),
        ),
        (1, 28, 28),
        10,
    )


@dataclass
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 1 or len(self.labels) < 1:
            raise ValueError("a batch needs at least one example")
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels disagree on batch size")


def _weight_shapes(layer) -> tuple[tuple, tuple]:
    if isinstance(layer, Linear):
        return (layer.out_features, layer.in_features), (layer.out_features,)
    return (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel), (layer.out_channels,)


def unflatten(spec: ModelSpec, params: np.ndarray) -> dict[int, tuple[np.ndarray, np.ndarray]]:
    """Views ``(weight, bias)`` into ``params`` for every parametrised layer."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.num_params,):
        raise SpecError(f"expected {spec.num_params} params, got shape {params.shape}")
    out = {}
    for i, (off, _) in spec.layout().items():
        wshape, bshape = _weight_shapes(spec.layers[i])
        nw = int(np.prod(wshape))
        out[i] = (
            params[off:off + nw].reshape(wshape),
            params[off + nw:off + nw + bshape[0]],
        )
    return out


def flatten(spec: ModelSpec, tensors: dict[int, tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    out = np.empty(spec.num_params)
    for i, (off, n) in spec.layout().items():
        w, b = tensors[i]
        out[off:off + n] = np.concatenate([np.ravel(w), np.ravel(b)])
    return out


def init_params(spec: ModelSpec, rng: RandomSource) -> np.ndarray:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    params = np.zeros(spec.num_params)
    for i, (off, _) in spec.layout().items():
        layer = spec.layers[i]
        wshape, _ = _weight_shapes(layer)
        fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / math.sqrt(fan_in)
        nw = int(np.prod(wshape))
        params[off:off + nw] = rng.uniform(nw, -bound, bound)
    return params


# forward / backward

def _im2col(x: np.ndarray, k: int, s: int) -> np.ndarray:
    # (B, C, H, W) -> (B, oh*ow, C*k*k)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    b, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, oh * ow, c * k * k)


def _forward(spec: ModelSpec, params: np.ndarray, x: np.ndarray):
    tensors = unflatten(spec, params)
    caches = []
    h = x
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Linear):
            w, b = tensors[i]
            caches.append(h)
            h = h @ w.T + b
        elif isinstance(layer, ReLU):
            mask = h > 0
            caches.append(mask)
            h = h * mask
        elif isinstance(layer, Conv2D):
            w, b = tensors[i]
            cols = _im2col(h, layer.kernel, layer.stride)
            caches.append((h.shape, cols))
            out = cols @ w.reshape(layer.out_channels, -1).T + b
            oh = (h.shape[2] - layer.kernel) // layer.stride + 1
            ow = (h.shape[3] - layer.kernel) // layer.stride + 1
            h = out.reshape(h.shape[0], oh, ow, layer.out_channels).transpose(0, 3, 1, 2)
        elif isinstance(layer, MaxPool2D):
            k = layer.k
            bsz, c, hh, ww = h.shape
            oh, ow = hh // k, ww // k
            blocks = (
                h[:, :, :oh * k, :ow * k]
                .reshape(bsz, c, oh, k, ow, k)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(bsz, c, oh, ow, k * k)
            )
            arg = blocks.argmax(axis=-1)  # first maximum wins ties
            caches.append((h.shape, arg))
            h = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
        elif isinstance(layer, Flatten):
            caches.append(h.shape)
            h = h.reshape(h.shape[0], -1)
    return h, caches, tensors


def _backward(spec: ModelSpec, tensors, caches, dout: np.ndarray, per_example: bool) -> np.ndarray:
    bsz = dout.shape[0]
    grad = np.zeros((bsz, spec.num_params) if per_example else spec.num_params)
    layout = spec.layout()
    d = dout
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if isinstance(layer, Linear):
            w, _ = tensors[i]
            off, n = layout[i]
            nw = w.size
            if per_example:
                grad[:, off:off + nw] = np.einsum("bo,bi->boi", d, cache).reshape(bsz, nw)
                grad[:, off + nw:off + n] = d
            else:
                grad[off:off + nw] = (d.T @ cache).ravel()
                grad[off + nw:off + n] = d.sum(axis=0)
            if i > 0:
                d = d @ w
        elif isinstance(layer, ReLU):
            d = d * cache
        elif isinstance(layer, Conv2D):
            w, _ = tensors[i]
            off, n = layout[i]
            nw = w.size
            in_shape, cols = cache
            k, s = layer.kernel, layer.stride
            _, _, oh, ow = d.shape
            dr = d.transpose(0, 2, 3, 1).reshape(bsz, oh * ow, layer.out_channels)
            if per_example:
                grad[:, off:off + nw] = np.einsum("bpo,bpk->bok", dr, cols).reshape(bsz, nw)
                grad[:, off + nw:off + n] = dr.sum(axis=1)
            else:
                grad[off:off + nw] = np.einsum("bpo,bpk->ok", dr, cols).ravel()
                grad[off + nw:off + n] = dr.sum(axis=(0, 1))
            if i > 0:
                dcols = (dr @ w.reshape(layer.out_channels, -1)).reshape(
                    bsz, oh, ow, layer.in_channels, k, k
                )
                dx = np.zeros(in_shape)
                for a in range(k):
                    for c in range(k):
                        dx[:, :, a:a + s * (oh - 1) + 1:s, c:c + s * (ow - 1) + 1:s] += (
                            dcols[:, :, :, :, a, c].transpose(0, 3, 1, 2)
                        )
                d = dx
        elif isinstance(layer, MaxPool2D):
            in_shape, arg = cache
            k = layer.k
            bsz_, c, oh, ow = d.shape
            blocks = np.zeros((bsz_, c, oh, ow, k * k))
            np.put_along_axis(blocks, arg[..., None], d[..., None], axis=-1)
            dx = np.zeros(in_shape)
            dx[:, :, :oh * k, :ow * k] = (
                blocks.reshape(bsz_, c, oh, ow, k, k)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(bsz_, c, oh * k, ow * k)
            )
            d = dx
        elif isinstance(layer, Flatten):
            d = d.reshape(cache)
    return grad


def _check_params(params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if not np.all(np.isfinite(params)):
        raise NumericError("parameters contain NaN or Inf")
    return params


def _inputs_of(spec: ModelSpec, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.shape[1:] != spec.input_shape:
        x = x.reshape((x.shape[0],) + spec.input_shape)
    return x


def forward(spec: ModelSpec, params: np.ndarray, batch) -> np.ndarray:
    """Logits of shape ``(b, num_classes)``.

    ``batch`` may be a :class:`Batch` or a bare input array.
    """
    inputs = batch.inputs if isinstance(batch, Batch) else batch
    logits, _, _ = _forward(spec, _check_params(params), _inputs_of(spec, inputs))
    return logits


def _softmax_xent(logits: np.ndarray, labels: np.ndarray):
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(len(labels))
    losses = logsum - shifted[rows, labels]
    probs = np.exp(shifted - logsum[:, None])
    probs[rows, labels] -= 1.0
    return losses, probs


def _as_batch(batch) -> Batch:
    if isinstance(batch, Batch):
        return batch
    inputs, labels = batch
    return Batch(inputs, labels)


def loss_and_grad(spec: ModelSpec, params: np.ndarray, batch) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy over the batch and its gradient."""
    batch = _as_batch(batch)
    params = _check_params(params)
    logits, caches, tensors = _forward(spec, params, _inputs_of(spec, batch.inputs))
    losses, dlogits = _softmax_xent(logits, batch.labels)
    b = len(batch.labels)
    grad = _backward(spec, tensors, caches, dlogits / b, per_example=False)
    return float(losses.mean()), grad


def per_example_grads(spec: ModelSpec, params: np.ndarray, batch, *, return_losses: bool = False):
    """Gradient of each example's own loss, stacked as a ``(b, P)`` array.

    Row ``i`` is the gradient of L(theta(x_i), y_i); no batch averaging.
    """
    batch = _as_batch(batch)
    params = _check_params(params)
    logits, caches, tensors = _forward(spec, params, _inputs_of(spec, batch.inputs))
    losses, dlogits = _softmax_xent(logits, batch.labels)
    grads = _backward(spec, tensors, caches, dlogits, per_example=True)
    if return_losses:
        return grads, losses
    return grads


def predict(spec: ModelSpec, params: np.ndarray, inputs, *, chunk: int = 2048) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    x = _inputs_of(spec, inputs)
    out = [forward(spec, params, x[i:i + chunk]).argmax(axis=1) for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def _linear_only(spec: ModelSpec) -> bool:
    return all(isinstance(l, (Linear, ReLU, Flatten)) for l in spec.layers)


def _linear_grad_sq_norms(spec: ModelSpec, tensors, caches, dout: np.ndarray) -> np.ndarray:
    # ||dW_i||^2 = ||delta_i||^2 ||h_i||^2 for an outer product, plus the bias term
    sq = np.zeros(dout.shape[0])
    d = dout
    for i in range(len(spec.layers) - 1, -1, -1):
        layer = spec.layers[i]
        if isinstance(layer, Linear):
            h = caches[i]
            dd = np.einsum("bo,bo->b", d, d)
            sq += dd * (np.einsum("bi,bi->b", h, h) + 1.0)
            if i > 0:
                d = d @ tensors[i][0]
        elif isinstance(layer, ReLU):
            d = d * caches[i]
        elif isinstance(layer, Flatten):
            d = d.reshape(caches[i])
    return sq


def clipped_grad_sum(spec: ModelSpec, params: np.ndarray, batch, clip: float | None, *, chunk: int = 128):
    """Sum of per-example gradients, each scaled by ``min(1, clip / norm)``.

    Returns ``(grad_sum, norms, losses)`` where ``norms`` are the pre-clip
    per-example gradient norms.  ``clip=None`` disables clipping.  Networks
    made only of Linear/ReLU/Flatten never materialise the ``(b, P)``
    gradient matrix; others are processed ``chunk`` examples at a time.
    """
    batch = _as_batch(batch)
    params = _check_params(params)
    x = _inputs_of(spec, batch.inputs)
    if _linear_only(spec):
        logits, caches, tensors = _forward(spec, params, x)
        losses, dlogits = _softmax_xent(logits, batch.labels)
        norms = np.sqrt(_linear_grad_sq_norms(spec, tensors, caches, dlogits))
        factor = _clip_factors(norms, clip)
        total = _backward(spec, tensors, caches, dlogits * factor[:, None], per_example=False)
        return total, norms, losses
    total = np.zeros(spec.num_params)
    norms, losses = [], []
    for start in range(0, len(x), chunk):
        g, l = per_example_grads(
            spec, params, Batch(x[start:start + chunk], batch.labels[start:start + chunk]),
            return_losses=True,
        )
        n = np.sqrt(np.einsum("bp,bp->b", g, g))
        total += (g * _clip_factors(n, clip)[:, None]).sum(axis=0)
        norms.append(n)
        losses.append(l)
    return total, np.concatenate(norms), np.concatenate(losses)


def _clip_factors(norms: np.ndarray, clip: float | None) -> np.ndarray:
    if clip is None:
        return np.ones_like(norms)
    with np.errstate(divide="ignore"):
        return np.minimum(1.0, clip / norms)
