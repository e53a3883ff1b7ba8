"""
Minimal feed-forward network engine for pathprof.

Supports dense, convolutional, pooling, ReLU, flatten and residual-add
layers. Provides activation tracing for path extraction, exact input
gradients for the attacks, seeded mini-batch SGD training and inference
with selected weights zeroed.

Weights and activations are float32; every affine accumulation runs in
float64 and is rounded back to float32 afterwards.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import (
    TYPE_CHECKING, Any, ClassVar, Dict, List, Mapping, Optional, Sequence,
    Tuple, Union
)

import numpy as np

from pathprof.errors import (
    DomainError, FormatError, InputShapeError, NumericOverflowError
)

if TYPE_CHECKING:
    from pathprof.extractor import EffectivePath
    from pathprof.utils.idx import LabeledDataset

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


def _pair(value: Union[int, Sequence[int]]) -> Tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    first, second = value
    return int(first), int(second)


def _windows(x: np.ndarray, kernel_hw: Tuple[int, int],
             stride: int) -> np.ndarray:
    """Strided view of shape (N, C, OH, OW, kh, kw) over a batch."""
    view = np.lib.stride_tricks.sliding_window_view(
        x, kernel_hw, axis=(2, 3)
    )
    return view[:, :, ::stride, ::stride]


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Layer:
    """Base class of every layer spec."""

    kind: ClassVar[str] = ''
    has_weights: ClassVar[bool] = False
    has_synapses: ClassVar[bool] = False

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def config(self) -> Dict[str, Any]:
        """Topology description, without tensors."""
        return {'type': self.kind}

    def tensors(self) -> Dict[str, np.ndarray]:
        return {}

    def tensor_shapes(self) -> Dict[str, Shape]:
        """Shape each tensor must have for this topology."""
        return {}

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(
        self, dout: np.ndarray, cache: Any
    ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Dense(Layer):
    """Fully connected layer; ``weights`` has shape (out_dim, in_dim)."""

    in_dim: int
    out_dim: int
    weights: np.ndarray
    bias: np.ndarray

    kind: ClassVar[str] = 'dense'
    has_weights: ClassVar[bool] = True
    has_synapses: ClassVar[bool] = True

    def output_shape(self, input_shape: Shape) -> Shape:
        if input_shape != (self.in_dim,):
            raise DomainError(
                f'dense layer expects input ({self.in_dim},), '
                f'got {input_shape}'
            )
        return (self.out_dim,)

    def config(self) -> Dict[str, Any]:
        return {'type': self.kind, 'in_dim': self.in_dim,
                'out_dim': self.out_dim}

    def tensor_shapes(self) -> Dict[str, Shape]:
        return {'weights': (self.out_dim, self.in_dim),
                'bias': (self.out_dim,)}

    def tensors(self) -> Dict[str, np.ndarray]:
        return {'weights': self.weights, 'bias': self.bias}

    def forward(self, x):
        out = x.astype(np.float64) @ self.weights.T.astype(np.float64)
        out += self.bias.astype(np.float64)
        return out.astype(np.float32), x

    def backward(self, dout, cache):
        x = cache.astype(np.float64)
        dout = dout.astype(np.float64)
        grads = {'weights': dout.T @ x, 'bias': dout.sum(axis=0)}
        dx = dout @ self.weights.astype(np.float64)
        return dx, grads


@dataclass(frozen=True, eq=False)
class Conv2D(Layer):
    """2-D convolution; ``weights`` has shape (out_c, in_c, kh, kw)."""

    in_channels: int
    out_channels: int
    kernel_hw: Tuple[int, int]
    stride: int
    padding: int
    weights: np.ndarray
    bias: np.ndarray

    kind: ClassVar[str] = 'conv2d'
    has_weights: ClassVar[bool] = True
    has_synapses: ClassVar[bool] = True

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise DomainError(
                f'conv2d layer expects ({self.in_channels}, H, W) input, '
                f'got {input_shape}'
            )
        _, height, width = input_shape
        kh, kw = self.kernel_hw
        out_h = (height + 2 * self.padding - kh) // self.stride + 1
        out_w = (width + 2 * self.padding - kw) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise DomainError(f'conv2d kernel larger than input {input_shape}')
        return (self.out_channels, out_h, out_w)

    def config(self) -> Dict[str, Any]:
        return {'type': self.kind, 'in_channels': self.in_channels,
                'out_channels': self.out_channels,
                'kernel_hw': list(self.kernel_hw), 'stride': self.stride,
                'padding': self.padding}

    def tensor_shapes(self) -> Dict[str, Shape]:
        kh, kw = self.kernel_hw
        return {'weights': (self.out_channels, self.in_channels, kh, kw),
                'bias': (self.out_channels,)}

    def tensors(self) -> Dict[str, np.ndarray]:
        return {'weights': self.weights, 'bias': self.bias}

    def forward(self, x):
        p = self.padding
        padded = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = _windows(padded, self.kernel_hw, self.stride)
        n, _, out_h, out_w = win.shape[:4]
        # (N*OH*OW, C*kh*kw) im2col matrix
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * out_h * out_w, -1)
        cols = cols.astype(np.float64)
        kernel = self.weights.reshape(self.out_channels, -1).astype(np.float64)
        out = cols @ kernel.T + self.bias.astype(np.float64)
        out = out.reshape(n, out_h, out_w, self.out_channels)
        out = out.transpose(0, 3, 1, 2)
        return np.ascontiguousarray(out, dtype=np.float32), (cols, x.shape)

    def backward(self, dout, cache):
        cols, in_shape = cache
        n, _, out_h, out_w = dout.shape
        kh, kw = self.kernel_hw
        s, p = self.stride, self.padding
        dflat = dout.astype(np.float64).transpose(0, 2, 3, 1).reshape(
            -1, self.out_channels
        )
        grads = {
            'weights': (dflat.T @ cols).reshape(self.weights.shape),
            'bias': dflat.sum(axis=0),
        }
        w64 = self.weights.astype(np.float64)
        d64 = dout.astype(np.float64)
        dpad = np.zeros(
            (n, in_shape[1], in_shape[2] + 2 * p, in_shape[3] + 2 * p)
        )
        for ki in range(kh):
            for kj in range(kw):
                dpad[:, :, ki:ki + s * out_h:s, kj:kj + s * out_w:s] += (
                    np.einsum('noij,oc->ncij', d64, w64[:, :, ki, kj])
                )
        dx = dpad[:, :, p:p + in_shape[2], p:p + in_shape[3]]
        return dx, grads


@dataclass(frozen=True, eq=False)
class _Pool2D(Layer):
    kernel_hw: Tuple[int, int]
    stride: int

    has_synapses: ClassVar[bool] = True

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise DomainError(f'{self.kind} expects (C, H, W) input')
        channels, height, width = input_shape
        kh, kw = self.kernel_hw
        out_h = (height - kh) // self.stride + 1
        out_w = (width - kw) // self.stride + 1
        if out_h < 1 or out_w < 1:
            raise DomainError(f'{self.kind} window larger than input')
        return (channels, out_h, out_w)

    def config(self) -> Dict[str, Any]:
        return {'type': self.kind, 'kernel_hw': list(self.kernel_hw),
                'stride': self.stride}

    def _scatter(self, values: np.ndarray, in_shape: Shape) -> np.ndarray:
        """Sum per-window-offset contributions back onto the input grid."""
        n, c, out_h, out_w, kh, kw = values.shape
        s = self.stride
        dx = np.zeros(in_shape)
        for ki in range(kh):
            for kj in range(kw):
                dx[:, :, ki:ki + s * out_h:s, kj:kj + s * out_w:s] += (
                    values[..., ki, kj]
                )
        return dx


@dataclass(frozen=True, eq=False)
class MaxPool2D(_Pool2D):
    """Max pooling; ties resolve to the lowest flat input index."""

    kind: ClassVar[str] = 'maxpool2d'

    def forward(self, x):
        win = _windows(x, self.kernel_hw, self.stride)
        flat = win.reshape(win.shape[:4] + (-1,))
        # argmax returns the first maximum, i.e. the lowest window offset
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return np.ascontiguousarray(out), (arg, x.shape)

    def backward(self, dout, cache):
        arg, in_shape = cache
        kh, kw = self.kernel_hw
        onehot = np.zeros(arg.shape + (kh * kw,))
        np.put_along_axis(onehot, arg[..., None], 1.0, axis=-1)
        routed = onehot * dout.astype(np.float64)[..., None]
        return self._scatter(routed.reshape(arg.shape + (kh, kw)),
                             in_shape), {}


@dataclass(frozen=True, eq=False)
class AvgPool2D(_Pool2D):
    """Average pooling."""

    kind: ClassVar[str] = 'avgpool2d'

    def forward(self, x):
        win = _windows(x, self.kernel_hw, self.stride)
        out = win.astype(np.float64).mean(axis=(-2, -1))
        return out.astype(np.float32), x.shape

    def backward(self, dout, cache):
        kh, kw = self.kernel_hw
        share = dout.astype(np.float64) / (kh * kw)
        spread = np.broadcast_to(share[..., None, None], share.shape + (kh, kw))
        return self._scatter(spread, cache), {}


@dataclass(frozen=True, eq=False)
class ReLU(Layer):
    kind: ClassVar[str] = 'relu'

    def forward(self, x):
        return np.maximum(x, 0).astype(np.float32), x

    def backward(self, dout, cache):
        return dout * (cache > 0), {}


@dataclass(frozen=True, eq=False)
class Flatten(Layer):
    kind: ClassVar[str] = 'flatten'

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dout, cache):
        return dout.reshape(cache), {}


@dataclass(frozen=True, eq=False)
class ResidualAdd(Layer):
    """Adds the output of an earlier layer to this layer's input."""

    source_layer_index: int

    kind: ClassVar[str] = 'residual_add'

    def config(self) -> Dict[str, Any]:
        return {'type': self.kind,
                'source_layer_index': self.source_layer_index}


LAYER_TYPES: Dict[str, type] = {
    cls.kind: cls
    for cls in (Dense, Conv2D, MaxPool2D, AvgPool2D, ReLU, Flatten,
                ResidualAdd)
}


def layer_from_config(
    config: Mapping[str, Any],
    tensors: Optional[Mapping[str, np.ndarray]] = None
) -> Layer:
    """
    Rebuild a layer from its ``config()`` mapping plus tensors.

    Parameters
    ----------
    config : Mapping[str, Any]
        Topology description as produced by ``Layer.config``
    tensors : Mapping[str, np.ndarray], optional
        ``weights`` and ``bias`` for weight-bearing layers

    Returns
    -------
    Layer
        The rebuilt layer
    """
    kind = config.get('type')
    if kind not in LAYER_TYPES:
        raise DomainError(f'unknown layer type: {kind!r}')
    cls = LAYER_TYPES[kind]
    kwargs = {k: v for k, v in config.items() if k != 'type'}
    if 'kernel_hw' in kwargs:
        kwargs['kernel_hw'] = _pair(kwargs['kernel_hw'])
    if cls.has_weights:
        tensors = tensors or {}
        kwargs['weights'] = np.asarray(tensors['weights'], dtype=np.float32)
        kwargs['bias'] = np.asarray(tensors['bias'], dtype=np.float32)
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Network:
    """
    Ordered stack of layers with a fixed input shape.

    Attributes
    ----------
    layers : tuple of Layer
        Layers applied in order
    input_shape : tuple of int
        Shape of a single input, without the batch axis
    history : tuple of float
        Mean training loss per epoch, filled by ``train_sgd``
    """

    layers: Tuple[Layer, ...]
    input_shape: Shape
    history: Tuple[float, ...] = ()
    shapes: Tuple[Shape, ...] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'layers', tuple(self.layers))
        object.__setattr__(
            self, 'input_shape', tuple(int(d) for d in self.input_shape)
        )
        object.__setattr__(self, 'history', tuple(self.history))
        object.__setattr__(self, 'shapes', self._infer_shapes())

    def _infer_shapes(self) -> Tuple[Shape, ...]:
        if not self.layers:
            raise DomainError('a network needs at least one layer')
        shapes: List[Shape] = []
        current = self.input_shape
        for index, layer in enumerate(self.layers):
            if isinstance(layer, ResidualAdd):
                src = layer.source_layer_index
                if not 0 <= src < index:
                    raise DomainError(
                        f'layer {index}: residual source {src} must precede it'
                    )
                if shapes[src] != current:
                    raise DomainError(
                        f'layer {index}: residual shapes {shapes[src]} and '
                        f'{current} differ'
                    )
            else:
                current = layer.output_shape(current)
            if layer.has_weights:
                expected = layer.tensor_shapes()
                for name, tensor in layer.tensors().items():
                    if tensor.shape != expected[name]:
                        raise FormatError(
                            f'layer {index}: {name} has shape '
                            f'{tensor.shape}, expected {expected[name]}'
                        )
                    if not np.all(np.isfinite(tensor)):
                        raise DomainError(
                            f'layer {index}: {name} contains NaN or Inf'
                        )
            shapes.append(tuple(current))
        if len(shapes[-1]) != 1:
            raise DomainError('the last layer must produce a logit vector')
        return tuple(shapes)

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def input_shape_of(self, index: int) -> Shape:
        return self.input_shape if index == 0 else self.shapes[index - 1]

    def path_layers(self) -> List[int]:
        """Indices of layers that carry synapses, in forward order."""
        return [i for i, layer in enumerate(self.layers) if layer.has_synapses]

    def capacities(self, index: int) -> Tuple[int, int, int]:
        """(neurons, synapses, weights) capacity of a path layer."""
        layer = self.layers[index]
        neurons = int(np.prod(self.shapes[index]))
        fan_in = receptive_field(self, index)[0].shape[1]
        weights = int(layer.weights.size) if layer.has_weights else 0
        return neurons, neurons * fan_in, weights

    def topology(self) -> Dict[str, Any]:
        return {'input_shape': list(self.input_shape),
                'layers': [layer.config() for layer in self.layers]}

    def fingerprint(self) -> bytes:
        """sha256 of the canonical topology description (32 bytes)."""
        canonical = json.dumps(self.topology(), sort_keys=True,
                               separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).digest()

    @property
    def parameter_count(self) -> int:
        return sum(
            t.size for layer in self.layers for t in layer.tensors().values()
        )

    def with_weights(self, weights: Mapping[int, np.ndarray]) -> 'Network':
        """Copy of the network with some layers' weight tensors replaced."""
        layers = list(self.layers)
        for index, tensor in weights.items():
            layers[index] = replace(
                layers[index], weights=np.asarray(tensor, dtype=np.float32)
            )
        return Network(layers, self.input_shape, self.history)


# He-style uniform init bound: sqrt(6 / fan_in)
def _he_uniform(rng: np.random.Generator, shape: Shape,
                fan_in: int) -> np.ndarray:
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def build_network(
    layer_specs: Sequence[Mapping[str, Any]],
    input_shape: Sequence[int],
    seed: int = 0
) -> Network:
    """
    Build a freshly initialised network from short layer specs.

    Dense specs need ``units``; conv specs need ``out_channels`` and
    ``kernel`` (optional ``stride``, ``padding``); pool specs need
    ``kernel`` (optional ``stride``, defaulting to the kernel size);
    residual specs need ``source``. Input dimensions are inferred.

    Parameters
    ----------
    layer_specs : Sequence[Mapping[str, Any]]
        One mapping per layer with a ``type`` key
    input_shape : Sequence[int]
        Single-input shape
    seed : int
        Seed of the weight initialiser

    Returns
    -------
    Network
        Network with He-uniform weights and zero biases
    """
    rng = np.random.default_rng(seed)
    layers: List[Layer] = []
    current: Shape = tuple(int(d) for d in input_shape)
    for spec in layer_specs:
        kind = spec['type']
        if kind == 'dense':
            in_dim = int(np.prod(current))
            units = int(spec['units'])
            layer: Layer = Dense(
                in_dim, units,
                _he_uniform(rng, (units, in_dim), in_dim),
                np.zeros(units, dtype=np.float32)
            )
        elif kind == 'conv2d':
            kh, kw = _pair(spec['kernel'])
            in_c = current[0]
            out_c = int(spec['out_channels'])
            fan_in = in_c * kh * kw
            layer = Conv2D(
                in_c, out_c, (kh, kw), int(spec.get('stride', 1)),
                int(spec.get('padding', 0)),
                _he_uniform(rng, (out_c, in_c, kh, kw), fan_in),
                np.zeros(out_c, dtype=np.float32)
            )
        elif kind in ('maxpool2d', 'avgpool2d'):
            kernel = _pair(spec['kernel'])
            stride = int(spec.get('stride', kernel[0]))
            layer = LAYER_TYPES[kind](kernel, stride)
        elif kind == 'residual_add':
            layer = ResidualAdd(int(spec['source']))
        elif kind in ('relu', 'flatten'):
            layer = LAYER_TYPES[kind]()
        else:
            raise DomainError(f'unknown layer type: {kind!r}')
        if not isinstance(layer, ResidualAdd):
            current = layer.output_shape(current)
        layers.append(layer)
    return Network(layers, tuple(int(d) for d in input_shape))


ARCHITECTURES: Dict[str, Dict[str, Any]] = {
    'lenet': {
        'input_shape': [1, 28, 28],
        'layers': [
            {'type': 'conv2d', 'out_channels': 6, 'kernel': 5},
            {'type': 'relu'},
            {'type': 'maxpool2d', 'kernel': 2},
            {'type': 'conv2d', 'out_channels': 16, 'kernel': 5},
            {'type': 'relu'},
            {'type': 'maxpool2d', 'kernel': 2},
            {'type': 'flatten'},
            {'type': 'dense', 'units': 120},
            {'type': 'relu'},
            {'type': 'dense', 'units': 84},
            {'type': 'relu'},
            {'type': 'dense', 'units': 10},
        ],
    },
    'mlp': {
        'input_shape': [784],
        'layers': [
            {'type': 'dense', 'units': 128},
            {'type': 'relu'},
            {'type': 'dense', 'units': 64},
            {'type': 'relu'},
            {'type': 'dense', 'units': 10},
        ],
    },
}


@lru_cache(maxsize=64)
def _field_indices(kind: str, in_shape: Shape, out_shape: Shape,
                   kernel_hw: Tuple[int, int], stride: int,
                   padding: int) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if kind == 'dense':
        n_in, n_out = in_shape[0], out_shape[0]
        inputs = np.broadcast_to(np.arange(n_in), (n_out, n_in))
        return inputs, np.arange(n_out * n_in).reshape(n_out, n_in)
    channels, height, width = in_shape
    out_c, out_h, out_w = out_shape
    kh, kw = kernel_hw
    oi = np.arange(out_h)[:, None, None, None]
    oj = np.arange(out_w)[None, :, None, None]
    ki = np.arange(kh)[None, None, :, None]
    kj = np.arange(kw)[None, None, None, :]
    rows = oi * stride + ki - padding
    cols = oj * stride + kj - padding
    valid = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    plane = np.where(valid, rows * width + cols, -1)  # (OH, OW, kh, kw)
    if kind == 'conv2d':
        # output (oc, oi, oj) sees every input channel c
        offsets = np.arange(channels)[:, None, None] * height * width
        per_pos = np.where(
            plane[:, :, None, :, :] >= 0,
            plane[:, :, None, :, :] + offsets[None, None],
            -1
        ).reshape(out_h * out_w, channels * kh * kw)
        inputs = np.tile(per_pos, (out_c, 1))
        fan_in = channels * kh * kw
        weights = np.repeat(
            np.arange(out_c)[:, None] * fan_in, out_h * out_w, axis=0
        ) + np.arange(fan_in)[None, :]
        return inputs, weights
    # pooling: output (c, oi, oj) sees only channel c
    per_pos = plane.reshape(out_h * out_w, kh * kw)
    offsets = np.arange(channels)[:, None, None] * height * width
    inputs = (per_pos[None] + offsets).reshape(channels * out_h * out_w, -1)
    return inputs, None


def receptive_field(
    net: Network, index: int
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Flat input index and weight coordinate of every synapse of a layer.

    Parameters
    ----------
    net : Network
        Network owning the layer
    index : int
        Index of a path layer (dense, conv or pool)

    Returns
    -------
    tuple of np.ndarray
        ``inputs`` of shape (neurons, fan_in) holding flat input indices
        (-1 for zero padding) and ``weights`` of the same shape holding
        flat weight coordinates, or None for pooling layers. Row ``o``,
        column ``k`` is synapse ``o * fan_in + k``.
    """
    layer = net.layers[index]
    kernel = getattr(layer, 'kernel_hw', (1, 1))
    return _field_indices(
        layer.kind, net.input_shape_of(index), net.shapes[index],
        tuple(kernel), int(getattr(layer, 'stride', 1)),
        int(getattr(layer, 'padding', 0))
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ActivationTrace:
    """
    Per-layer neuron values recorded during one forward pass.

    ``pre[l]`` holds values before the nonlinearity of layer ``l`` and
    ``post[l]`` after it; they differ only for ReLU layers.
    """

    input: np.ndarray
    pre: Tuple[np.ndarray, ...]
    post: Tuple[np.ndarray, ...]
    logits: np.ndarray
    predicted_rank: Tuple[int, ...]

    def layer_input(self, index: int) -> np.ndarray:
        return self.input if index == 0 else self.post[index - 1]


def rank_classes(logits: np.ndarray) -> Tuple[int, ...]:
    """Class indices by descending logit, ties by ascending index."""
    order = np.argsort(-np.asarray(logits, dtype=np.float64), kind='stable')
    return tuple(int(i) for i in order)


def _check_input(net: Network, x: np.ndarray, batched: bool) -> np.ndarray:
    x = np.asarray(x, dtype=np.float32)
    shape = x.shape[1:] if batched else x.shape
    if tuple(shape) != net.input_shape:
        raise InputShapeError(
            f'expected input shape {net.input_shape}, got {tuple(shape)}'
        )
    return x


def _forward_batch(
    net: Network, x: np.ndarray, check_finite: bool = True
) -> Tuple[List[np.ndarray], List[np.ndarray], List[Any]]:
    pre: List[np.ndarray] = []
    post: List[np.ndarray] = []
    caches: List[Any] = []
    current = x
    for index, layer in enumerate(net.layers):
        if isinstance(layer, ResidualAdd):
            out = current + post[layer.source_layer_index]
            layer_pre, cache = current, None
        else:
            out, cache = layer.forward(current)
            layer_pre = current if isinstance(layer, ReLU) else out
        if check_finite and not np.all(np.isfinite(out)):
            raise NumericOverflowError(
                f'non-finite value produced by layer {index} ({layer.kind})'
            )
        pre.append(layer_pre)
        post.append(out)
        caches.append(cache)
        current = out
    return pre, post, caches


def _backward_batch(
    net: Network, caches: List[Any], dlogits: np.ndarray
) -> Tuple[np.ndarray, Dict[int, Dict[str, np.ndarray]]]:
    douts: List[Optional[np.ndarray]] = [None] * len(net.layers)
    douts[-1] = dlogits
    param_grads: Dict[int, Dict[str, np.ndarray]] = {}
    dinput = None
    for index in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[index]
        grad = douts[index]
        if isinstance(layer, ResidualAdd):
            src = layer.source_layer_index
            douts[src] = grad if douts[src] is None else douts[src] + grad
            dx = grad
        else:
            dx, grads = layer.backward(grad, caches[index])
            if grads:
                param_grads[index] = grads
        if index == 0:
            dinput = dx
        else:
            prev = douts[index - 1]
            douts[index - 1] = dx if prev is None else prev + dx
    return dinput, param_grads


def forward_trace(net: Network, input: np.ndarray) -> ActivationTrace:
    """
    Run one input through the network, recording every layer's values.

    Parameters
    ----------
    net : Network
        Network to evaluate
    input : np.ndarray
        Single input of shape ``net.input_shape``

    Returns
    -------
    ActivationTrace
        Trace with pre/post values, logits and class ranking

    Raises
    ------
    InputShapeError
        If the input shape does not match
    NumericOverflowError
        If any intermediate value is NaN or infinite
    """
    x = _check_input(net, input, batched=False)
    pre, post, _ = _forward_batch(net, x[None])
    logits = post[-1][0]
    return ActivationTrace(
        input=x,
        pre=tuple(p[0] for p in pre),
        post=tuple(p[0] for p in post),
        logits=logits,
        predicted_rank=rank_classes(logits),
    )


def predict_logits(net: Network, images: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """Logits for a batch of inputs, evaluated in chunks."""
    images = _check_input(net, images, batched=True)
    chunks = [
        _forward_batch(net, images[start:start + batch_size])[1][-1]
        for start in range(0, len(images), batch_size)
    ]
    if not chunks:
        return np.zeros((0, net.num_classes), dtype=np.float32)
    return np.concatenate(chunks)


def predict_topk(net: Network, input: np.ndarray, k: int) -> List[int]:
    """
    The ``k`` highest-ranked classes for one input.

    Raises
    ------
    DomainError
        If ``k`` is not between 1 and the number of classes
    """
    if not 1 <= k <= net.num_classes:
        raise DomainError(
            f'k must be in [1, {net.num_classes}], got {k}'
        )
    return list(forward_trace(net, input).predicted_rank[:k])


def _softmax_cross_entropy(
    logits: np.ndarray, targets: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    z = logits.astype(np.float64)
    shift = z.max(axis=1, keepdims=True)
    exp = np.exp(z - shift)
    total = exp.sum(axis=1, keepdims=True)
    rows = np.arange(len(z))
    losses = (shift[:, 0] + np.log(total[:, 0])) - z[rows, targets]
    probs = exp / total
    dlogits = probs.copy()
    dlogits[rows, targets] -= 1.0
    return losses, dlogits


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    exp = np.exp(z - z.max(axis=-1, keepdims=True))
    return exp / exp.sum(axis=-1, keepdims=True)


def loss_and_input_gradient(
    net: Network, input: np.ndarray, target_class: int,
    targeted: bool = False
) -> Tuple[float, np.ndarray]:
    """
    Cross-entropy of the softmax against ``target_class`` and its input
    gradient, by exact backpropagation.

    Parameters
    ----------
    net : Network
        Network to differentiate
    input : np.ndarray
        Single input
    target_class : int
        Class the loss is measured against (true label for untargeted
        attacks, attack target for targeted ones)
    targeted : bool
        Marks the call as part of a targeted attack; the caller descends
        the returned gradient instead of ascending it

    Returns
    -------
    tuple
        ``(loss, grad)`` with ``grad`` shaped like ``input`` (float64)
    """
    if not 0 <= int(target_class) < net.num_classes:
        raise DomainError(
            f'class index {target_class} outside [0, {net.num_classes})'
        )
    x = _check_input(net, input, batched=False)
    _, post, caches = _forward_batch(net, x[None])
    losses, dlogits = _softmax_cross_entropy(
        post[-1], np.array([int(target_class)])
    )
    dinput, _ = _backward_batch(net, caches, dlogits)
    logger.debug('loss %.6f toward class %d (targeted=%s)',
                 losses[0], target_class, targeted)
    return float(losses[0]), dinput[0]


@dataclass(frozen=True)
class TrainConfig:
    """Mini-batch SGD settings."""

    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 32
    seed: int = 0
    l2_decay: float = 0.0

    def validate(self) -> 'TrainConfig':
        if self.learning_rate < 0:
            raise DomainError('learning_rate must be nonnegative')
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError('epochs and batch_size must be positive')
        if self.l2_decay < 0:
            raise DomainError('l2_decay must be nonnegative')
        return self


def train_sgd(net: Network, data: 'LabeledDataset',
              cfg: TrainConfig) -> Network:
    """
    Train a private copy of ``net`` with seeded mini-batch SGD.

    The batch order is reshuffled each epoch from ``cfg.seed``; updates
    are applied sequentially so a fixed seed reproduces the same weights.

    Parameters
    ----------
    net : Network
        Starting network (left untouched)
    data : LabeledDataset
        Training images and labels
    cfg : TrainConfig
        Optimiser settings

    Returns
    -------
    Network
        Trained network whose ``history`` holds the mean loss per epoch
    """
    cfg.validate()
    if len(data) == 0:
        raise DomainError('cannot train on an empty dataset')
    images = data.images.reshape((len(data),) + net.input_shape)
    labels = np.asarray(data.labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= net.num_classes:
        raise DomainError('labels outside the network class range')

    params = {
        index: {name: tensor.copy() for name, tensor in
                layer.tensors().items()}
        for index, layer in enumerate(net.layers) if layer.has_weights
    }
    rng = np.random.default_rng(cfg.seed)
    history = list(net.history)
    lr = np.float32(cfg.learning_rate)
    decay = cfg.l2_decay
    # layers of `current` share the param arrays updated in place below
    current = _with_params(net, params)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(labels))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            _, post, caches = _forward_batch(current, images[batch])
            losses, dlogits = _softmax_cross_entropy(post[-1], labels[batch])
            total += float(losses.sum())
            _, grads = _backward_batch(current, caches, dlogits / len(batch))
            for index, layer_grads in grads.items():
                for name, grad in layer_grads.items():
                    tensor = params[index][name]
                    if decay and name == 'weights':
                        grad = grad + decay * tensor
                    tensor -= lr * grad.astype(np.float32)
        history.append(total / len(labels))
        logger.info('epoch %d/%d mean loss %.5f',
                    epoch + 1, cfg.epochs, history[-1])
    return Network(current.layers, net.input_shape, tuple(history))


def _with_params(net: Network,
                 params: Mapping[int, Mapping[str, np.ndarray]]) -> Network:
    layers = list(net.layers)
    for index, tensors in params.items():
        layers[index] = replace(layers[index], **tensors)
    return Network(layers, net.input_shape, net.history)


def accuracy(net: Network, data: 'LabeledDataset') -> float:
    """Fraction of ``data`` whose top-1 prediction equals the label."""
    if len(data) == 0:
        raise DomainError('accuracy of an empty dataset is undefined')
    images = data.images.reshape((len(data),) + net.input_shape)
    predicted = predict_logits(net, images).argmax(axis=1)
    return float(np.mean(predicted == data.labels))


# ---------------------------------------------------------------------------
# Ablation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeepPathOnly:
    """Zero every weight that is not in the path's weight set."""


@dataclass(frozen=True)
class DropPathFraction:
    """Zero a seeded uniform fraction of the path's weight set."""

    fraction: float
    seed: int = 0


@dataclass(frozen=True)
class DropOffPath:
    """
    Zero ``count`` seeded uniform weights outside the path, drawn from the
    same layers the path's weights live in.
    """

    count: int
    seed: int = 0


AblationMode = Union[KeepPathOnly, DropPathFraction, DropOffPath]


def _path_weight_masks(net: Network,
                       path: 'EffectivePath') -> Dict[int, np.ndarray]:
    masks = {}
    for index, sets in path.layers.items():
        if net.layers[index].has_weights:
            masks[index] = sets.weights.to_array()
    return masks


def ablated_network(net: Network, path: 'EffectivePath',
                    mode: AblationMode) -> Network:
    """Copy of ``net`` with the weights selected by ``mode`` zeroed."""
    if path.fingerprint != net.fingerprint():
        raise DomainError('path was extracted from a different topology')
    masks = _path_weight_masks(net, path)
    replaced: Dict[int, np.ndarray] = {}

    if isinstance(mode, KeepPathOnly):
        for index, layer in enumerate(net.layers):
            if layer.has_weights:
                keep = masks.get(index, np.zeros(layer.weights.size, bool))
                replaced[index] = np.where(
                    keep.reshape(layer.weights.shape), layer.weights, 0
                )
        return net.with_weights(replaced)

    if isinstance(mode, DropPathFraction):
        if not 0.0 <= mode.fraction <= 1.0:
            raise DomainError('drop fraction must be in [0, 1]')
        select_from = masks
        count = None
    elif isinstance(mode, DropOffPath):
        select_from = {i: ~m for i, m in masks.items()}
        count = mode.count
    else:
        raise DomainError(f'unknown ablation mode: {mode!r}')

    layer_ids = sorted(select_from)
    coords = [np.flatnonzero(select_from[i]) for i in layer_ids]
    owners = np.concatenate(
        [np.full(len(c), i) for i, c in zip(layer_ids, coords)]
    ) if coords else np.zeros(0, dtype=np.int64)
    flat = np.concatenate(coords) if coords else np.zeros(0, dtype=np.int64)
    if count is None:
        count = int(np.floor(mode.fraction * len(flat) + 0.5))
    if count > len(flat):
        raise DomainError(
            f'cannot drop {count} weights from a pool of {len(flat)}'
        )
    if count == 0:
        return net
    rng = np.random.default_rng(mode.seed)
    chosen = rng.choice(len(flat), size=count, replace=False)
    for index in layer_ids:
        picked = flat[chosen[owners[chosen] == index]]
        if len(picked):
            weights = net.layers[index].weights.copy()
            weights.reshape(-1)[picked] = 0
            replaced[index] = weights
    return net.with_weights(replaced)


def ablate_forward(net: Network, input: np.ndarray, path: 'EffectivePath',
                   mode: AblationMode) -> int:
    """
    Predicted class after zeroing weights selected by ``mode``.

    Parameters
    ----------
    net : Network
        Unablated network
    input : np.ndarray
        Single input
    path : EffectivePath
        Path extracted from a network with the same topology
    mode : KeepPathOnly, DropPathFraction or DropOffPath
        Which weights to zero

    Returns
    -------
    int
        Top-1 class of the ablated network
    """
    ablated = ablated_network(net, path, mode)
    return forward_trace(ablated, input).predicted_rank[0]
