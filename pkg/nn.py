"""
kafforge - Layers and Networks
==============================
Tensors are float64 numpy arrays. Every layer is implemented twice over:

- a pure function pair (`dense_forward` / `dense_backward`, ...) holding the
  maths, with hand-derived reverse-mode gradients;
- a small `Layer` object that owns parameters, caches what its backward pass
  needs and calls the function pair.

`NetworkSpec` is the declarative layer list; `build_network` turns it into a
`Network`, checking that shapes compose. Trained state is stored in the KAFW1
checkpoint format.
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import DomainError, FormatError
from kaf import MULTI_KERNELS, PLAIN_KERNELS, KafConfig, elu, multikaf_backward, multikaf_forward

Tensor = np.ndarray

CHECKPOINT_MAGIC = b"KAFW1"
BN_MOMENTUM = 0.9
BN_EPS = 1e-5


def as_tensor(x):
    return np.asarray(x, dtype=np.float64)


# ============================================================================
# DENSE
# ============================================================================

def dense_forward(x, W, b):
    """x: (batch, in), W: (out, in), b: (out,) -> (batch, out)"""
    if x.ndim != 2 or x.shape[1] != W.shape[1]:
        raise DomainError(f"dense layer expects (batch, {W.shape[1]}) input, got {x.shape}")
    return x @ W.T + b


def dense_backward(x, W, upstream):
    """Returns: (grad_x, grad_W, grad_b)"""
    if upstream.shape != (x.shape[0], W.shape[0]):
        raise DomainError(f"dense upstream gradient has shape {upstream.shape}")
    return upstream @ W, upstream.T @ x, upstream.sum(axis=0)


# ============================================================================
# CONV2D (cross-correlation through strided window views)
# ============================================================================

def _conv_geometry(x_shape, W_shape, padding, stride):
    if len(x_shape) != 4 or x_shape[1] != W_shape[1]:
        raise DomainError(
            f"conv2d expects (batch, {W_shape[1]}, H, W) input, got {tuple(x_shape)}"
        )
    k = W_shape[2]
    Hp, Wp = x_shape[2] + 2 * padding, x_shape[3] + 2 * padding
    if Hp < k or Wp < k:
        raise DomainError(
            f"spatial size {x_shape[2]}x{x_shape[3]} with padding {padding} is smaller than kernel {k}"
        )
    return k, (Hp - k) // stride + 1, (Wp - k) // stride + 1


def _pad_spatial(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(xpad, k, stride):
    """(N, C, Ho, Wo, k, k) view of every receptive field"""
    return sliding_window_view(xpad, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(x, W, b, padding=0, stride=1):
    """x: (N, C, H, W), W: (O, C, k, k), b: (O,) -> (N, O, Ho, Wo)"""
    k, _, _ = _conv_geometry(x.shape, W.shape, padding, stride)
    win = _windows(_pad_spatial(x, padding), k, stride)
    out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2) + b[None, :, None, None]


def conv2d_backward(x, W, upstream, padding=0, stride=1):
    """Returns: (grad_x, grad_W, grad_b)"""
    k, Ho, Wo = _conv_geometry(x.shape, W.shape, padding, stride)
    if upstream.shape != (x.shape[0], W.shape[0], Ho, Wo):
        raise DomainError(f"conv2d upstream gradient has shape {upstream.shape}")
    xpad = _pad_spatial(x, padding)
    win = _windows(xpad, k, stride)
    grad_W = np.tensordot(upstream, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_b = upstream.sum(axis=(0, 2, 3))
    grad_pad = np.zeros_like(xpad)
    for i in range(k):
        for j in range(k):
            grad_pad[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += np.einsum(
                "nohw,oc->nchw", upstream, W[:, :, i, j]
            )
    H, Wd = x.shape[2], x.shape[3]
    return grad_pad[:, :, padding:padding + H, padding:padding + Wd], grad_W, grad_b


# ============================================================================
# MAX POOLING
# ============================================================================

def maxpool_forward(x, k=2, stride=2):
    """
    Returns: (pooled, argmax) where argmax is the row-major index of each
    window's maximum inside the window (first index on ties)
    """
    if x.ndim != 4:
        raise DomainError(f"maxpool expects (N, C, H, W) input, got {x.shape}")
    N, C, H, W = x.shape
    if H % stride or W % stride or H < k or W < k:
        raise DomainError(f"maxpool {k}x{k}/{stride} cannot tile a {H}x{W} map")
    win = _windows(x, k, stride)
    flat = win.reshape(N, C, win.shape[2], win.shape[3], k * k)
    argmax = flat.argmax(axis=-1)
    pooled = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return pooled, argmax


def maxpool_backward(x_shape, argmax, upstream, k=2, stride=2):
    if upstream.shape != argmax.shape:
        raise DomainError(f"maxpool upstream gradient has shape {upstream.shape}")
    grad = np.zeros(x_shape)
    n, c, ho, wo = np.indices(argmax.shape)
    rows = ho * stride + argmax // k
    cols = wo * stride + argmax % k
    np.add.at(grad, (n, c, rows, cols), upstream)
    return grad


# ============================================================================
# BATCH NORMALIZATION
# ============================================================================

def _bn_layout(x, features):
    if x.ndim == 2 and x.shape[1] == features:
        return (0,), (1, features)
    if x.ndim == 4 and x.shape[1] == features:
        return (0, 2, 3), (1, features, 1, 1)
    raise DomainError(f"batchnorm over {features} features got input of shape {x.shape}")


@dataclass(eq=False)
class BatchNormCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    axes: tuple
    shape: tuple
    training: bool


def batchnorm_forward(x, gamma, beta, running_mean, running_var,
                      momentum=BN_MOMENTUM, eps=BN_EPS, training=True):
    """
    Normalize per feature (per channel for 4-D input)

    Training mode uses batch statistics and updates running_mean/running_var
    in place; inference mode uses the running statistics.
    """
    axes, shape = _bn_layout(x, gamma.size)
    if training:
        if x.shape[0] < 2:
            raise DomainError("batchnorm in training mode needs a batch of at least 2")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = gamma.reshape(shape) * xhat + beta.reshape(shape)
    return out, BatchNormCache(xhat, inv_std, gamma, axes, shape, training)


def batchnorm_backward(cache, upstream):
    """Returns: (grad_x, grad_gamma, grad_beta)"""
    axes, shape = cache.axes, cache.shape
    grad_gamma = (upstream * cache.xhat).sum(axis=axes)
    grad_beta = upstream.sum(axis=axes)
    dxhat = upstream * cache.gamma.reshape(shape)
    inv_std = cache.inv_std.reshape(shape)
    if not cache.training:
        return dxhat * inv_std, grad_gamma, grad_beta
    m = upstream.size // cache.gamma.size
    grad_x = inv_std / m * (
        m * dxhat
        - dxhat.sum(axis=axes, keepdims=True)
        - cache.xhat * (dxhat * cache.xhat).sum(axis=axes, keepdims=True)
    )
    return grad_x, grad_gamma, grad_beta


# ============================================================================
# DROPOUT, FIXED ACTIVATIONS, LOSS
# ============================================================================

def dropout_forward(x, p, training, seed=None):
    """
    Inverted dropout

    Args:
        seed: int or numpy Generator for the mask

    Returns: (output, mask); mask is None when the call is the identity
    """
    if not 0 <= p < 1:
        raise DomainError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0:
        return x, None
    rng = np.random.default_rng(seed)
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * mask, mask


def dropout_backward(mask, upstream):
    return upstream if mask is None else upstream * mask


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(x, upstream):
    return upstream * (x > 0)


def elu_forward(x):
    return elu(x)


def elu_backward(x, upstream):
    return upstream * np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, onehot, l2_term=0.0):
    """
    Batch-averaged cross-entropy of softmax(logits) plus a caller-supplied
    regularization term

    Returns: (loss, grad_logits)
    """
    if logits.shape != onehot.shape or logits.ndim != 2:
        raise DomainError(f"logits {logits.shape} and targets {onehot.shape} must be equal 2-D shapes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float((onehot * log_probs).sum()) / n + float(l2_term)
    return loss, (np.exp(log_probs) - onehot) / n


# ============================================================================
# LAYER OBJECTS
# ============================================================================

class Layer:
    """Owns parameters, caches forward state, fills grads on backward"""

    name = "layer"

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.buffers = {}
        self.regularized = ()

    def forward(self, x, training=False):
        raise NotImplementedError

    def backward(self, upstream):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}()"


class Dense(Layer):
    name = "dense"

    def __init__(self, W, b):
        super().__init__()
        self.params = {"W": W, "b": b}
        self.regularized = ("W",)

    def forward(self, x, training=False):
        self._x = x
        return dense_forward(x, self.params["W"], self.params["b"])

    def backward(self, upstream):
        grad_x, self.grads["W"], self.grads["b"] = dense_backward(self._x, self.params["W"], upstream)
        return grad_x

    def __repr__(self):
        out_f, in_f = self.params["W"].shape
        return f"Dense({in_f} -> {out_f})"


class Conv2d(Layer):
    name = "conv2d"

    def __init__(self, W, b, padding, stride):
        super().__init__()
        self.params = {"W": W, "b": b}
        self.regularized = ("W",)
        self.padding = padding
        self.stride = stride

    def forward(self, x, training=False):
        self._x = x
        return conv2d_forward(x, self.params["W"], self.params["b"], self.padding, self.stride)

    def backward(self, upstream):
        grad_x, self.grads["W"], self.grads["b"] = conv2d_backward(
            self._x, self.params["W"], upstream, self.padding, self.stride
        )
        return grad_x

    def __repr__(self):
        o, c, k, _ = self.params["W"].shape
        return f"Conv2d({c} -> {o}, {k}x{k}, pad={self.padding}, stride={self.stride})"


class MaxPool2d(Layer):
    name = "maxpool"

    def __init__(self, k, stride):
        super().__init__()
        self.k = k
        self.stride = stride

    def forward(self, x, training=False):
        self._shape = x.shape
        out, self._argmax = maxpool_forward(x, self.k, self.stride)
        return out

    def backward(self, upstream):
        return maxpool_backward(self._shape, self._argmax, upstream, self.k, self.stride)

    def __repr__(self):
        return f"MaxPool2d({self.k}x{self.k}/{self.stride})"


class BatchNorm(Layer):
    name = "batchnorm"

    def __init__(self, features, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__()
        self.params = {"gamma": np.ones(features), "beta": np.zeros(features)}
        self.buffers = {"running_mean": np.zeros(features), "running_var": np.ones(features)}
        self.regularized = ("gamma",)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x, training=False):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.buffers["running_mean"], self.buffers["running_var"],
            self.momentum, self.eps, training,
        )
        return out

    def backward(self, upstream):
        grad_x, self.grads["gamma"], self.grads["beta"] = batchnorm_backward(self._cache, upstream)
        return grad_x

    def __repr__(self):
        return f"BatchNorm({self.params['gamma'].size})"


class Dropout(Layer):
    name = "dropout"

    def __init__(self, p, rng):
        super().__init__()
        self.p = p
        self.rng = rng

    def forward(self, x, training=False):
        out, self._mask = dropout_forward(x, self.p, training, self.rng)
        return out

    def backward(self, upstream):
        return dropout_backward(self._mask, upstream)

    def __repr__(self):
        return f"Dropout({self.p})"


class Flatten(Layer):
    name = "flatten"

    def forward(self, x, training=False):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, upstream):
        return upstream.reshape(self._shape)


class ActivationKind(str, Enum):
    RELU = "relu"
    ELU = "elu"
    KAF = "kaf"
    MULTIKAF = "multikaf"

    @property
    def trainable(self):
        return self in (ActivationKind.KAF, ActivationKind.MULTIKAF)


class Activation(Layer):
    """Fixed (ReLU, ELU) or kernel-based activation over axis-1 neurons"""

    name = "activation"

    def __init__(self, kind, neurons, kaf_params=None):
        super().__init__()
        self.kind = ActivationKind(kind)
        self.neurons = neurons
        self.kaf = kaf_params
        if kaf_params is not None:
            self.params = {"alpha": kaf_params.alpha, "mu": kaf_params.mu}
            self.regularized = ("alpha", "mu")

    def forward(self, x, training=False):
        self._x = x
        if self.kind is ActivationKind.RELU:
            return relu_forward(x)
        if self.kind is ActivationKind.ELU:
            return elu_forward(x)
        out, self._cache = multikaf_forward(self.kaf, x)
        return out

    def backward(self, upstream):
        if self.kind is ActivationKind.RELU:
            return relu_backward(self._x, upstream)
        if self.kind is ActivationKind.ELU:
            return elu_backward(self._x, upstream)
        grad_x, self.grads["alpha"], self.grads["mu"] = multikaf_backward(self.kaf, self._cache, upstream)
        return grad_x

    def __repr__(self):
        if self.kaf is None:
            return f"Activation({self.kind.value})"
        kernels = "+".join(spec.name for spec in self.kaf.kernels)
        return f"Activation({self.kind.value}, {self.neurons} neurons, {kernels})"


# ============================================================================
# LAYER SPECS
# ============================================================================

def _glorot(rng, shape, fan_in, fan_out):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass(frozen=True)
class DenseSpec:
    in_features: int
    out_features: int

    def build(self, in_shape, rng):
        if in_shape != (self.in_features,):
            raise DomainError(f"Dense expects {self.in_features} input features, got shape {in_shape}")
        W = _glorot(rng, (self.out_features, self.in_features), self.in_features, self.out_features)
        return Dense(W, np.zeros(self.out_features)), (self.out_features,)


@dataclass(frozen=True)
class Conv2dSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 5
    padding: int = 2
    stride: int = 1

    def build(self, in_shape, rng):
        if len(in_shape) != 3 or in_shape[0] != self.in_channels:
            raise DomainError(f"Conv2d expects ({self.in_channels}, H, W) input, got shape {in_shape}")
        k = self.kernel_size
        shape = (self.out_channels, self.in_channels, k, k)
        _, Ho, Wo = _conv_geometry((1,) + tuple(in_shape), shape, self.padding, self.stride)
        W = _glorot(rng, shape, self.in_channels * k * k, self.out_channels * k * k)
        layer = Conv2d(W, np.zeros(self.out_channels), self.padding, self.stride)
        return layer, (self.out_channels, Ho, Wo)


@dataclass(frozen=True)
class MaxPool2dSpec:
    kernel_size: int = 2
    stride: int = 2

    def build(self, in_shape, rng):
        if len(in_shape) != 3:
            raise DomainError(f"MaxPool2d expects (C, H, W) input, got shape {in_shape}")
        C, H, W = in_shape
        k, s = self.kernel_size, self.stride
        if H % s or W % s or H < k or W < k:
            raise DomainError(f"MaxPool2d {k}x{k}/{s} cannot tile a {H}x{W} map")
        return MaxPool2d(k, s), (C, (H - k) // s + 1, (W - k) // s + 1)


@dataclass(frozen=True)
class BatchNormSpec:
    features: int
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    def build(self, in_shape, rng):
        if not in_shape or in_shape[0] != self.features:
            raise DomainError(f"BatchNorm over {self.features} features got shape {in_shape}")
        return BatchNorm(self.features, self.momentum, self.eps), in_shape


@dataclass(frozen=True)
class DropoutSpec:
    p: float = 0.5

    def build(self, in_shape, rng):
        if not 0 <= self.p < 1:
            raise DomainError(f"dropout probability must be in [0, 1), got {self.p}")
        return Dropout(self.p, np.random.default_rng(rng.integers(2**63))), in_shape


@dataclass(frozen=True)
class FlattenSpec:
    def build(self, in_shape, rng):
        return Flatten(), (int(np.prod(in_shape)),)


@dataclass(frozen=True)
class ActivationSpec:
    kind: ActivationKind
    kaf: Optional[KafConfig] = None

    def build(self, in_shape, rng):
        kind = ActivationKind(self.kind)
        neurons = in_shape[0]
        params = kaf_config_for(kind, self.kaf).build(neurons) if kind.trainable else None
        return Activation(kind, neurons, params), in_shape


LayerSpec = Union[DenseSpec, Conv2dSpec, MaxPool2dSpec, BatchNormSpec, DropoutSpec, FlattenSpec, ActivationSpec]


def kaf_config_for(kind, kaf=None):
    """The KafConfig an activation of this kind uses when none is given"""
    if kaf is not None:
        return kaf
    return KafConfig(kernels=PLAIN_KERNELS if ActivationKind(kind) is ActivationKind.KAF else MULTI_KERNELS)


@dataclass(frozen=True)
class NetworkSpec:
    """Declarative network: per-sample input shape and ordered layer specs"""

    input_shape: Tuple[int, ...]
    layers: Tuple[LayerSpec, ...]
    seed: int = 0


# ============================================================================
# NETWORK
# ============================================================================

class Network:
    """Instantiated layers with their parameters; single writer"""

    def __init__(self, spec, layers, shapes):
        self.spec = spec
        self.layers = layers
        self.shapes = shapes

    @property
    def rng_seed(self):
        return self.spec.seed

    @property
    def output_shape(self):
        return self.shapes[-1]

    def forward(self, x, training=False):
        x = as_tensor(x)
        if x.shape[1:] != tuple(self.spec.input_shape):
            raise DomainError(f"network expects inputs of shape (batch, {self.spec.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self):
        """(layer index, name, array) for every trainable tensor, in layer order"""
        return [(i, name, p) for i, layer in enumerate(self.layers) for name, p in layer.params.items()]

    def gradients(self):
        return [self.layers[i].grads[name] for i, name, _ in self.parameters()]

    def param_count(self):
        return sum(p.size for _, _, p in self.parameters())

    def regularized_parameters(self):
        return [(i, name, p) for i, name, p in self.parameters() if name in self.layers[i].regularized]

    def l2_norm_sq(self):
        """||w||^2 over weights; biases and batchnorm shifts are excluded"""
        return float(sum(np.dot(p.ravel(), p.ravel()) for _, _, p in self.regularized_parameters()))

    def state_tensors(self):
        """Parameters and buffers of every layer, in layer order"""
        tensors = []
        for layer in self.layers:
            tensors.extend(layer.params.values())
            tensors.extend(layer.buffers.values())
        return tensors

    def snapshot(self):
        return [t.copy() for t in self.state_tensors()]

    def restore(self, snapshot):
        tensors = self.state_tensors()
        if len(snapshot) != len(tensors):
            raise DomainError(f"snapshot holds {len(snapshot)} tensors, network has {len(tensors)}")
        for target, saved in zip(tensors, snapshot):
            if target.shape != saved.shape:
                raise DomainError(f"snapshot tensor shape {saved.shape} does not match {target.shape}")
            target[...] = saved

    def kaf_layers(self):
        """(index, layer) of every trainable-activation layer"""
        return [(i, layer) for i, layer in enumerate(self.layers)
                if isinstance(layer, Activation) and layer.kaf is not None]

    def kaf_neurons(self):
        return sum(layer.neurons for _, layer in self.kaf_layers())

    def describe(self):
        lines = []
        for i, (layer, shape) in enumerate(zip(self.layers, self.shapes[1:])):
            lines.append(f"  [{i:2d}] {layer!r:<55} -> {shape}")
        return "\n".join(lines)


def build_network(spec):
    """Instantiate a NetworkSpec; shape errors name the offending layer"""
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(d) for d in spec.input_shape)
    if not shape or any(d < 1 for d in shape):
        raise DomainError(f"input shape must be positive, got {spec.input_shape}")
    layers, shapes = [], [shape]
    for index, layer_spec in enumerate(spec.layers):
        try:
            layer, shape = layer_spec.build(shape, rng)
        except DomainError as e:
            raise DomainError(f"layer {index} ({type(layer_spec).__name__}): {e}") from e
        layers.append(layer)
        shapes.append(tuple(shape))
    return Network(spec, layers, shapes)


# ============================================================================
# BUILDERS
# ============================================================================

def round_half_up(x):
    return int(math.floor(x + 0.5))


def _hidden_block(layers, make_affine, width, kind, kaf, batchnorm, dropout):
    if dropout > 0:
        layers.append(DropoutSpec(dropout))
    layers.append(make_affine(width))
    if batchnorm:
        layers.append(BatchNormSpec(width))
    layers.append(ActivationSpec(kind, kaf_config_for(kind, kaf) if kind.trainable else None))


def build_mlp(input_shape, hidden, classes, activation, kaf=None, batchnorm=False, dropout=0.0, seed=0):
    """Flatten -> (dense -> [bn] -> act) per hidden width -> dense(classes)"""
    kind = ActivationKind(activation)
    layers = [FlattenSpec()]
    width = int(np.prod(input_shape))
    for h in hidden:
        _hidden_block(layers, lambda w, i=width: DenseSpec(i, w), h, kind, kaf, batchnorm, dropout)
        width = h
    if dropout > 0:
        layers.append(DropoutSpec(dropout))
    layers.append(DenseSpec(width, classes))
    return NetworkSpec(tuple(input_shape), tuple(layers), seed)


def build_cnn(input_shape, filters, dense, classes, activation, kaf=None, batchnorm=False,
              dropout=0.0, kernel_size=5, seed=0):
    """
    (conv k x k same-padded -> [bn] -> act -> maxpool 2x2) per filter count,
    flatten, (dense -> [bn] -> act) per dense width, dense(classes)
    """
    kind = ActivationKind(activation)
    channels, H, W = input_shape
    dense = (dense,) if isinstance(dense, int) else tuple(dense)
    layers = []
    for f in filters:
        _hidden_block(layers, lambda w, c=channels: Conv2dSpec(c, w, kernel_size, kernel_size // 2, 1),
                      f, kind, kaf, batchnorm, dropout)
        layers.append(MaxPool2dSpec(2, 2))
        channels, H, W = f, H // 2, W // 2
    layers.append(FlattenSpec())
    width = channels * H * W
    for h in dense:
        _hidden_block(layers, lambda w, i=width: DenseSpec(i, w), h, kind, kaf, batchnorm, dropout)
        width = h
    if dropout > 0:
        layers.append(DropoutSpec(dropout))
    layers.append(DenseSpec(width, classes))
    return NetworkSpec(tuple(input_shape), tuple(layers), seed)


def icr_widths(width_scale):
    """Filter counts and FC width of the three-block character CNN"""
    return (
        tuple(round_half_up(f * width_scale) for f in (42, 28, 28)),
        round_half_up(100 * width_scale),
    )


def build_icr_cnn(variant, width_scale=None, input_shape=(1, 56, 56), classes=23, kaf=None, seed=0):
    """
    The character-recognition CNN: three conv(5x5) + pool blocks, FC 100,
    output layer. Fixed-activation variants keep dropout(0.5) before every
    conv/dense layer; KAF variants swap dropout for batchnorm before each
    activation and shrink every width by 10% by default.
    """
    kind = ActivationKind(variant)
    if width_scale is None:
        width_scale = 0.9 if kind.trainable else 1.0
    if not 0 < width_scale <= 1:
        raise DomainError(f"width_scale must be in (0, 1], got {width_scale}")
    filters, fc = icr_widths(width_scale)
    return build_cnn(
        input_shape, filters, fc, classes, kind, kaf=kaf,
        batchnorm=kind.trainable, dropout=0.0 if kind.trainable else 0.5,
        kernel_size=5, seed=seed,
    )


# ============================================================================
# KAFW1 CHECKPOINTS
# ============================================================================

def save_checkpoint(network, path):
    """Magic, then per tensor: u32 rank, u32 dims, little-endian float64 data"""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for tensor in network.state_tensors():
            f.write(np.array([tensor.ndim, *tensor.shape], dtype="<u4").tobytes())
            f.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_checkpoint(network, path):
    """Read a KAFW1 file into an already-built network of the same architecture"""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise FormatError("not a KAFW1 checkpoint", 0)
    offset = len(CHECKPOINT_MAGIC)
    loaded = []
    for target in network.state_tensors():
        if offset + 4 > len(blob):
            raise FormatError(f"checkpoint ends before tensor {len(loaded)}", offset)
        rank = int(np.frombuffer(blob, "<u4", 1, offset)[0])
        if offset + 4 * (rank + 1) > len(blob):
            raise FormatError(f"truncated shape of tensor {len(loaded)}", offset)
        shape = tuple(int(d) for d in np.frombuffer(blob, "<u4", rank, offset + 4))
        if shape != target.shape:
            raise FormatError(f"tensor {len(loaded)} has shape {shape}, network expects {target.shape}", offset)
        offset += 4 * (rank + 1)
        count = int(np.prod(shape))
        if offset + 8 * count > len(blob):
            raise FormatError(f"truncated data of tensor {len(loaded)}", offset)
        loaded.append(np.frombuffer(blob, "<f8", count, offset).reshape(shape))
        offset += 8 * count
    if offset != len(blob):
        raise FormatError("trailing bytes after the last tensor", offset)
    network.restore(loaded)
    return network
