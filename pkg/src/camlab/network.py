"""Layer stack, cached forward pass, and reverse-mode gradients.

Layers operate on batches internally (``[B, ...]``); the public
functions take a single sample and add the batch axis themselves.
Activations are float32; every reduction is accumulated in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._backend import kernels
from .tensor import DTYPE, as_tensor, check_finite, softmax64


class ShapeError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=DTYPE, copy=True, order="C")
    a.flags.writeable = False
    return a


class Layer:
    kind: str = ""
    spatial_in = True

    @property
    def params(self) -> list[np.ndarray]:
        return []

    def hyper(self) -> tuple[int, ...]:
        return ()

    def with_params(self, params):
        return self

    def __repr__(self):
        args = ", ".join(str(h) for h in self.hyper())
        return f"{type(self).__name__}({args})"


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, in_channels, out_channels, kernel_size, weight=None, bias=None):
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ShapeError("conv2d needs an odd kernel size for 'same' padding")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)
        wshape = (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)
        self.weight = _frozen(np.zeros(wshape) if weight is None else weight)
        self.bias = _frozen(np.zeros(self.out_channels) if bias is None else bias)
        if self.weight.shape != wshape or self.bias.shape != (self.out_channels,):
            raise ShapeError(f"conv2d parameters do not match {wshape}")

    @property
    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return (self.in_channels, self.out_channels, self.kernel_size)

    def with_params(self, params):
        return Conv2d(*self.hyper(), weight=params[0], bias=params[1])

    def output_shape(self, s):
        if len(s) != 3 or s[0] != self.in_channels:
            raise ShapeError(f"conv2d({self.in_channels}->...) cannot take input {s}")
        return (self.out_channels, s[1], s[2])

    def forward(self, x):
        return kernels.conv2d_forward(x, self.weight, self.bias), None

    def backward(self, gy, x, y, cache, need_params, need_input=True):
        gx = kernels.conv2d_backward_input(gy, self.weight) if need_input else None
        grads = None
        if need_params:
            grads = kernels.conv2d_backward_params(x, gy, self.kernel_size)
        return gx, grads


class ReLU(Layer):
    kind = "relu"

    def output_shape(self, s):
        return tuple(s)

    def forward(self, x):
        return np.maximum(x, DTYPE(0)), None

    def backward(self, gy, x, y, cache, need_params, need_input=True):
        return np.where(y > 0, gy, DTYPE(0)), None


class MaxPool2x2(Layer):
    kind = "maxpool2x2"

    def output_shape(self, s):
        if len(s) != 3 or s[1] % 2 or s[2] % 2 or s[1] == 0 or s[2] == 0:
            raise ShapeError(f"maxpool2x2 needs [C,H,W] with even H, W; got {s}")
        return (s[0], s[1] // 2, s[2] // 2)

    def forward(self, x):
        return kernels.maxpool2x2_forward(x)

    def backward(self, gy, x, y, cache, need_params, need_input=True):
        return kernels.maxpool2x2_backward(np.ascontiguousarray(gy), cache), None


class GlobalAvgPool(Layer):
    kind = "global_average_pool"

    def output_shape(self, s):
        if len(s) != 3 or s[1] * s[2] == 0:
            raise ShapeError(f"global_average_pool needs [C,H,W]; got {s}")
        return (s[0],)

    def forward(self, x):
        B, C, H, W = x.shape
        sums = x.reshape(B, C, H * W).astype(np.float64).sum(axis=2)
        return (sums / (H * W)).astype(DTYPE), None

    def backward(self, gy, x, y, cache, need_params, need_input=True):
        B, C, H, W = x.shape
        g = (gy.astype(np.float64) / (H * W)).astype(DTYPE)
        return np.ascontiguousarray(np.broadcast_to(g[:, :, None, None], x.shape)), None


class Linear(Layer):
    kind = "linear"
    spatial_in = False

    def __init__(self, in_features, out_features, weight=None, bias=None):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        wshape = (self.out_features, self.in_features)
        self.weight = _frozen(np.zeros(wshape) if weight is None else weight)
        self.bias = _frozen(np.zeros(self.out_features) if bias is None else bias)
        if self.weight.shape != wshape or self.bias.shape != (self.out_features,):
            raise ShapeError(f"linear parameters do not match {wshape}")

    @property
    def params(self):
        return [self.weight, self.bias]

    def hyper(self):
        return (self.in_features, self.out_features)

    def with_params(self, params):
        return Linear(*self.hyper(), weight=params[0], bias=params[1])

    def output_shape(self, s):
        if tuple(s) != (self.in_features,):
            raise ShapeError(f"linear({self.in_features}->...) cannot take input {s}")
        return (self.out_features,)

    def forward(self, x):
        # row-wise reductions keep each sample's bits independent of batch size
        w = self.weight.astype(np.float64)
        y = (x.astype(np.float64)[:, None, :] * w[None]).sum(axis=2) + self.bias
        return y.astype(DTYPE), None

    def backward(self, gy, x, y, cache, need_params, need_input=True):
        g = gy.astype(np.float64)
        gx = (g[:, :, None] * self.weight.astype(np.float64)[None]).sum(axis=1)
        grads = None
        if need_params:
            grads = (g.T @ x.astype(np.float64), g.sum(axis=0))
        return gx.astype(DTYPE), grads


LAYER_KINDS = {cls.kind: cls for cls in (Conv2d, ReLU, MaxPool2x2, GlobalAvgPool, Linear)}


class Network:
    """An immutable classifier ``x -> logits``.

    Shapes are checked layer by layer at construction. ``metadata`` holds
    free-form provenance (seed, learning rate, epochs, history digest).
    """

    def __init__(self, layers, input_shape, metadata=None):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.metadata = dict(metadata or {})
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        shapes = []
        s = self.input_shape
        transitions = 0
        for layer in self.layers:
            out = layer.output_shape(s)
            if len(s) == 3 and len(out) == 1:
                transitions += 1
            shapes.append(out)
            s = out
        if len(s) != 1:
            raise ShapeError(f"final layer must produce logits [N], got {s}")
        if len(self.input_shape) == 3 and transitions != 1:
            raise ShapeError("expected exactly one spatial-to-vector transition")
        self.shapes = tuple(shapes)
        self.num_classes = s[0]
        if self.num_classes < 2:
            raise ShapeError("a classifier needs at least two classes")

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def with_params(self, params, metadata=None):
        params = list(params)
        if len(params) != len(self.params):
            raise ShapeError("parameter count mismatch")
        layers = []
        for layer in self.layers:
            k = len(layer.params)
            layers.append(layer.with_params(params[:k]) if k else layer)
            params = params[k:]
        meta = self.metadata if metadata is None else metadata
        return Network(layers, self.input_shape, meta)

    def spatial_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.shapes) if len(s) == 3]

    def __repr__(self):
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Network(input={self.input_shape}, [{inner}])"


@dataclass
class ForwardTrace:
    """Cached activations of one forward pass.

    ``activations[l]`` is the output of layer ``l``; the last entry is the
    logit vector.
    """

    input: np.ndarray
    activations: list
    net: Network = field(repr=False)
    caches: list = field(default_factory=list, repr=False)

    @property
    def logits(self) -> np.ndarray:
        return self.activations[-1]


def run_forward(net: Network, xb: np.ndarray, start: int = 0):
    """Batched forward from the input of layer ``start``. Returns per-layer
    batched outputs and kernel caches."""
    acts, caches = [], []
    a = np.ascontiguousarray(xb, dtype=DTYPE)
    for layer in net.layers[start:]:
        a, cache = layer.forward(a)
        a = np.ascontiguousarray(a)
        acts.append(a)
        caches.append(cache)
    return acts, caches


def run_backward(net, xb, acts, caches, g_out, stop=-1, need_params=True):
    """Batched reverse pass from the logits down to the output of layer
    ``stop`` (``-1`` = network input).

    Returns ``(g_stop, grads)`` where ``grads`` maps layer index to the
    batch-summed float64 parameter gradients; ``g_stop`` is None when
    ``stop == -1``.
    """
    g = np.ascontiguousarray(g_out, dtype=DTYPE)
    grads = {}
    for idx in range(len(net.layers) - 1, stop, -1):
        layer = net.layers[idx]
        x_in = xb if idx == 0 else acts[idx - 1]
        # the gradient w.r.t. the network input itself is never consumed
        g, pg = layer.backward(g, x_in, acts[idx], caches[idx],
                               need_params and bool(layer.params), need_input=idx > 0)
        if g is not None:
            g = np.ascontiguousarray(g, dtype=DTYPE)
        if pg is not None:
            grads[idx] = pg
    return g, grads


def _check_input(net, x):
    x = as_tensor(x, name="input")
    if x.shape != net.input_shape:
        raise ShapeError(f"input shape {x.shape} does not match network input {net.input_shape}")
    return x


def forward(net: Network, x) -> ForwardTrace:
    x = _check_input(net, x)
    acts, caches = run_forward(net, x[None])
    return ForwardTrace(x, [a[0] for a in acts], net, caches)


def forward_batch(net: Network, xs) -> np.ndarray:
    """Logits ``[B, N]`` for a stack of inputs; row ``b`` is bit-identical to
    ``forward(net, xs[b]).logits``."""
    xs = as_tensor(xs, name="inputs")
    if xs.shape[1:] != net.input_shape:
        raise ShapeError(f"inputs {xs.shape} do not match network input {net.input_shape}")
    return run_forward(net, xs)[0][-1]


def forward_from(net: Network, activation, layer: int) -> np.ndarray:
    """Logits obtained by feeding ``activation`` as the output of ``layer``."""
    a = as_tensor(activation, name="activation")
    if a.shape != net.shapes[layer]:
        raise ShapeError(f"activation {a.shape} does not match layer {layer} output {net.shapes[layer]}")
    if layer == len(net.layers) - 1:
        return a.copy()
    return run_forward(net, a[None], start=layer + 1)[0][-1][0]


def predict(logits) -> int:
    z = np.asarray(logits)
    if z.size == 0:
        raise ValueError("predict on empty logits")
    return int(np.argmax(z))  # first maximum on ties


def _check_target(target, n):
    if not 0 <= int(target) < n:
        raise IndexError(f"class index {target} out of range for {n} classes")


def cross_entropy_loss(logits, target: int) -> float:
    z = as_tensor(logits, name="logits").astype(np.float64)
    _check_target(target, z.size)
    m = z.max()
    lse = m + np.log(np.exp(z - m).sum())
    return float(max(lse - z[int(target)], 0.0))


def loss_seed(logits, target: int) -> np.ndarray:
    """d(cross-entropy)/d(logits) = softmax - onehot(target), float64."""
    z = np.asarray(logits, dtype=np.float64)
    _check_target(target, z.shape[-1])
    g = softmax64(z)
    g[..., int(target)] -= 1.0
    return g


def _check_trace(trace, net):
    if trace.net is not net:
        raise ValueError("trace was produced by a different network")


def backward_params(trace: ForwardTrace, net: Network, target: int) -> list[np.ndarray]:
    """Cross-entropy gradients for every parameter tensor, in ``net.params`` order."""
    _check_trace(trace, net)
    seed = loss_seed(trace.logits, target)[None]
    acts = [a[None] for a in trace.activations]
    _, grads = run_backward(net, trace.input[None], acts, trace.caches, seed)
    out = []
    for idx, layer in enumerate(net.layers):
        for g, p in zip(grads.get(idx, ()), layer.params):
            out.append(np.asarray(g, dtype=np.float64).reshape(p.shape).astype(DTYPE))
    return out


def backward_to_activation(trace: ForwardTrace, net: Network, seed, layer: int) -> np.ndarray:
    """Gradient of ``seed . logits`` with respect to ``activations[layer]``."""
    _check_trace(trace, net)
    seed = as_tensor(seed, name="seed")
    if seed.shape != (net.num_classes,):
        raise ShapeError(f"seed must have shape ({net.num_classes},), got {seed.shape}")
    if not 0 <= layer < len(net.layers):
        raise IndexError(f"layer {layer} out of range")
    acts = [a[None] for a in trace.activations]
    g, _ = run_backward(net, trace.input[None], acts, trace.caches, seed[None],
                        stop=layer, need_params=False)
    check_finite(g, "activation gradient")
    return g[0]


def batch_loss_and_grads(net: Network, xb, yb):
    """Mean cross-entropy, correct count, and batch-averaged parameter gradients."""
    acts, caches = run_forward(net, xb)
    logits = acts[-1]
    z = logits.astype(np.float64)
    m = z.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]
    rows = np.arange(len(yb))
    loss = float(np.mean(lse - z[rows, yb]))
    correct = int(np.sum(np.argmax(logits, axis=1) == yb))
    seed = softmax64(z)
    seed[rows, yb] -= 1.0
    _, grads = run_backward(net, xb, acts, caches, seed)
    B = len(yb)
    out = []
    for idx, layer in enumerate(net.layers):
        for g, p in zip(grads.get(idx, ()), layer.params):
            out.append((np.asarray(g, dtype=np.float64) / B).reshape(p.shape).astype(DTYPE))
    return loss, correct, out


def glorot_uniform(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


def init_network(specs, input_shape, seed: int) -> Network:
    """Build a network from ``(kind, *hyper)`` tuples with seeded Glorot
    weights and zero biases."""
    rng = np.random.default_rng(seed)
    layers = []
    for kind, *hyper in specs:
        if kind == "conv2d":
            cin, cout, k = hyper
            w = glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k)
            layers.append(Conv2d(cin, cout, k, weight=w))
        elif kind == "linear":
            fin, fout = hyper
            layers.append(Linear(fin, fout, weight=glorot_uniform(rng, (fout, fin), fin, fout)))
        elif kind in LAYER_KINDS:
            layers.append(LAYER_KINDS[kind]())
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(layers, input_shape, {"init_seed": int(seed)})


def reference_cnn(seed: int = 0, in_channels: int = 1, image_size: int = 32,
                  num_classes: int = 3, width: int = 8, kernels=(5, 5)) -> Network:
    """conv -> relu -> maxpool -> conv -> relu -> GAP -> linear."""
    specs = [
        ("conv2d", in_channels, width, kernels[0]),
        ("relu",),
        ("maxpool2x2",),
        ("conv2d", width, 2 * width, kernels[1]),
        ("relu",),
        ("global_average_pool",),
        ("linear", 2 * width, num_classes),
    ]
    return init_network(specs, (in_channels, image_size, image_size), seed)
