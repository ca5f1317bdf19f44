"""Toy monocular-depth network: a small attention encoder and a conv decoder,
with a hand-written backward pass and hooks used by the PTQ pipeline.

Activations flow as NCHW maps in the patch embedding and decoder, and as
(N, T, D) token tensors in the encoder.  Quantizable layers (Linear, Conv2d)
expose three hooks:

* ``act_quant``    callable applied to the layer input before the product
                   (straight-through in the backward pass),
* ``capture``      when true, the float and quantized input matrices are stored,
* ``capture_grad`` when true, the gradient w.r.t. the layer output is stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import numpy as np
from scipy.special import erf

from .errors import ShapeError, UnsupportedLayerError
from .tensor import bmm, col2im, conv_output_size, im2col, matmul

QUANTIZABLE = ("linear", "conv2d")


@dataclass
class LayerPolicy:
    quantize: bool = True
    polish: bool = False


class Layer:
    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def forward(self, x):
        raise NotImplementedError

    def backward(self, dy):
        raise UnsupportedLayerError(f"layer {self.name!r} ({self.kind}) has no backward rule")

    def children(self) -> Iterator["Layer"]:
        return iter(())

    def parameters(self) -> dict[str, np.ndarray]:
        return {}


class QuantLayer(Layer):
    """Shared input-hook plumbing of Linear and Conv2d."""

    def __init__(self, name: str, weight: np.ndarray, bias: np.ndarray | None):
        super().__init__(name)
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = None if bias is None else np.asarray(bias, dtype=np.float64)
        self.policy = LayerPolicy()
        self.act_quant: Callable[[np.ndarray], np.ndarray] | None = None
        self.capture = False
        self.capture_grad = False
        self.captured_input: np.ndarray | None = None      # NCHW or (N, T, D), before act_quant
        self.captured_qinput: np.ndarray | None = None     # after act_quant
        self.captured_grad: np.ndarray | None = None       # (positions, out)

    def parameters(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def _quant_input(self, x):
        xq = self.act_quant(x) if self.act_quant is not None else x
        if self.capture:
            self.captured_input = x
            self.captured_qinput = xq
        return xq

    @property
    def channel_axis(self) -> int:
        raise NotImplementedError

    def input_matrix(self, x: np.ndarray) -> np.ndarray:
        """Lower an input tensor to the (positions, fan_in) matrix the product consumes."""
        raise NotImplementedError

    @property
    def weight_matrix(self) -> np.ndarray:
        return self.weight.reshape(self.weight.shape[0], -1)


class Linear(QuantLayer):
    kind = "linear"

    def forward(self, x):
        if x.shape[-1] != self.weight.shape[1]:
            raise ShapeError(f"{self.name}: input width {x.shape[-1]} != fan-in {self.weight.shape[1]}")
        xq = self._quant_input(x)
        self._shape = xq.shape
        y = matmul(xq.reshape(-1, xq.shape[-1]), self.weight.T)
        if self.bias is not None:
            y += self.bias
        return y.reshape(*xq.shape[:-1], -1)

    def backward(self, dy):
        g = dy.reshape(-1, dy.shape[-1])
        if self.capture_grad:
            self.captured_grad = g.copy()
        return matmul(g, self.weight).reshape(self._shape)

    @property
    def channel_axis(self):
        return -1

    def input_matrix(self, x):
        return x.reshape(-1, x.shape[-1])


class Conv2d(QuantLayer):
    kind = "conv2d"

    def __init__(self, name, weight, bias, stride: int = 1, padding: int = 0):
        super().__init__(name, weight, bias)
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.weight.shape[1]:
            raise ShapeError(f"{self.name}: expected N x {self.weight.shape[1]} x H x W, got {x.shape}")
        xq = self._quant_input(x)
        o, _, kh, kw = self.weight.shape
        n, _, h, w = xq.shape
        oh = conv_output_size(h, kh, self.stride, self.padding)
        ow = conv_output_size(w, kw, self.stride, self.padding)
        self._shape = xq.shape
        cols = im2col(xq, kh, kw, self.stride, self.padding)
        y = matmul(cols, self.weight_matrix.T)
        if self.bias is not None:
            y += self.bias
        return y.reshape(n, oh, ow, o).transpose(0, 3, 1, 2).copy()

    def backward(self, dy):
        o, _, kh, kw = self.weight.shape
        g = dy.transpose(0, 2, 3, 1).reshape(-1, o)
        if self.capture_grad:
            self.captured_grad = g.copy()
        dcols = matmul(g, self.weight_matrix)
        return col2im(dcols, self._shape, kh, kw, self.stride, self.padding)

    @property
    def channel_axis(self):
        return 1

    def input_matrix(self, x):
        _, _, kh, kw = self.weight.shape
        return im2col(x, kh, kw, self.stride, self.padding)


class LayerNorm(Layer):
    kind = "layernorm"

    def __init__(self, name, dim: int, eps: float = 1e-5):
        super().__init__(name)
        self.gamma = np.ones(dim)
        self.beta = np.zeros(dim)
        self.eps = eps

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        self._rstd = 1.0 / np.sqrt(var + self.eps)
        self._xhat = xc * self._rstd
        return self._xhat * self.gamma + self.beta

    def backward(self, dy):
        g = dy * self.gamma
        xh = self._xhat
        return self._rstd * (g - g.mean(axis=-1, keepdims=True) - xh * (g * xh).mean(axis=-1, keepdims=True))


class Activation(Layer):
    """Elementwise nonlinearity: gelu (erf form), relu or sinh."""

    kind = "elementwise-activation"

    def __init__(self, name, fn: str):
        super().__init__(name)
        if fn not in ("gelu", "relu", "sinh"):
            raise UnsupportedLayerError(f"unknown activation {fn!r}")
        self.fn = fn

    def forward(self, x):
        self._x = x
        if self.fn == "gelu":
            return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
        if self.fn == "relu":
            return np.maximum(x, 0.0)
        return np.sinh(x)

    def backward(self, dy):
        x = self._x
        if self.fn == "gelu":
            cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
            pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
            return dy * (cdf + x * pdf)
        if self.fn == "relu":
            return dy * (x > 0)
        return dy * np.cosh(x)


class Softmax(Layer):
    """Row softmax over the last axis with an optional output quantizer (STE)."""

    kind = "softmax"

    def __init__(self, name):
        super().__init__(name)
        self.out_quant: Callable[[np.ndarray], np.ndarray] | None = None

    def forward(self, x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        p = z / z.sum(axis=-1, keepdims=True)
        self._p = p
        return self.out_quant(p) if self.out_quant is not None else p

    def backward(self, dy):
        p = self._p
        return p * (dy - (dy * p).sum(axis=-1, keepdims=True))


class AttentionBlock(Layer):
    """Pre-norm transformer block: x + proj(attn(ln1 x)), then h + fc2(gelu(fc1(ln2 h)))."""

    kind = "attention-block"

    def __init__(self, name, dim: int, heads: int, mlp_ratio: int, rng: np.random.Generator):
        super().__init__(name)
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        hidden = dim * mlp_ratio
        self.ln1 = LayerNorm(f"{name}.ln1", dim)
        self.qkv = Linear(f"{name}.qkv", rng.normal(0, dim**-0.5, (3 * dim, dim)), np.zeros(3 * dim))
        self.softmax = Softmax(f"{name}.softmax")
        self.proj = Linear(f"{name}.proj", rng.normal(0, dim**-0.5, (dim, dim)), np.zeros(dim))
        self.ln2 = LayerNorm(f"{name}.ln2", dim)
        self.fc1 = Linear(f"{name}.fc1", rng.normal(0, dim**-0.5, (hidden, dim)), np.zeros(hidden))
        self.act = Activation(f"{name}.act", "gelu")
        self.fc2 = Linear(f"{name}.fc2", rng.normal(0, hidden**-0.5, (dim, hidden)), np.zeros(dim))

    def children(self):
        return iter((self.ln1, self.qkv, self.softmax, self.proj, self.ln2, self.fc1, self.act, self.fc2))

    def _split(self, t):
        n, T, _ = t.shape
        return t.reshape(n, T, self.heads, -1).transpose(0, 2, 1, 3)

    def forward(self, x):
        n, T, D = x.shape
        dh = D // self.heads
        qkv = self.qkv.forward(self.ln1.forward(x))
        q, k, v = (self._split(qkv[..., i * D:(i + 1) * D]) for i in range(3))
        scale = dh**-0.5
        scores = bmm(q, k.swapaxes(-1, -2)) * scale
        p = self.softmax.forward(scores)
        o = bmm(p, v)
        self._cache = (q, k, v, p, scale)
        h1 = x + self.proj.forward(o.transpose(0, 2, 1, 3).reshape(n, T, D))
        return h1 + self.fc2.forward(self.act.forward(self.fc1.forward(self.ln2.forward(h1))))

    def backward(self, dy):
        q, k, v, p, scale = self._cache
        n, H, T, dh = q.shape
        dh1 = dy + self.ln2.backward(self.fc1.backward(self.act.backward(self.fc2.backward(dy))))
        do = self.proj.backward(dh1).reshape(n, T, H, dh).transpose(0, 2, 1, 3)
        dp = bmm(do, v.swapaxes(-1, -2))
        dv = bmm(p.swapaxes(-1, -2), do)
        ds = self.softmax.backward(dp) * scale
        dq = bmm(ds, k)
        dk = bmm(ds.swapaxes(-1, -2), q)
        merge = lambda t: t.transpose(0, 2, 1, 3).reshape(n, T, H * dh)
        dqkv = np.concatenate([merge(dq), merge(dk), merge(dv)], axis=-1)
        return dh1 + self.ln1.backward(self.qkv.backward(dqkv))


class ToTokens(Layer):
    kind = "reshape"

    def forward(self, x):
        self._shape = x.shape
        n, c, h, w = x.shape
        return x.reshape(n, c, h * w).transpose(0, 2, 1).copy()

    def backward(self, dy):
        n, c, h, w = self._shape
        return dy.transpose(0, 2, 1).reshape(n, c, h, w)


class ToMap(Layer):
    kind = "reshape"

    def __init__(self, name, hw: tuple[int, int]):
        super().__init__(name)
        self.hw = hw

    def forward(self, x):
        n, T, c = x.shape
        return x.transpose(0, 2, 1).reshape(n, c, *self.hw).copy()

    def backward(self, dy):
        n, c, h, w = dy.shape
        return dy.reshape(n, c, h * w).transpose(0, 2, 1)


class DepthHead(Layer):
    """Positive depth from a 1-channel map: offset + softplus(x), squeezed to (N, H, W)."""

    kind = "elementwise-activation"

    def __init__(self, name, offset: float = 0.5):
        super().__init__(name)
        self.offset = offset

    def forward(self, x):
        self._x = x
        return self.offset + np.logaddexp(0.0, x[:, 0])

    def backward(self, dy):
        sig = 0.5 * (1.0 + np.tanh(0.5 * self._x[:, 0]))
        return (dy * sig)[:, None]


@dataclass
class NetworkSpec:
    seed: int = 0
    width: int = 32
    depth: int = 2
    heads: int = 2
    mlp_ratio: int = 2
    image_size: int = 32
    patch: int = 4
    in_channels: int = 3
    decoder_outlier_channels: int = 4
    outlier_gain: float = 3.0
    decoder_gain: float = 0.4
    outlier_fanout: float = 0.3     # dec2 input columns of outlier channels are scaled by this


@dataclass
class ToyNetwork:
    spec: NetworkSpec
    layers: list[Layer] = field(default_factory=list)
    outlier_channels: tuple[int, ...] = ()

    def forward(self, images: np.ndarray) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, d_out: np.ndarray) -> np.ndarray:
        g = d_out
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def modules(self) -> Iterator[Layer]:
        for layer in self.layers:
            yield layer
            yield from layer.children()

    def quantizable(self) -> list[QuantLayer]:
        """Linear/conv layers in execution order."""
        return [m for m in self.modules() if m.kind in QUANTIZABLE]

    def softmaxes(self) -> list[Softmax]:
        return [m for m in self.modules() if m.kind == "softmax"]

    def layer(self, name: str) -> Layer:
        for m in self.modules():
            if m.name == name:
                return m
        raise KeyError(name)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for m in self.modules():
            for k, v in m.parameters().items():
                out[f"{m.name}.{k}"] = v
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for m in self.modules():
            for k, v in m.parameters().items():
                key = f"{m.name}.{k}"
                if key not in state:
                    raise KeyError(f"missing tensor {key}")
                if state[key].shape != v.shape:
                    raise ShapeError(f"{key}: expected {v.shape}, got {state[key].shape}")
                setattr(m, k, np.array(state[key], dtype=np.float64))

    def clear_hooks(self):
        for m in self.quantizable():
            m.act_quant = None
            m.capture = m.capture_grad = False
            m.captured_input = m.captured_qinput = m.captured_grad = None
        for s in self.softmaxes():
            s.out_quant = None


def build_toy_mde(seed: int = 0, width: int = 32, depth: int = 2, decoder_outlier_channels: int = 4,
                  **kw) -> ToyNetwork:
    """Deterministic toy depth network.

    ``decoder_outlier_channels`` rows of the first decoder conv are scaled up;
    the following sinh activation turns the larger pre-activation spread
    into heavy-tailed outliers on those channels.  The matching input
    columns of the next conv are scaled down so the outliers carry signal
    without swamping the depth output.
    """
    spec = NetworkSpec(seed=seed, width=width, depth=depth,
                       decoder_outlier_channels=decoder_outlier_channels, **kw)
    if min(width, depth, spec.heads, spec.image_size, spec.patch) < 1:
        raise ShapeError("network dimensions must be positive")
    if decoder_outlier_channels > width or decoder_outlier_channels < 0:
        raise ShapeError(f"cannot plant {decoder_outlier_channels} outliers in {width} channels")
    rng = np.random.default_rng(seed)
    D, P, C = width, spec.patch, spec.in_channels
    grid = spec.image_size // P
    layers: list[Layer] = [
        Conv2d("patch_embed", rng.normal(0, (C * P * P) ** -0.5, (D, C, P, P)), np.zeros(D), stride=P),
        ToTokens("to_tokens"),
    ]
    for i in range(depth):
        layers.append(AttentionBlock(f"block{i}", D, spec.heads, spec.mlp_ratio, rng))
    layers.append(LayerNorm("norm", D))
    layers.append(ToMap("to_map", (grid, grid)))

    fan = D * 9
    w1 = rng.normal(0, fan**-0.5, (D, D, 3, 3)) * spec.decoder_gain
    outliers = tuple(sorted(rng.choice(D, size=decoder_outlier_channels, replace=False).tolist()))
    for c in outliers:
        w1[c] *= spec.outlier_gain
    c2 = max(D // 2, 1)
    w2 = rng.normal(0, fan**-0.5, (c2, D, 3, 3))
    w2[:, list(outliers)] *= spec.outlier_fanout
    layers += [
        Conv2d("dec1", w1, np.zeros(D), padding=1),
        Activation("dec1.act", "sinh"),
        Conv2d("dec2", w2, np.zeros(c2), padding=1),
        Activation("dec2.act", "gelu"),
        Conv2d("head", rng.normal(0, c2**-0.5, (1, c2, 1, 1)), np.array([1.0])),
        DepthHead("depth"),
    ]
    net = ToyNetwork(spec, layers, outliers)
    for m in net.quantizable():
        m.policy = LayerPolicy(quantize=True, polish=m.name in DECODER_LAYERS)
    return net


DECODER_LAYERS = ("dec1", "dec2", "head")

# non-excess kurtosis separating planted outlier channels from ordinary ones
KURTOSIS_THRESHOLD = 6.5


def synthetic_images(n: int, seed: int, size: int = 32, channels: int = 3) -> np.ndarray:
    """Smooth random scenes: a few oriented sinusoids and Gaussian blobs plus noise."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.empty((n, channels, size, size))
    for i in range(n):
        img = np.zeros((channels, size, size))
        for _ in range(3):
            fx, fy = rng.uniform(-4, 4, 2)
            phase = rng.uniform(0, 2 * np.pi)
            img += rng.normal(0, 1, (channels, 1, 1)) * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
        for _ in range(2):
            cx, cy = rng.uniform(0, 1, 2)
            r = rng.uniform(0.05, 0.3)
            img += rng.normal(0, 1.5, (channels, 1, 1)) * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * r * r))
        out[i] = img + rng.normal(0, 0.1, img.shape)
    return out


def channel_kurtosis(x: np.ndarray, axis: int = 1) -> np.ndarray:
    """Non-excess kurtosis E[(x-mu)^4] / var^2 of every channel."""
    cols = np.moveaxis(x, axis, -1).reshape(-1, x.shape[axis])
    c = cols - cols.mean(axis=0)
    var = (c * c).mean(axis=0)
    return (c**4).mean(axis=0) / np.maximum(var * var, 1e-300)
