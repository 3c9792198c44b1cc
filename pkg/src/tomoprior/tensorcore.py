"""Static-chain networks with hand-written reverse mode.

Only the handful of layers needed by the generator, discriminator and the
corruption surrogate are supported. A :class:`Net` is an ordered list of
:class:`LayerSpec` plus a flat parameter dict keyed ``layer{i}.{name}``.
``forward`` caches what ``backward`` needs; there is no general graph.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

BN_MOMENTUM = 0.9
BN_EPS = 1e-5
INIT_STD = 0.02

# opcode table for the "arch" descriptor tensor
OPCODES = {
    "dense": 1,
    "conv2d": 2,
    "deconv2d": 3,
    "batchnorm": 4,
    "relu": 5,
    "lrelu": 6,
    "tanh": 7,
    "sigmoid": 8,
    "mask_mul": 9,
    "add_shortcut": 10,
    "reshape": 11,
    "flatten": 12,
    "affine": 13,
}
KINDS = {v: k for k, v in OPCODES.items()}
ARCH_WIDTH = 8


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, msg, layer=None):
        super().__init__(msg)
        self.layer = layer


@dataclass
class LayerSpec:
    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    out_pad: int = 0
    shape: tuple = ()
    src: int = 0
    alpha: float = 0.0
    scale: float = 1.0
    shift: float = 0.0
    bias: bool = True

    def __post_init__(self):
        if self.kind not in OPCODES:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in ("conv2d", "deconv2d"):
            if self.kernel not in (3, 5):
                raise ValueError(f"{self.kind}: kernel must be 3 or 5, got {self.kernel}")
            if self.stride not in (1, 2):
                raise ValueError(f"{self.kind}: stride must be 1 or 2, got {self.stride}")
        self.shape = tuple(int(s) for s in self.shape)

    def encode(self) -> tuple[list[int], list[float]]:
        """Return the (int row, float row) pair stored in checkpoints."""
        op = OPCODES[self.kind]
        if self.kind in ("conv2d", "deconv2d"):
            ints = [self.in_ch, self.out_ch, self.kernel, self.stride, self.pad, self.out_pad,
                    0 if self.bias else 1]
        elif self.kind == "dense":
            ints = [self.in_ch, self.out_ch]
        elif self.kind == "batchnorm":
            ints = [self.in_ch]
        elif self.kind in ("mask_mul", "reshape"):
            ints = list(self.shape)
        elif self.kind == "add_shortcut":
            ints = [self.src]
        else:
            ints = []
        row = [op] + ints
        row += [0] * (ARCH_WIDTH - len(row))
        if self.kind == "lrelu":
            floats = [self.alpha, 0.0]
        elif self.kind == "affine":
            floats = [self.scale, self.shift]
        else:
            floats = [0.0, 0.0]
        return row, floats

    @classmethod
    def decode(cls, row, floats) -> "LayerSpec":
        kind = KINDS.get(int(row[0]))
        if kind is None:
            raise ValueError(f"unknown layer opcode {int(row[0])}")
        a = [int(v) for v in row[1:]]
        if kind in ("conv2d", "deconv2d"):
            return cls(kind, in_ch=a[0], out_ch=a[1], kernel=a[2], stride=a[3], pad=a[4], out_pad=a[5],
                       bias=a[6] == 0)
        if kind == "dense":
            return cls(kind, in_ch=a[0], out_ch=a[1])
        if kind == "batchnorm":
            return cls(kind, in_ch=a[0])
        if kind in ("mask_mul", "reshape"):
            return cls(kind, shape=tuple(v for v in a if v))
        if kind == "add_shortcut":
            return cls(kind, src=a[0])
        if kind == "lrelu":
            return cls(kind, alpha=float(floats[0]))
        if kind == "affine":
            return cls(kind, scale=float(floats[0]), shift=float(floats[1]))
        return cls(kind)


# -- layer constructors -----------------------------------------------------

def dense(n_in, n_out):
    return LayerSpec("dense", in_ch=n_in, out_ch=n_out)


def conv2d(in_ch, out_ch, kernel=3, stride=1, pad=None, bias=True):
    return LayerSpec("conv2d", in_ch=in_ch, out_ch=out_ch, kernel=kernel, stride=stride,
                     pad=kernel // 2 if pad is None else pad, bias=bias)


def deconv2d(in_ch, out_ch, kernel=5, stride=2, pad=None, out_pad=None, bias=True):
    if out_pad is None:
        out_pad = stride - 1
    return LayerSpec("deconv2d", in_ch=in_ch, out_ch=out_ch, kernel=kernel, stride=stride,
                     pad=kernel // 2 if pad is None else pad, out_pad=out_pad, bias=bias)


def batchnorm(channels):
    return LayerSpec("batchnorm", in_ch=channels)


def relu():
    return LayerSpec("relu")


def lrelu(alpha=0.2):
    return LayerSpec("lrelu", alpha=alpha)


def tanh():
    return LayerSpec("tanh")


def sigmoid():
    return LayerSpec("sigmoid")


def mask_mul(shape):
    return LayerSpec("mask_mul", shape=shape)


def add_shortcut(src=0):
    return LayerSpec("add_shortcut", src=src)


def reshape(shape):
    return LayerSpec("reshape", shape=shape)


def flatten():
    return LayerSpec("flatten")


def affine(scale, shift):
    """Fixed (non-learned) elementwise ``scale * x + shift``."""
    return LayerSpec("affine", scale=scale, shift=shift)


def _rows_matmul(a, b):
    """``a @ b`` whose rows do not depend on how many rows ``a`` has.

    A single-row product goes through BLAS gemv, which rounds differently
    from gemm; duplicating the row keeps batched and one-at-a-time
    evaluation bit-identical.
    """
    if a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


# -- convolution kernels ----------------------------------------------------

def _windows(xp, k, stride, ho, wo):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _im2col(x, k, stride, pad):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = _windows(xp, k, stride, ho, wo)  # n c ho wo k k
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def _col2im(cols, x_shape, k, stride, pad, ho, wo):
    n, c, h, w = x_shape
    hp, wp = h + 2 * pad, w + 2 * pad
    dxp = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)  # n c k k ho wo
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += cols[:, :, i, j]
    return dxp[:, :, pad : pad + h, pad : pad + w]


def conv_forward(x, weight, stride, pad):
    """Cross-correlation, weight shaped (out, in, k, k)."""
    o, _, k, _ = weight.shape
    n = x.shape[0]
    cols, ho, wo = _im2col(x, k, stride, pad)
    y = cols @ weight.reshape(o, -1).T
    return np.ascontiguousarray(y.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)), cols


def conv_backward_input(gy, weight, x_shape, stride, pad):
    o, c, k, _ = weight.shape
    n, _, ho, wo = gy.shape
    g = gy.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    dcols = g @ weight.reshape(o, -1)
    return _col2im(dcols, x_shape, k, stride, pad, ho, wo)


def conv_backward_weight(gy, cols, w_shape):
    o = w_shape[0]
    g = gy.transpose(0, 2, 3, 1).reshape(-1, o)
    return (g.T @ cols).reshape(w_shape)


# -- the network ------------------------------------------------------------

@dataclass
class Net:
    """Ordered layer chain with parameters, batch-norm buffers and optimizer state."""

    layers: list
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    opt_state: dict = field(default_factory=dict)
    dtype: type = np.float32

    def __post_init__(self):
        self._cache = None
        self._train = False

    @classmethod
    def build(cls, layers, seed=0, dtype=np.float32):
        net = cls(list(layers), dtype=dtype)
        net.init_params(np.random.default_rng(seed))
        return net

    def init_params(self, rng):
        """Gaussian(0, 0.02) weights, zero biases, unit masks and BN scales."""
        p, b = {}, {}
        for i, spec in enumerate(self.layers):
            key = f"layer{i}"
            if spec.kind == "dense":
                p[f"{key}.weight"] = rng.normal(0.0, INIT_STD, (spec.out_ch, spec.in_ch))
                p[f"{key}.bias"] = np.zeros(spec.out_ch)
            elif spec.kind == "conv2d":
                p[f"{key}.weight"] = rng.normal(0.0, INIT_STD, (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel))
                if spec.bias:
                    p[f"{key}.bias"] = np.zeros(spec.out_ch)
            elif spec.kind == "deconv2d":
                p[f"{key}.weight"] = rng.normal(0.0, INIT_STD, (spec.in_ch, spec.out_ch, spec.kernel, spec.kernel))
                if spec.bias:
                    p[f"{key}.bias"] = np.zeros(spec.out_ch)
            elif spec.kind == "batchnorm":
                p[f"{key}.gamma"] = np.ones(spec.in_ch)
                p[f"{key}.beta"] = np.zeros(spec.in_ch)
                b[f"{key}.running_mean"] = np.zeros(spec.in_ch)
                b[f"{key}.running_var"] = np.ones(spec.in_ch)
            elif spec.kind == "mask_mul":
                p[f"{key}.mask"] = np.ones(spec.shape)
        self.params = {k: v.astype(self.dtype) for k, v in p.items()}
        self.buffers = {k: v.astype(self.dtype) for k, v in b.items()}
        self.opt_state = {}

    def expected_param_shapes(self):
        shapes = {}
        for i, spec in enumerate(self.layers):
            key = f"layer{i}"
            if spec.kind == "dense":
                shapes[f"{key}.weight"] = (spec.out_ch, spec.in_ch)
                shapes[f"{key}.bias"] = (spec.out_ch,)
            elif spec.kind == "conv2d":
                shapes[f"{key}.weight"] = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
                if spec.bias:
                    shapes[f"{key}.bias"] = (spec.out_ch,)
            elif spec.kind == "deconv2d":
                shapes[f"{key}.weight"] = (spec.in_ch, spec.out_ch, spec.kernel, spec.kernel)
                if spec.bias:
                    shapes[f"{key}.bias"] = (spec.out_ch,)
            elif spec.kind == "batchnorm":
                shapes[f"{key}.gamma"] = (spec.in_ch,)
                shapes[f"{key}.beta"] = (spec.in_ch,)
            elif spec.kind == "mask_mul":
                shapes[f"{key}.mask"] = spec.shape
        return shapes

    def check_params(self):
        want = self.expected_param_shapes()
        if set(want) != set(self.params):
            raise ShapeError(f"parameter keys {sorted(self.params)} do not match architecture {sorted(want)}")
        for k, s in want.items():
            if self.params[k].shape != tuple(s):
                raise ShapeError(f"{k}: expected shape {tuple(s)}, got {self.params[k].shape}")

    def astype(self, dtype) -> "Net":
        """Copy of the net in another float precision (64-bit is for gradient tests)."""
        net = Net(list(self.layers), dtype=dtype)
        net.params = {k: v.astype(dtype) for k, v in self.params.items()}
        net.buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return net

    def copy(self) -> "Net":
        net = Net(list(self.layers), dtype=self.dtype)
        net.params = {k: v.copy() for k, v in self.params.items()}
        net.buffers = {k: v.copy() for k, v in self.buffers.items()}
        net.opt_state = copy.deepcopy(self.opt_state)
        return net

    def n_params(self):
        return sum(v.size for v in self.params.values())

    # forward -------------------------------------------------------------

    def __call__(self, x, train=False):
        return self.forward(x, train)

    def forward(self, x, train=False):
        x = np.asarray(x)
        if x.dtype != self.dtype:
            x = x.astype(self.dtype)
        self._train = bool(train)
        inputs, caches = [], []
        for i, spec in enumerate(self.layers):
            inputs.append(x)
            x, c = self._layer_forward(i, spec, x, inputs)
            if not np.isfinite(x).all():
                self._cache = None
                raise NonFiniteError(f"non-finite activation after layer {i} ({spec.kind})", layer=i)
            caches.append(c)
        self._cache = (inputs, caches, x.shape)
        return x

    def _check(self, i, spec, x, ndim, dims=None):
        if x.ndim != ndim or (dims is not None and tuple(x.shape[1:1 + len(dims)]) != tuple(dims)):
            want = ("N",) + tuple(dims or ())
            raise ShapeError(f"layer {i} ({spec.kind}): expected input {want} with {ndim} dims, got {x.shape}")

    def _layer_forward(self, i, spec, x, inputs):
        p = self.params
        key = f"layer{i}"
        kind = spec.kind
        if kind == "dense":
            self._check(i, spec, x, 2, (spec.in_ch,))
            return _rows_matmul(x, p[f"{key}.weight"].T) + p[f"{key}.bias"], None
        if kind == "conv2d":
            self._check(i, spec, x, 4, (spec.in_ch,))
            y, cols = conv_forward(x, p[f"{key}.weight"], spec.stride, spec.pad)
            if spec.bias:
                y += p[f"{key}.bias"][None, :, None, None]
            return y, cols
        if kind == "deconv2d":
            self._check(i, spec, x, 4, (spec.in_ch,))
            n, _, h, w = x.shape
            k, s = spec.kernel, spec.stride
            ho = (h - 1) * s - 2 * spec.pad + k + spec.out_pad
            wo = (w - 1) * s - 2 * spec.pad + k + spec.out_pad
            y = conv_backward_input(x, p[f"{key}.weight"], (n, spec.out_ch, ho, wo), s, spec.pad)
            if spec.bias:
                y += p[f"{key}.bias"][None, :, None, None]
            return y, None
        if kind == "batchnorm":
            if x.ndim not in (2, 4) or x.shape[1] != spec.in_ch:
                raise ShapeError(f"layer {i} (batchnorm): expected (N, {spec.in_ch}, ...), got {x.shape}")
            axes = (0,) if x.ndim == 2 else (0, 2, 3)
            bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
            gamma = p[f"{key}.gamma"].reshape(bshape)
            beta = p[f"{key}.beta"].reshape(bshape)
            if self._train:
                mean = x.mean(axis=axes)
                var = x.var(axis=axes)
                rm, rv = f"{key}.running_mean", f"{key}.running_var"
                self.buffers[rm] = (BN_MOMENTUM * self.buffers[rm] + (1 - BN_MOMENTUM) * mean).astype(self.dtype)
                self.buffers[rv] = (BN_MOMENTUM * self.buffers[rv] + (1 - BN_MOMENTUM) * var).astype(self.dtype)
            else:
                mean = self.buffers[f"{key}.running_mean"]
                var = self.buffers[f"{key}.running_var"]
            inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(self.dtype).reshape(bshape)
            xhat = (x - mean.reshape(bshape)) * inv_std
            return gamma * xhat + beta, (xhat, inv_std, axes, bshape)
        if kind == "relu":
            return np.maximum(x, 0), None
        if kind == "lrelu":
            return np.where(x > 0, x, x * self.dtype(spec.alpha)), None
        if kind == "tanh":
            return np.tanh(x), None
        if kind == "sigmoid":
            y = np.empty_like(x)
            pos = x >= 0
            y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            y[~pos] = ex / (1.0 + ex)
            return y, None
        if kind == "mask_mul":
            self._check(i, spec, x, 1 + len(spec.shape), spec.shape)
            return x * p[f"{key}.mask"], None
        if kind == "add_shortcut":
            if not 0 <= spec.src <= i:
                raise ShapeError(f"layer {i} (add_shortcut): source layer {spec.src} out of range")
            other = inputs[spec.src]
            if other.shape != x.shape:
                raise ShapeError(f"layer {i} (add_shortcut): shape {x.shape} vs shortcut {other.shape}")
            return x + other, None
        if kind == "reshape":
            if int(np.prod(x.shape[1:])) != int(np.prod(spec.shape)):
                raise ShapeError(f"layer {i} (reshape): cannot reshape {x.shape} to (N, {spec.shape})")
            return x.reshape((x.shape[0],) + spec.shape), None
        if kind == "flatten":
            return x.reshape(x.shape[0], -1), None
        if kind == "affine":
            return x * self.dtype(spec.scale) + self.dtype(spec.shift), None
        raise ValueError(kind)

    # backward ------------------------------------------------------------

    def backward(self, grad, param_grads=True):
        """Reverse-mode pass over the cached forward.

        Returns ``(grad_input, grads)`` where ``grads`` is keyed like
        ``params`` (empty when ``param_grads`` is False).
        """
        if self._cache is None:
            raise RuntimeError("backward called without a cached forward pass")
        inputs, caches, out_shape = self._cache
        g = np.asarray(grad, dtype=self.dtype)
        if g.shape != out_shape:
            raise ShapeError(f"upstream gradient shape {g.shape} does not match output {out_shape}")
        grads = {}
        pending = {}
        for i in range(len(self.layers) - 1, -1, -1):
            g = self._layer_backward(i, self.layers[i], g, inputs, caches[i], grads, pending, param_grads)
            if i in pending:
                g = g + pending.pop(i)
        return g, grads

    def _layer_backward(self, i, spec, g, inputs, cache, grads, pending, param_grads):
        p = self.params
        key = f"layer{i}"
        x = inputs[i]
        kind = spec.kind
        if kind == "dense":
            if param_grads:
                grads[f"{key}.weight"] = g.T @ x
                grads[f"{key}.bias"] = g.sum(axis=0)
            return _rows_matmul(g, p[f"{key}.weight"])
        if kind == "conv2d":
            w = p[f"{key}.weight"]
            if param_grads:
                grads[f"{key}.weight"] = conv_backward_weight(g, cache, w.shape)
                if spec.bias:
                    grads[f"{key}.bias"] = g.sum(axis=(0, 2, 3))
            return conv_backward_input(g, w, x.shape, spec.stride, spec.pad)
        if kind == "deconv2d":
            w = p[f"{key}.weight"]
            gx, gcols = conv_forward(g, w, spec.stride, spec.pad)
            if param_grads:
                grads[f"{key}.weight"] = conv_backward_weight(x, gcols, w.shape)
                if spec.bias:
                    grads[f"{key}.bias"] = g.sum(axis=(0, 2, 3))
            return gx
        if kind == "batchnorm":
            xhat, inv_std, axes, bshape = cache
            gamma = p[f"{key}.gamma"].reshape(bshape)
            if param_grads:
                grads[f"{key}.gamma"] = (g * xhat).sum(axis=axes)
                grads[f"{key}.beta"] = g.sum(axis=axes)
            if not self._train:
                return g * gamma * inv_std
            m = g.size // g.shape[1]
            gsum = g.sum(axis=axes).reshape(bshape)
            gxs = (g * xhat).sum(axis=axes).reshape(bshape)
            return (gamma * inv_std / m) * (m * g - gsum - xhat * gxs)
        if kind == "relu":
            return g * (x > 0)
        if kind == "lrelu":
            return np.where(x > 0, g, g * self.dtype(spec.alpha))
        if kind == "tanh":
            out = self._output_of(i, inputs)
            return g * (1 - out * out)
        if kind == "sigmoid":
            out = self._output_of(i, inputs)
            return g * out * (1 - out)
        if kind == "mask_mul":
            mask = p[f"{key}.mask"]
            if param_grads:
                grads[f"{key}.mask"] = (g * x).sum(axis=0)
            return g * mask
        if kind == "add_shortcut":
            pending[spec.src] = pending.get(spec.src, 0) + g
            return g
        if kind in ("reshape", "flatten"):
            return g.reshape(x.shape)
        if kind == "affine":
            return g * self.dtype(spec.scale)
        raise ValueError(kind)

    def _output_of(self, i, inputs):
        if i + 1 < len(inputs):
            return inputs[i + 1]
        # last layer: recompute from input (cheap elementwise)
        y, _ = self._layer_forward(i, self.layers[i], inputs[i], inputs)
        return y

    # optimizer ---------------------------------------------------------

    def adam_step(self, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        adam_step(self.params, grads, self.opt_state, lr, beta1, beta2, eps)

    def sgd_step(self, grads, lr):
        sgd_step(self.params, grads, lr)


def _check_keys(params, grads):
    if set(params) != set(grads):
        missing = sorted(set(params) - set(grads))
        extra = sorted(set(grads) - set(params))
        raise KeyError(f"gradient keys do not match parameters (missing {missing}, unexpected {extra})")


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update of ``params``; ``state`` holds moments and the step count."""
    _check_keys(params, grads)
    t = state.get("t", 0) + 1
    state["t"] = t
    m_all = state.setdefault("m", {})
    v_all = state.setdefault("v", {})
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=p.dtype)
        if k not in m_all:
            m_all[k] = np.zeros_like(p)
            v_all[k] = np.zeros_like(p)
        m, v = m_all[k], v_all[k]
        m *= p.dtype.type(beta1)
        m += p.dtype.type(1 - beta1) * g
        v *= p.dtype.type(beta2)
        v += p.dtype.type(1 - beta2) * (g * g)
        step = (m / p.dtype.type(c1)) / (np.sqrt(v / p.dtype.type(c2)) + p.dtype.type(eps))
        p -= p.dtype.type(lr) * step


def sgd_step(params, grads, lr):
    _check_keys(params, grads)
    for k, p in params.items():
        p -= p.dtype.type(lr) * np.asarray(grads[k], dtype=p.dtype)
