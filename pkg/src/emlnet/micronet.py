"""A small convolutional toolkit in numpy: forward, backward and SGD.

Activations are float64 arrays shaped ``(batch, channels, height, width)``;
a 3-D ``(channels, height, width)`` array is accepted wherever a batch is
and the result keeps the same rank.  The layer set is deliberately closed:
conv2d, relu, 2x2 average pooling, bilinear resize and channel concat.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from emlnet.core import NonFiniteGradient, OddDimension, ShapeMismatch


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected a 3-D or 4-D feature stack, got shape {x.shape}")
    return x, False


def _restore(x, squeezed):
    return x[0] if squeezed else x


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvLayer:
    """Cross-correlation layer; ``weight`` is ``(out, in, kh, kw)``."""

    weight: np.ndarray
    bias: np.ndarray = None
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def n_params(self):
        n = self.weight.size
        if self.bias is not None:
            n += self.bias.size
        return n


def conv_output_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _im2col(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    B, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    return cols, Ho, Wo


def conv2d_forward(x, layer):
    x, squeezed = _as_batch(x)
    O, C, kh, kw = layer.weight.shape
    if x.shape[1] != C:
        raise ShapeMismatch(f"layer expects {C} input channels, got {x.shape[1]}")
    if x.shape[2] + 2 * layer.padding < kh or x.shape[3] + 2 * layer.padding < kw:
        raise ShapeMismatch("kernel larger than padded input")
    B = x.shape[0]
    cols, Ho, Wo = _im2col(x, kh, kw, layer.stride, layer.padding)
    out = cols @ layer.weight.reshape(O, -1).T
    if layer.bias is not None:
        out += layer.bias
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    return _restore(np.ascontiguousarray(out), squeezed)


def conv2d_backward(x, layer, grad_out):
    """Gradients of ``conv2d_forward(x, layer)`` w.r.t. input, weight, bias.

    ``grad_bias`` is None for a bias-free layer.
    """
    x, squeezed = _as_batch(x)
    grad_out, _ = _as_batch(grad_out)
    O, C, kh, kw = layer.weight.shape
    s, p = layer.stride, layer.padding
    B, _, H, W = x.shape
    cols, Ho, Wo = _im2col(x, kh, kw, s, p)
    if grad_out.shape != (B, O, Ho, Wo):
        raise ShapeMismatch(f"upstream gradient shape {grad_out.shape} != {(B, O, Ho, Wo)}")
    g = grad_out.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, O)
    grad_w = (g.T @ cols).reshape(layer.weight.shape)
    grad_b = g.sum(axis=0) if layer.bias is not None else None

    dcols = (g @ layer.weight.reshape(O, -1)).reshape(B, Ho, Wo, C, kh, kw)
    dpad = np.zeros((B, C, H + 2 * p, W + 2 * p))
    for i in range(kh):
        for j in range(kw):
            dpad[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = dpad[:, :, p : p + H, p : p + W] if p else dpad
    return _restore(np.ascontiguousarray(grad_x), squeezed), grad_w, grad_b


def kaiming_uniform(rng, shape):
    """He-uniform draw for ReLU networks: U(-b, b), ``b = sqrt(6 / fan_in)``."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# elementwise / pooling / resize / concat
# ---------------------------------------------------------------------------


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out):
    return np.where(np.asarray(x) > 0, grad_out, 0.0)


def avg_pool2(x):
    """Non-overlapping 2x2 mean pooling."""
    x, squeezed = _as_batch(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise OddDimension(f"avg_pool2 needs even height and width, got {H}x{W}")
    out = x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))
    return _restore(out, squeezed)


def avg_pool2_backward(grad_out):
    g, squeezed = _as_batch(grad_out)
    out = np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4.0
    return _restore(out, squeezed)


@lru_cache(maxsize=256)
def _resize_matrix(n_in, n_out):
    """Row-stochastic ``(n_out, n_in)`` linear-interpolation matrix.

    Half-pixel centers: output sample ``i`` reads source coordinate
    ``(i + 0.5) * n_in / n_out - 0.5``, clamped to the valid range.
    """
    m = np.zeros((n_out, n_in))
    if n_in == n_out:
        np.fill_diagonal(m, 1.0)
    else:
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        rows = np.arange(n_out)
        np.add.at(m, (rows, lo), 1.0 - frac)
        np.add.at(m, (rows, hi), frac)
    m.setflags(write=False)
    return m


def resize_matrix(n_in, n_out):
    if n_in < 1 or n_out < 1:
        raise ShapeMismatch("resize dimensions must be >= 1")
    return _resize_matrix(int(n_in), int(n_out))


def bilinear_resize(x, target_w, target_h):
    """Bilinear resize of the last two axes of ``x`` to ``(target_h, target_w)``.

    Works on any array with ndim >= 2 (a plain map, a stack, or a batch).
    """
    x = np.asarray(x, dtype=np.float64)
    Ry = resize_matrix(x.shape[-2], target_h)
    Rx = resize_matrix(x.shape[-1], target_w)
    return Ry @ x @ Rx.T


def bilinear_resize_backward(grad_out, in_w, in_h):
    """Transpose of :func:`bilinear_resize` applied to ``grad_out``."""
    g = np.asarray(grad_out, dtype=np.float64)
    Ry = resize_matrix(in_h, g.shape[-2])
    Rx = resize_matrix(in_w, g.shape[-1])
    return Ry.T @ g @ Rx


def concat_channels(stacks):
    """Stack along the channel axis; all inputs share spatial size."""
    if not stacks:
        raise ShapeMismatch("nothing to concatenate")
    batched = [_as_batch(s) for s in stacks]
    squeezed = batched[0][1]
    arrays = [b[0] for b in batched]
    shapes = {(a.shape[0],) + a.shape[2:] for a in arrays}
    if len(shapes) != 1 or any(b[1] != squeezed for b in batched):
        raise ShapeMismatch(f"cannot concatenate stacks of shapes {[a.shape for a in arrays]}")
    return _restore(np.concatenate(arrays, axis=1), squeezed)


def split_channels(x, sizes):
    """Inverse of :func:`concat_channels` given the per-input channel counts."""
    x, squeezed = _as_batch(x)
    if sum(sizes) != x.shape[1]:
        raise ShapeMismatch(f"channel sizes {sizes} do not sum to {x.shape[1]}")
    parts = np.split(x, np.cumsum(sizes)[:-1], axis=1)
    return [_restore(p, squeezed) for p in parts]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class SgdConfig:
    """Classical momentum SGD with weight decay folded into the gradient.

    ``schedule`` holds ``(epoch, multiplier)`` pairs with 0-based epochs; the
    rate at epoch ``e`` is the base rate times every multiplier whose epoch
    is <= ``e``.
    """

    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    schedule: tuple = field(default_factory=tuple)

    def __post_init__(self):
        self.schedule = tuple((int(e), float(m)) for e, m in self.schedule)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.weight_decay >= 0:
            raise ValueError("weight_decay must be >= 0")

    def lr_at(self, epoch):
        lr = self.learning_rate
        for e, m in self.schedule:
            if epoch >= e:
                lr *= m
        return lr


def sgd_step(params, grads, state, cfg, lr=None):
    """One in-place update of every array in ``params``.

    ``v = momentum * v + (grad + weight_decay * param)``;
    ``param -= lr * v``.  ``state`` maps names to velocities and is created
    lazily.  Returns ``(params, state)``.
    """
    lr = cfg.learning_rate if lr is None else lr
    for name, g in grads.items():
        if name not in params:
            raise ShapeMismatch(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ShapeMismatch(f"{name}: gradient shape {g.shape} != {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for {name}")
    for name, g in grads.items():
        p = params[name]
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p)
        v = cfg.momentum * v + (g + cfg.weight_decay * p)
        state[name] = v
        if lr != 0:
            p -= lr * v
    return params, state


# ---------------------------------------------------------------------------
# backbone
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TinyBackbone:
    """Stages of ``(conv3x3 -> relu) * convs_per_stage`` followed by avg_pool2.

    ``taps`` lists the stages whose pooled outputs are exported as
    multi-level features (default: every stage).  Parameters live outside
    the object, in a ``{name: array}`` dict, so the same architecture can be
    paired with many weight sets.
    """

    in_channels: int = 3
    channels: tuple = (16, 32, 64)
    convs_per_stage: int = 2
    kernel: int = 3
    taps: tuple = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        taps = tuple(range(len(self.channels))) if self.taps is None else tuple(int(t) for t in self.taps)
        if list(taps) != sorted(set(taps)) or not taps or taps[-1] >= len(self.channels) or taps[0] < 0:
            raise ValueError(f"taps must be increasing stage indices, got {taps}")
        object.__setattr__(self, "taps", taps)

    @property
    def n_stages(self):
        return len(self.channels)

    @property
    def out_channels(self):
        return self.channels[-1]

    @property
    def tap_channels(self):
        return [self.channels[t] for t in self.taps]

    def descriptor(self):
        return {
            "type": "TinyBackbone",
            "in_channels": self.in_channels,
            "channels": list(self.channels),
            "convs_per_stage": self.convs_per_stage,
            "kernel": self.kernel,
            "taps": list(self.taps),
        }

    @classmethod
    def from_descriptor(cls, d):
        return cls(
            in_channels=d["in_channels"],
            channels=tuple(d["channels"]),
            convs_per_stage=d["convs_per_stage"],
            kernel=d["kernel"],
            taps=tuple(d["taps"]),
        )

    def tap_sizes(self, width, height):
        """Spatial ``(w, h)`` of every tap for a given input size."""
        sizes = []
        for s in range(self.n_stages):
            if width % 2 or height % 2:
                raise OddDimension(f"stage {s} input {width}x{height} is not poolable")
            width, height = width // 2, height // 2
            if s in self.taps:
                sizes.append((width, height))
        return sizes

    def param_shapes(self):
        shapes = {}
        c_in = self.in_channels
        for s, c_out in enumerate(self.channels):
            for j in range(self.convs_per_stage):
                shapes[f"stage{s}.conv{j}.weight"] = (c_out, c_in, self.kernel, self.kernel)
                shapes[f"stage{s}.conv{j}.bias"] = (c_out,)
                c_in = c_out
        return shapes

    def init_params(self, rng):
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".weight"):
                params[name] = kaiming_uniform(rng, shape)
            else:
                params[name] = np.zeros(shape)
        return params

    def _layer(self, params, s, j):
        return ConvLayer(
            params[f"stage{s}.conv{j}.weight"],
            params[f"stage{s}.conv{j}.bias"],
            stride=1,
            padding=self.kernel // 2,
        )

    def forward(self, params, x):
        """Run the backbone on a batch.

        Returns ``(final, taps, cache)``: the last stage's pooled output, the
        list of tap outputs ordered by depth, and what :meth:`backward` needs.
        """
        h, squeezed = _as_batch(x)
        if h.shape[1] != self.in_channels:
            raise ShapeMismatch(f"backbone expects {self.in_channels} channels, got {h.shape[1]}")
        cache = []
        taps = []
        for s in range(self.n_stages):
            stage = []
            for j in range(self.convs_per_stage):
                z = conv2d_forward(h, self._layer(params, s, j))
                stage.append((h, z))
                h = relu(z)
            h = avg_pool2(h)
            cache.append(stage)
            if s in self.taps:
                taps.append(h)
        if squeezed:
            return h[0], [t[0] for t in taps], cache
        return h, taps, cache

    def backward(self, params, cache, grad_final=None, grad_taps=None):
        """Parameter gradients given upstream gradients on the outputs.

        ``grad_final`` flows into the last stage's output, ``grad_taps`` (one
        entry per tap, None allowed) into the tap outputs.  Returns a dict
        keyed like ``params``.
        """
        grads = {}
        tap_grad = dict(zip(self.taps, grad_taps or [None] * len(self.taps)))
        g = None if grad_final is None else _as_batch(grad_final)[0]
        for s in reversed(range(self.n_stages)):
            tg = tap_grad.get(s)
            if tg is not None:
                tg = _as_batch(tg)[0]
                g = tg if g is None else g + tg
            if g is None:
                for j in range(self.convs_per_stage):
                    grads[f"stage{s}.conv{j}.weight"] = np.zeros(params[f"stage{s}.conv{j}.weight"].shape)
                    grads[f"stage{s}.conv{j}.bias"] = np.zeros(params[f"stage{s}.conv{j}.bias"].shape)
                continue
            g = avg_pool2_backward(g)
            for j in reversed(range(self.convs_per_stage)):
                h_in, z = cache[s][j]
                g = relu_backward(z, g)
                g, gw, gb = conv2d_backward(h_in, self._layer(params, s, j), g)
                grads[f"stage{s}.conv{j}.weight"] = gw
                grads[f"stage{s}.conv{j}.bias"] = gb
        return {name: grads[name] for name in params if name in grads}
