"""Minimal numpy network engine for the classifier, discriminator and generator.

Every conv layer uses kernel 4, stride 2, padding 1, so it halves (or, for
the transposed variant, doubles) the spatial side. Layers return their own
cache from ``forward`` and can produce weight gradients either summed over the
batch or kept per sample, which is what per-sample clipping needs.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import mechanisms as mech
from .accountant import agg_sensitivity

KERNEL = 4
STRIDE = 2
PAD = 1
LEAKY_SLOPE = 0.2
INIT_STD = "he"
BCE_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class FrozenGroupError(RuntimeError):
    pass


@dataclass(frozen=True)
class NetConfig:
    """Layout ``C{x1}-C{x2}-C{x3}`` plus layer widths.

    ``filters`` lists the output channels of every conv layer of D in order,
    so ``len(filters) == sum(layout)``. ``x3 == 0`` stands for the missing
    conv3* block.
    """

    layout: tuple[int, int, int] = (1, 1, 1)
    filters: tuple[int, ...] = (8, 8, 8)
    fc_width: int = 32
    latent_dim: int = 100
    label_embedding_dim: int = 10
    num_classes: int = 2
    activation: str = "leaky_relu"
    side: int = 16
    channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layout", tuple(int(v) for v in self.layout))
        object.__setattr__(self, "filters", tuple(int(v) for v in self.filters))
        x1, x2, x3 = self.layout
        if x1 < 1 or x2 < 1 or x3 < 0:
            raise ShapeError(f"layout needs x1 >= 1, x2 >= 1, x3 >= 0; got {self.layout}")
        if len(self.filters) != sum(self.layout):
            raise ShapeError(
                f"{len(self.filters)} filter counts for {sum(self.layout)} conv layers"
            )
        if any(k < 1 for k in self.filters):
            raise ShapeError("filter counts must be positive")
        if self.side % 2 ** self.n_conv:
            raise ShapeError(f"side {self.side} not divisible by 2**{self.n_conv}")
        if self.activation not in ("leaky_relu", "tanh"):
            raise ShapeError(f"unknown activation {self.activation!r}")
        if self.num_classes < 2 or self.channels < 1 or self.fc_width < 1:
            raise ShapeError("num_classes >= 2, channels >= 1, fc_width >= 1 required")

    @property
    def n_conv(self) -> int:
        return sum(self.layout)

    @property
    def n_pre(self) -> int:
        return self.layout[0] + self.layout[1]

    @property
    def agg_maps(self) -> int:
        return self.filters[self.n_pre - 1]

    @property
    def agg_side(self) -> int:
        return self.side // 2**self.n_pre

    @property
    def agg_sensitivity(self) -> float:
        return agg_sensitivity(self.agg_maps, self.agg_side)

    def side_after(self, j: int) -> int:
        return self.side // 2**j

    def group_of_conv(self, j: int) -> str:
        x1, x2, _ = self.layout
        if j < x1:
            return "conv1"
        if j < x1 + x2:
            return "conv2"
        return "conv3"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# parameters


class ModelParams:
    """Named parameter groups, each one flat float64 vector.

    Individual tensors are views into their group's vector, so a DPSGD update
    on a group is a single vector operation.
    """

    def __init__(self, entries: Sequence[tuple[str, str, tuple[int, ...]]]):
        self.index: dict[str, tuple[str, int, tuple[int, ...]]] = {}
        sizes: dict[str, int] = {}
        for group, name, shape in entries:
            if name in self.index:
                raise ValueError(f"duplicate parameter {name}")
            off = sizes.get(group, 0)
            self.index[name] = (group, off, tuple(shape))
            sizes[group] = off + int(np.prod(shape))
        self.groups: dict[str, np.ndarray] = {g: np.zeros(n) for g, n in sizes.items()}
        self.frozen: set[str] = set()

    def __getitem__(self, name: str) -> np.ndarray:
        group, off, shape = self.index[name]
        size = int(np.prod(shape))
        return self.groups[group][off : off + size].reshape(shape)

    def __contains__(self, name: str) -> bool:
        return name in self.index

    def names(self, group: str | None = None) -> list[str]:
        return [n for n, (g, _, _) in self.index.items() if group is None or g == group]

    def group_of(self, name: str) -> str:
        return self.index[name][0]

    def vector(self, group: str) -> np.ndarray:
        return self.groups[group]

    def set_vector(self, group: str, value: np.ndarray) -> None:
        if group in self.frozen:
            raise FrozenGroupError(f"group {group!r} is frozen")
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.groups[group].shape:
            raise ShapeError(f"group {group!r} expects {self.groups[group].shape}")
        self.groups[group][...] = value

    def freeze(self, group: str) -> None:
        self.frozen.add(group)

    def flatten(self, group: str, grads: dict, per_sample: bool = False) -> np.ndarray:
        """Stack gradients of one group into a vector, or (n, P) if per sample."""
        parts = []
        for name in self.names(group):
            g = grads.get(name)
            if g is None:
                raise KeyError(f"no gradient for {name}")
            parts.append(g.reshape(g.shape[0], -1) if per_sample else g.reshape(-1))
        return np.concatenate(parts, axis=1 if per_sample else 0)

    def copy(self) -> "ModelParams":
        out = ModelParams.__new__(ModelParams)
        out.index = dict(self.index)
        out.groups = {g: v.copy() for g, v in self.groups.items()}
        out.frozen = set(self.frozen)
        return out

    def init_normal(self, rng: np.random.Generator, groups=None, std: float | str = INIT_STD):
        """Weights ~ N(0, std^2), biases zero. ``std="he"`` uses sqrt(2 / fan_in)."""
        for name in self.names():
            group = self.group_of(name)
            if groups is not None and group not in groups:
                continue
            if group in self.frozen:
                raise FrozenGroupError(f"group {group!r} is frozen")
            view = self[name]
            if name.endswith(".b"):
                view[...] = 0.0
            else:
                view[...] = rng.normal(0.0, _init_std(name, view.shape, std), view.shape)


def _init_std(name: str, shape, std) -> float:
    if std != "he":
        return float(std)
    if "deconv" in name:
        fan_in = shape[0] * KERNEL * KERNEL / (STRIDE * STRIDE)
    elif "embedding" in name:
        return 1.0
    else:
        fan_in = int(np.prod(shape[1:]))
    return float(np.sqrt(2.0 / fan_in))


# ---------------------------------------------------------------------------
# layers


def _pad(x):
    return np.pad(x, ((0, 0), (0, 0), (PAD, PAD), (PAD, PAD)))


def im2col(x: np.ndarray) -> np.ndarray:
    """(n, C, H, W) -> (n, C*16, Ho*Wo) patches of the halving conv."""
    n, c, h, w = x.shape
    ho, wo = h // STRIDE, w // STRIDE
    xp = _pad(x)
    cols = np.empty((n, c, KERNEL, KERNEL, ho, wo))
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            cols[:, :, ki, kj] = xp[:, :, ki : ki + STRIDE * ho : STRIDE, kj : kj + STRIDE * wo : STRIDE]
    return cols.reshape(n, c * KERNEL * KERNEL, ho * wo)


def col2im(cols: np.ndarray, shape) -> np.ndarray:
    """Adjoint of :func:`im2col`; overlapping patches are summed."""
    n, c, h, w = shape
    ho, wo = h // STRIDE, w // STRIDE
    cols = cols.reshape(n, c, KERNEL, KERNEL, ho, wo)
    xp = np.zeros((n, c, h + 2 * PAD, w + 2 * PAD))
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            xp[:, :, ki : ki + STRIDE * ho : STRIDE, kj : kj + STRIDE * wo : STRIDE] += cols[:, :, ki, kj]
    return xp[:, :, PAD : PAD + h, PAD : PAD + w]


class Layer:
    params: tuple[str, ...] = ()

    def forward(self, p: ModelParams, x, ctx):
        raise NotImplementedError

    def backward(self, p: ModelParams, cache, dy, per_sample: bool, want: set, need_dx: bool):
        raise NotImplementedError


class Conv(Layer):
    def __init__(self, name, c_in, c_out):
        self.w, self.b = f"{name}.w", f"{name}.b"
        self.params = (self.w, self.b)
        self.shapes = {self.w: (c_out, c_in, KERNEL, KERNEL), self.b: (c_out,)}

    def forward(self, p, x, ctx):
        w = p[self.w]
        if x.shape[1] != w.shape[1]:
            raise ShapeError(f"{self.w}: expected {w.shape[1]} channels, got {x.shape[1]}")
        n, _, h, wd = x.shape
        cols = im2col(x)
        y = np.matmul(w.reshape(w.shape[0], -1), cols) + p[self.b][None, :, None]
        return y.reshape(n, w.shape[0], h // 2, wd // 2), (cols, x.shape)

    def backward(self, p, cache, dy, per_sample, want, need_dx):
        cols, xshape = cache
        w = p[self.w]
        n = dy.shape[0]
        dy = dy.reshape(n, w.shape[0], -1)
        grads = {}
        if self.w in want:
            gw = np.matmul(dy, cols.transpose(0, 2, 1))
            grads[self.w] = gw.reshape((n,) + w.shape) if per_sample else gw.sum(0).reshape(w.shape)
            gb = dy.sum(axis=2)
            grads[self.b] = gb if per_sample else gb.sum(0)
        dx = None
        if need_dx:
            dcols = np.matmul(w.reshape(w.shape[0], -1).T, dy)
            dx = col2im(dcols, xshape)
        return dx, grads


class ConvT(Layer):
    """Transposed halving conv: doubles the side. Weight shape (C_in, C_out, 4, 4)."""

    def __init__(self, name, c_in, c_out):
        self.w, self.b = f"{name}.w", f"{name}.b"
        self.params = (self.w, self.b)
        self.shapes = {self.w: (c_in, c_out, KERNEL, KERNEL), self.b: (c_out,)}

    def forward(self, p, x, ctx):
        w = p[self.w]
        if x.shape[1] != w.shape[0]:
            raise ShapeError(f"{self.w}: expected {w.shape[0]} channels, got {x.shape[1]}")
        n, c, h, wd = x.shape
        xf = x.reshape(n, c, h * wd)
        cols = np.matmul(w.reshape(c, -1).T, xf)
        out_shape = (n, w.shape[1], 2 * h, 2 * wd)
        y = col2im(cols, out_shape) + p[self.b][None, :, None, None]
        return y, xf

    def backward(self, p, cache, dy, per_sample, want, need_dx):
        xf = cache
        w = p[self.w]
        c_in = w.shape[0]
        dcols = im2col(dy)  # (n, C_out*16, h*w)
        grads = {}
        if self.w in want:
            gw = np.matmul(xf, dcols.transpose(0, 2, 1))
            grads[self.w] = gw.reshape((-1,) + w.shape) if per_sample else gw.sum(0).reshape(w.shape)
            gb = dy.sum(axis=(2, 3))
            grads[self.b] = gb if per_sample else gb.sum(0)
        dx = None
        if need_dx:
            n = dy.shape[0]
            h = dy.shape[2] // 2
            dx = np.matmul(w.reshape(c_in, -1), dcols).reshape(n, c_in, h, -1)
        return dx, grads


class Linear(Layer):
    def __init__(self, name, d_in, d_out):
        self.w, self.b = f"{name}.w", f"{name}.b"
        self.params = (self.w, self.b)
        self.shapes = {self.w: (d_out, d_in), self.b: (d_out,)}

    def forward(self, p, x, ctx):
        xf = x.reshape(x.shape[0], -1)
        if xf.shape[1] != p[self.w].shape[1]:
            raise ShapeError(f"{self.w}: expected {p[self.w].shape[1]} inputs, got {xf.shape[1]}")
        return xf @ p[self.w].T + p[self.b], (xf, x.shape)

    def backward(self, p, cache, dy, per_sample, want, need_dx):
        xf, xshape = cache
        grads = {}
        if self.w in want:
            if per_sample:
                grads[self.w] = dy[:, :, None] * xf[:, None, :]
                grads[self.b] = dy.copy()
            else:
                grads[self.w] = dy.T @ xf
                grads[self.b] = dy.sum(0)
        dx = (dy @ p[self.w]).reshape(xshape) if need_dx else None
        return dx, grads


class Activation(Layer):
    def __init__(self, kind):
        self.kind = kind

    def forward(self, p, x, ctx):
        if self.kind == "leaky_relu":
            return np.where(x > 0, x, LEAKY_SLOPE * x), x
        if self.kind == "relu":
            return np.maximum(x, 0.0), x
        if self.kind == "tanh":
            y = np.tanh(x)
            return y, y
        if self.kind == "sigmoid":
            y = _sigmoid(x)
            return y, y
        raise ValueError(self.kind)

    def backward(self, p, cache, dy, per_sample, want, need_dx):
        if self.kind == "leaky_relu":
            return np.where(cache > 0, dy, LEAKY_SLOPE * dy), {}
        if self.kind == "relu":
            return np.where(cache > 0, dy, 0.0), {}
        if self.kind == "tanh":
            return dy * (1.0 - cache**2), {}
        return dy * cache * (1.0 - cache), {}


class Reshape(Layer):
    def __init__(self, shape):
        self.shape = tuple(shape)

    def forward(self, p, x, ctx):
        return x.reshape((x.shape[0],) + self.shape), x.shape

    def backward(self, p, cache, dy, per_sample, want, need_dx):
        return dy.reshape(cache), {}


class LabelChannel(Layer):
    """Append one (s, s) map holding the label embedding to the channel axis.

    Without an embedding name the extra channel is all zeros (classifier C
    does not see labels but keeps D's shapes).
    """

    def __init__(self, name, num_classes, side):
        self.side = side
        self.name = name
        if name is None:
            self.params, self.shapes = (), {}
        else:
            self.params = (name,)
            self.shapes = {name: (num_classes, side * side)}

    def forward(self, p, x, ctx):
        n = x.shape[0]
        if self.name is None:
            emb = np.zeros((n, 1, self.side, self.side))
        else:
            labels = ctx["labels"]
            emb = p[self.name][labels].reshape(n, 1, self.side, self.side)
        return np.concatenate([x, emb], axis=1), ctx.get("labels")

    def backward(self, p, cache, dy, per_sample, want, need_dx):
        grads = {}
        if self.name is not None and self.name in want:
            labels = cache
            n = dy.shape[0]
            demb = dy[:, -1].reshape(n, -1)
            k = p[self.name].shape[0]
            if per_sample:
                g = np.zeros((n, k, demb.shape[1]))
                g[np.arange(n), labels] = demb
            else:
                g = np.zeros((k, demb.shape[1]))
                np.add.at(g, labels, demb)
            grads[self.name] = g
        return dy[:, :-1], grads


class LatentLabel(Layer):
    """Concatenate a learned label embedding to the latent vector."""

    def __init__(self, name, num_classes, dim):
        self.name = name
        self.params = (name,)
        self.shapes = {name: (num_classes, dim)}

    def forward(self, p, x, ctx):
        labels = ctx["labels"]
        return np.concatenate([x, p[self.name][labels]], axis=1), (labels, x.shape[1])

    def backward(self, p, cache, dy, per_sample, want, need_dx):
        labels, d = cache
        grads = {}
        if self.name in want:
            demb = dy[:, d:]
            n = dy.shape[0]
            k = p[self.name].shape[0]
            if per_sample:
                g = np.zeros((n, k, demb.shape[1]))
                g[np.arange(n), labels] = demb
            else:
                g = np.zeros((k, demb.shape[1]))
                np.add.at(g, labels, demb)
            grads[self.name] = g
        return dy[:, :d], grads


def _sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x):
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# forward modes


@dataclass(frozen=True)
class ForwardMode:
    """How D treats the batch between conv2* and conv3*.

    ``dpagg``: SIN, sum over the batch, Gaussian noise. ``agg``: SIN and sum
    without noise. ``per_sample``: no SIN, no aggregation.
    """

    kind: str
    noise: mech.NoiseSpec | None = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind not in ("dpagg", "agg", "per_sample"):
            raise ValueError(f"unknown forward mode {self.kind!r}")
        if (self.kind == "dpagg") != (self.noise is not None):
            raise ValueError("a noise spec is required for, and only for, dpagg mode")

    @classmethod
    def with_dp_agg(cls, noise: mech.NoiseSpec) -> "ForwardMode":
        return cls("dpagg", noise)

    @classmethod
    def with_agg(cls) -> "ForwardMode":
        return cls("agg")

    @classmethod
    def per_sample(cls) -> "ForwardMode":
        return cls("per_sample")

    @property
    def aggregated(self) -> bool:
        return self.kind != "per_sample"


@dataclass
class Tape:
    mode: ForwardMode
    pre: list
    post: list
    n: int
    pre_out: np.ndarray | None = None
    head: str = "sigmoid"
    head_out: np.ndarray | None = None
    logits: np.ndarray | None = None


# ---------------------------------------------------------------------------
# networks


class Network:
    """A stack of layers with an optional aggregation point in the middle.

    ``pre`` layers run per sample; ``post`` layers run either per sample or on
    the aggregated vector (reshaped back to one (m, p, p) feature map).

    ``agg_scale`` multiplies the (noisy) aggregate before the post layers, a
    fixed public rescaling such as 1/B. ``per_sample_sin`` applies SIN to the
    pre-aggregation maps in per-sample mode too, scaled by
    ``per_sample_scale``, so the post layers see normalized features in every
    mode.
    """

    def __init__(
        self,
        pre: list[Layer],
        post: list[Layer],
        head: str,
        groups: dict[str, str],
        agg_scale: float = 1.0,
        per_sample_sin: bool = False,
        per_sample_scale: float = 1.0,
        input_shape: tuple | None = None,
    ):
        self.pre = pre
        self.input_shape = input_shape  # (C, H, W) when known
        self.post = post
        self.head = head
        self.groups = groups  # parameter name -> group
        self.pre_groups = {groups[n] for layer in pre for n in layer.params}
        self.agg_scale = float(agg_scale)
        self.per_sample_sin = per_sample_sin
        self.per_sample_scale = float(per_sample_scale)

    def param_entries(self):
        out = []
        for layer in self.pre + self.post:
            for name in layer.params:
                out.append((self.groups[name], name, layer.shapes[name]))
        return out

    def new_params(self, rng: np.random.Generator | None = None) -> ModelParams:
        p = ModelParams(self.param_entries())
        if rng is not None:
            p.init_normal(rng)
        return p

    def forward(self, p: ModelParams, x, labels=None, mode: ForwardMode | None = None):
        mode = mode or ForwardMode.per_sample()
        x = np.asarray(x, dtype=np.float64)
        n = x.shape[0]
        if n == 0:
            raise ShapeError("empty batch")
        if self.input_shape is not None and x.shape[1:] != tuple(self.input_shape):
            raise ShapeError(f"expected inputs of shape (n, {', '.join(map(str, self.input_shape))}), got {x.shape}")
        ctx = {"labels": None if labels is None else np.asarray(labels, dtype=np.int64)}
        tape = Tape(mode, [], [], n, head=self.head)
        h = x
        for layer in self.pre:
            h, c = layer.forward(p, h, ctx)
            tape.pre.append(c)
        if mode.aggregated:
            tape.pre_out = h
            s = mech.sin_normalize(h)
            if mode.kind == "dpagg":
                v = mech.dp_aggregate(s, mode.noise)
            else:
                v = mech.aggregate(s)
            h = v.reshape((1,) + h.shape[1:]) * self.agg_scale
        elif self.per_sample_sin and self.post:
            tape.pre_out = h
            h = mech.sin_normalize(h) * self.per_sample_scale
        for layer in self.post:
            h, c = layer.forward(p, h, ctx)
            tape.post.append(c)
        if self.head == "sigmoid":
            out = _sigmoid(h[:, 0])
        elif self.head == "softmax":
            out = _softmax(h)
        elif self.head == "tanh":
            out = np.tanh(h)
        else:
            out = h
        tape.logits = h
        tape.head_out = out
        return out, tape

    def backward(
        self,
        p: ModelParams,
        tape: Tape,
        dout,
        per_sample: bool = False,
        groups=None,
        need_dx: bool = False,
        wrt_logits: bool = False,
    ):
        """Backpropagate ``dout`` (gradient w.r.t. the network output).

        With ``wrt_logits`` ``dout`` is the gradient w.r.t. the pre-head
        values instead (see :func:`loss_bce_logits`). Returns ``(grads, dx)``. Gradients are only computed for ``groups``
        (default: every non-frozen group). With ``per_sample`` the
        pre-aggregation gradients keep a leading sample axis; after
        aggregation there is a single path, so post-aggregation gradients are
        per-sample only in ``per_sample`` mode.
        """
        if groups is None:
            groups = set(p.groups) - p.frozen
        want = {n for n in p.names() if p.group_of(n) in groups}
        out = tape.head_out
        dout = np.asarray(dout, dtype=np.float64)
        if wrt_logits:
            dh = dout[:, None] if self.head == "sigmoid" else dout
        elif self.head == "sigmoid":
            dh = (dout * out * (1.0 - out))[:, None]
        elif self.head == "softmax":
            dh = out * (dout - (dout * out).sum(axis=1, keepdims=True))
        elif self.head == "tanh":
            dh = dout * (1.0 - out**2)
        else:
            dh = dout
        grads = {}
        post_per_sample = per_sample and not tape.mode.aggregated
        for layer, cache in zip(reversed(self.post), reversed(tape.post)):
            dh, g = layer.backward(p, cache, dh, post_per_sample, want, True)
            grads.update(g)
        if per_sample and tape.mode.aggregated:
            for name in list(grads):
                grads[name] = grads[name][None]
        if tape.mode.aggregated:
            h = tape.pre_out
            dv = np.broadcast_to(dh.reshape((1,) + h.shape[1:]) * self.agg_scale, h.shape)
            dh = mech.sin_backward(h, dv)
        elif tape.pre_out is not None:
            dh = mech.sin_backward(tape.pre_out, dh * self.per_sample_scale)
        for i in range(len(self.pre) - 1, -1, -1):
            layer, cache = self.pre[i], tape.pre[i]
            nd = need_dx or i > 0
            dh, g = layer.backward(p, cache, dh, per_sample, want, nd)
            grads.update(g)
            if not nd:
                dh = None
        return grads, dh


def build_discriminator(
    cfg: NetConfig,
    kind: str = "discriminator",
    agg_scale: float = 1.0,
    per_sample_sin: bool = False,
    per_sample_scale: float = 1.0,
) -> Network:
    """D (``sigmoid`` score), C (``softmax`` class fractions) or a plain CNN.

    ``kind``: ``"discriminator"`` injects a label channel after the first conv
    layer; ``"classifier"`` injects a zero channel instead so its conv1 can be
    transferred into D; ``"downstream"`` is a per-sample softmax CNN without
    label input. ``agg_scale``, ``per_sample_sin`` and ``per_sample_scale``
    are passed to :class:`Network`.
    """
    if kind not in ("discriminator", "classifier", "downstream"):
        raise ValueError(f"unknown network kind {kind!r}")
    shape = (cfg.channels, cfg.side, cfg.side)
    groups: dict[str, str] = {}
    pre: list[Layer] = []
    post: list[Layer] = []
    act = cfg.activation
    c_in = cfg.channels
    for j, k in enumerate(cfg.filters):
        group = cfg.group_of_conv(j)
        target = pre if j < cfg.n_pre else post
        layer = Conv(f"{group}.{j}", c_in, k)
        for n in layer.params:
            groups[n] = group
        target.append(layer)
        target.append(Activation(act))
        c_in = k
        if j == 0 and kind != "downstream":
            emb = "embedding.table" if kind == "discriminator" else None
            lc = LabelChannel(emb, cfg.num_classes, cfg.side_after(1))
            for n in lc.params:
                groups[n] = "embedding"
            target.append(lc)
            c_in = k + 1
    flat = cfg.filters[-1] * cfg.side_after(cfg.n_conv) ** 2
    out_dim = 1 if kind == "discriminator" else cfg.num_classes
    fc1 = Linear("fc.0", flat, cfg.fc_width)
    fc2 = Linear("fc.1", cfg.fc_width, out_dim)
    for layer in (fc1, fc2):
        for n in layer.params:
            groups[n] = "fc"
    post += [fc1, Activation(act), fc2]
    head = "sigmoid" if kind == "discriminator" else "softmax"
    if kind == "downstream":
        return Network(pre + post, [], head, groups, input_shape=shape)
    return Network(pre, post, head, groups, agg_scale, per_sample_sin, per_sample_scale, shape)


def build_generator(cfg: NetConfig) -> Network:
    """Reverse of D: latent + label embedding -> FC -> transposed convs -> tanh."""
    groups: dict[str, str] = {}
    layers: list[Layer] = []
    emb = LatentLabel("g.embedding", cfg.num_classes, cfg.label_embedding_dim)
    s0 = cfg.side_after(cfg.n_conv)
    k0 = cfg.filters[-1]
    fc = Linear("g.fc", cfg.latent_dim + cfg.label_embedding_dim, k0 * s0 * s0)
    layers += [emb, fc, Reshape((k0, s0, s0)), Activation(cfg.activation)]
    chans = list(reversed(cfg.filters)) + [cfg.channels]
    for i in range(cfg.n_conv):
        layers.append(ConvT(f"g.deconv.{i}", chans[i], chans[i + 1]))
        if i < cfg.n_conv - 1:
            layers.append(Activation(cfg.activation))
    for layer in layers:
        for n in getattr(layer, "params", ()):
            groups[n] = "generator"
    return Network(layers, [], "tanh", groups)


# ---------------------------------------------------------------------------
# losses


def loss_mse_fraction(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def loss_bce(score, target):
    """Mean binary cross-entropy on clamped scores, with d loss / d score."""
    s = np.clip(np.asarray(score, dtype=np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), s.shape)
    n = s.size
    loss = -np.mean(t * np.log(s) + (1 - t) * np.log(1 - s))
    grad = (-(t / s) + (1 - t) / (1 - s)) / n
    return float(loss), grad


def loss_bce_logits(logits, target):
    """Binary cross-entropy of ``sigmoid(logits)`` and its gradient w.r.t. the logits.

    Same loss as :func:`loss_bce` without clamping; the gradient
    ``(sigmoid(z) - t) / n`` does not vanish when the sigmoid saturates.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    t = np.broadcast_to(np.asarray(target, dtype=np.float64), z.shape)
    n = z.size
    loss = np.mean(np.logaddexp(0.0, z) - t * z)
    return float(loss), (_sigmoid(z) - t) / n


def loss_cross_entropy(probs, labels):
    """Mean categorical cross-entropy on softmax outputs."""
    probs = np.clip(np.asarray(probs, dtype=np.float64), BCE_CLAMP, 1.0)
    n = probs.shape[0]
    idx = (np.arange(n), np.asarray(labels))
    loss = -np.mean(np.log(probs[idx]))
    grad = np.zeros_like(probs)
    grad[idx] = -1.0 / probs[idx] / n
    return float(loss), grad


def class_fractions(labels, num_classes: int) -> np.ndarray:
    counts = np.bincount(np.asarray(labels), minlength=num_classes).astype(np.float64)
    return counts / counts.sum()


# ---------------------------------------------------------------------------
# the three networks as named operations


def forward_discriminator(net: Network, params, images, labels, mode: ForwardMode):
    """Scores in (0, 1): one per batch in aggregated modes, one per sample otherwise.

    In ``dpagg`` mode the noise sensitivity must equal sqrt(m) * p of the
    pre-aggregation maps, otherwise :class:`SensitivityMismatchError` is raised.
    """
    return net.forward(params, images, labels, mode)[0]


def forward_classifier(net: Network, params, images):
    """Predicted class-fraction vector of the whole batch (plain AGG)."""
    out, tape = net.forward(params, images, None, ForwardMode.with_agg())
    return out[0], tape


def forward_generator(net: Network, params, z, labels):
    """Images in [-1, 1] of shape (n, c, side, side)."""
    z = np.asarray(z, dtype=np.float64)
    d_in = net.pre[1].shapes[net.pre[1].w][1] - net.pre[0].shapes[net.pre[0].name][1]
    if z.ndim != 2 or z.shape[1] != d_in:
        raise ShapeError(f"latent batch must be (n, {d_in}), got {z.shape}")
    return net.forward(params, z, labels, ForwardMode.per_sample())


def per_path_gradients(net: Network, params: ModelParams, tape: Tape, dout, group: str):
    """(n, P) matrix of per-sample gradients of ``group``.

    In aggregated modes the gradient flowing back into the sum splits over the
    samples, so row i is the contribution through sample i's own path and the
    rows add up to the batch gradient.
    """
    if group in params.frozen:
        raise FrozenGroupError(f"group {group!r} is frozen")
    if tape.mode.aggregated and group not in net.pre_groups:
        raise ValueError(
            f"group {group!r} sits after the aggregation; it has no per-sample paths"
        )
    grads, _ = net.backward(params, tape, dout, per_sample=True, groups={group})
    return params.flatten(group, grads, per_sample=True)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"DPAFCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, cfg: NetConfig, meta: dict | None = None, digest: str = ""):
    """Write a versioned little-endian checkpoint.

    Layout: magic, u32 version, 64-byte ascii config digest, u32 JSON header
    length + JSON header (net config, meta, group table with tensor names and
    shapes), then each group's float64 payload in table order.
    """
    digest = (digest or cfg.digest())[:64].ljust(64)
    table = []
    for g, vec in params.groups.items():
        table.append(
            {
                "group": g,
                "size": int(vec.size),
                "frozen": g in params.frozen,
                "tensors": [
                    [n, list(params.index[n][2])] for n in params.names(g)
                ],
            }
        )
    header = json.dumps(
        {"net": cfg.to_dict(), "meta": meta or {}, "groups": table}, sort_keys=True
    ).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(digest.encode("ascii"))
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    for g in params.groups:
        buf.write(params.groups[g].astype("<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(params, net_config, meta, digest)``."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        (version,) = struct.unpack_from("<I", data, 8)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        digest = data[12:76].decode("ascii").strip()
        (hlen,) = struct.unpack_from("<I", data, 76)
        header = json.loads(data[80 : 80 + hlen])
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    entries = []
    for grp in header["groups"]:
        for name, shape in grp["tensors"]:
            entries.append((grp["group"], name, tuple(shape)))
    params = ModelParams(entries)
    off = 80 + hlen
    for grp in header["groups"]:
        n = grp["size"] * 8
        chunk = data[off : off + n]
        if len(chunk) != n:
            raise CheckpointError("truncated checkpoint payload")
        params.groups[grp["group"]][...] = np.frombuffer(chunk, dtype="<f8")
        if grp["frozen"]:
            params.frozen.add(grp["group"])
        off += n
    if off != len(data):
        raise CheckpointError("trailing bytes in checkpoint")
    return params, NetConfig.from_dict(header["net"]), header["meta"], digest
