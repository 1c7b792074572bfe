"""Dense-tensor engine with reverse-mode differentiation.

Tensors wrap numpy arrays and record the primitives applied to them; a
Tape walks the recorded graph once, in reverse topological order, and
accumulates exact gradients into every tensor that requires them.
Recurrent cells (LSTM, convolutional LSTM) are fused primitives with
hand-written backward passes so long unrolled sequences stay cheap.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, InvalidState, NumericError

# --------------------------------------------------------------------------
# global configuration

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def set_default_dtype(dtype) -> None:
    """Set the dtype used for new parameters (float32 for training builds,
    float64 for gradient-check builds)."""
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise InvalidArgument(f"default dtype must be float32 or float64, got {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference / evaluation)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default parameter dtype."""
    prev = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


# --------------------------------------------------------------------------
# tensor and tape

class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, _DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
            if self.grad.shape != self.data.shape:
                self.grad = np.broadcast_to(self.grad, self.data.shape).copy()
        else:
            self.grad += g

    def backward(self):
        """Run reverse-mode accumulation from this (scalar) tensor."""
        if self.data.size != 1:
            raise InvalidArgument(f"backward root must be scalar, got shape {self.data.shape}")
        if self._done:
            raise InvalidState("backward already ran on this tape; re-run the forward pass")
        self.grad = np.ones_like(self.data)
        Tape(self).run()
        self._done = True

    # convenience arithmetic (constants are wrapped, not differentiated)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


class Parameter(Tensor):
    """Named trainable tensor; frozen parameters receive zero updates."""

    __slots__ = ("name", "frozen")

    def __init__(self, data, name, frozen=False):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.frozen = frozen

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape}, frozen={self.frozen})"


class Tape:
    """Reverse topological walk over the graph below a root tensor.

    The order guarantees each node's backward runs after all of its
    consumers and exactly once.
    """

    def __init__(self, root: Tensor):
        order = []
        visited = set()
        stack = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.nodes = order[::-1]  # root first

    def run(self):
        for node in self.nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _coerce(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, _DEFAULT_DTYPE))


def _make(data, parents, backward) -> Tensor:
    """Build an op output; records the graph only when tracking is on and
    some parent needs gradients."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum a gradient down to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise and shape primitives

def add(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), backward)


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.data.shape))

    return _make(data, (a, b), backward)


def mul(a, b):
    a, b = _coerce(a), _coerce(b)
    data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), backward)


def matmul(a, b):
    """Matrix product; supports [*, M, K] @ [K, N] and [M, K] @ [K, N]."""
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim < 2 or b.data.ndim != 2:
        raise InvalidArgument(f"matmul expects [*,M,K] @ [K,N], got {a.shape} @ {b.shape}")
    if a.data.shape[-1] != b.data.shape[0]:
        raise InvalidArgument(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            k = a.data.shape[-1]
            n = g.shape[-1]
            b._accumulate(a.data.reshape(-1, k).T @ g.reshape(-1, n))

    return _make(data, (a, b), backward)


def linear(x, w, b=None):
    """x @ w (+ b)."""
    out = matmul(x, w)
    return add(out, b) if b is not None else out


def reshape(x, shape):
    x = _coerce(x)
    data = x.data.reshape(shape)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g.reshape(x.data.shape))

    return _make(data, (x,), backward)


def narrow(x, axis, start, length):
    """Slice [start, start+length) along one axis."""
    x = _coerce(x)
    if axis < 0:
        axis += x.data.ndim
    if start < 0 or start + length > x.data.shape[axis]:
        raise InvalidArgument(
            f"narrow [{start}:{start + length}] out of range for axis {axis} of {x.shape}"
        )
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    data = x.data[index]

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[index] = g
            x._accumulate(full)

    return _make(data, (x,), backward)


def concat(tensors, axis):
    tensors = [_coerce(t) for t in tensors]
    if not tensors:
        raise InvalidArgument("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + size)
                t._accumulate(g[tuple(index)])
            offset += size

    return _make(data, tuple(tensors), backward)


def stack_time(tensors):
    """Stack T tensors of shape [B, H] into [B, T, H] with one graph node."""
    tensors = [_coerce(t) for t in tensors]
    data = np.stack([t.data for t in tensors], axis=1)

    def backward(g):
        for t_idx, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(g[:, t_idx])

    return _make(data, tuple(tensors), backward)


def sum_(x, axis=None, keepdims=False):
    x = _coerce(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if x.requires_grad:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            x._accumulate(np.broadcast_to(g, x.data.shape).copy())

    return _make(data, (x,), backward)


def mean_(x, axis=None, keepdims=False):
    x = _coerce(x)
    count = x.data.size if axis is None else x.data.shape[axis]
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / count)


def relu(x):
    x = _coerce(x)
    data = np.maximum(x.data, 0.0)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))

    return _make(data, (x,), backward)


def tanh(x):
    x = _coerce(x)
    data = np.tanh(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - data * data))

    return _make(data, (x,), backward)


def sigmoid(x):
    x = _coerce(x)
    data = _sigmoid(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g * data * (1.0 - data))

    return _make(data, (x,), backward)


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(np.clip(-z, -60.0, 60.0)))


def softmax(x, axis=-1):
    x = _coerce(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        if x.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            x._accumulate(data * (g - dot))

    return _make(data, (x,), backward)


def dropout(x, p, rng, active=True):
    """Inverted dropout; the rng makes the draw reproducible."""
    if not active or p <= 0.0:
        return x
    x = _coerce(x)
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


def embedding_lookup(table, ids):
    """Rows of table at integer ids; ids is a plain int array."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise InvalidArgument("embedding id out of range")
    data = table.data[ids]

    def backward(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, ids, g)
            table._accumulate(acc)

    return _make(data, (table,), backward)


def reverse_padded(x, lengths=None):
    """Reverse along axis 1 within each row's valid length.

    With lengths=None every row is fully reversed. The mapping is an
    involution, so the backward pass reuses the same gather.
    """
    x = _coerce(x)
    b, t = x.data.shape[0], x.data.shape[1]
    if lengths is None:
        idx = np.broadcast_to(np.arange(t - 1, -1, -1), (b, t))
    else:
        lengths = np.asarray(lengths)
        pos = np.arange(t)[None, :]
        idx = np.where(pos < lengths[:, None], lengths[:, None] - 1 - pos, pos)
    rows = np.arange(b)[:, None]
    data = x.data[rows, idx]

    def backward(g):
        if x.requires_grad:
            x._accumulate(g[rows, idx])

    return _make(data, (x,), backward)


# --------------------------------------------------------------------------
# convolutions

def _same_pads(length, width, stride):
    out_len = -(-length // stride)
    total = max((out_len - 1) * stride + width - length, 0)
    return out_len, total // 2, total - total // 2


def _conv1d_cols(xd, width, stride, pad_l, pad_r):
    """im2col along axis 1 of [B, L, C] -> (cols [B, Lout, width, C], padded)."""
    b, length, c = xd.shape
    padded = np.pad(xd, ((0, 0), (pad_l, pad_r), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, width, axis=1)
    cols = windows[:, ::stride].transpose(0, 1, 3, 2)  # [B, Lout, W, C]
    return np.ascontiguousarray(cols), padded.shape[1]


def _conv1d_scatter(dcols, in_len, width, stride, pad_l, padded_len):
    """col2im: scatter window gradients back to the input. The target
    positions for a fixed tap offset are distinct, so += is safe."""
    b, lout, _, c = dcols.shape
    dpadded = np.zeros((b, padded_len, c), dtype=dcols.dtype)
    starts = stride * np.arange(lout)
    for w in range(width):
        dpadded[:, starts + w] += dcols[:, :, w]
    return dpadded[:, pad_l : pad_l + in_len]


def conv1d(x, kernel, bias=None, stride=1, padding="same"):
    """1-D convolution along axis 1: [B, L, Cin] * [W, Cin, Cout] -> [B, Lout, Cout]."""
    x, kernel = _coerce(x), _coerce(kernel)
    width, cin, cout = kernel.data.shape
    if x.data.shape[-1] != cin:
        raise InvalidArgument(f"conv1d channels mismatch: {x.shape} vs kernel {kernel.shape}")
    if padding == "same":
        lout, pad_l, pad_r = _same_pads(x.data.shape[1], width, stride)
    elif padding == "valid":
        pad_l = pad_r = 0
        lout = (x.data.shape[1] - width) // stride + 1
        if lout < 1:
            raise InvalidArgument("input shorter than filter width")
    else:
        raise InvalidArgument(f"unknown padding {padding!r}")
    cols, padded_len = _conv1d_cols(x.data, width, stride, pad_l, pad_r)
    b = x.data.shape[0]
    flat = cols.reshape(b * lout, width * cin)
    data = (flat @ kernel.data.reshape(width * cin, cout)).reshape(b, lout, cout)
    if bias is not None:
        bias = _coerce(bias)
        data = data + bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gflat = g.reshape(b * lout, cout)
        if kernel.requires_grad:
            kernel._accumulate((flat.T @ gflat).reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            dcols = (gflat @ kernel.data.reshape(width * cin, cout).T).reshape(
                b, lout, width, cin
            )
            x._accumulate(
                _conv1d_scatter(dcols, x.data.shape[1], width, stride, pad_l, padded_len)
            )

    return _make(data, parents, backward)


def conv2d(x, kernel, bias=None, stride=(1, 1), padding="same"):
    """2-D convolution: [B, H, W, Cin] * [KH, KW, Cin, Cout] -> [B, Hout, Wout, Cout].

    'same' padding gives Hout = ceil(H / sh), Wout = ceil(W / sw).
    """
    x, kernel = _coerce(x), _coerce(kernel)
    kh, kw, cin, cout = kernel.data.shape
    sh, sw = stride
    b, h, w, xc = x.data.shape
    if xc != cin:
        raise InvalidArgument(f"conv2d channels mismatch: {x.shape} vs kernel {kernel.shape}")
    if padding != "same":
        raise InvalidArgument("conv2d supports 'same' padding only")
    hout, pad_t, pad_b = _same_pads(h, kh, sh)
    wout, pad_l, pad_r = _same_pads(w, kw, sw)
    padded = np.pad(x.data, ((0, 0), (pad_t, pad_b), (pad_l, pad_r), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (kh, kw), axis=(1, 2))
    # win: [B, Hp-kh+1, Wp-kw+1, C, kh, kw] -> strided, then to [B,Hout,Wout,kh,kw,C]
    cols = np.ascontiguousarray(win[:, ::sh, ::sw].transpose(0, 1, 2, 4, 5, 3))
    flat = cols.reshape(b * hout * wout, kh * kw * cin)
    data = (flat @ kernel.data.reshape(kh * kw * cin, cout)).reshape(b, hout, wout, cout)
    if bias is not None:
        bias = _coerce(bias)
        data = data + bias.data

    parents = (x, kernel) if bias is None else (x, kernel, bias)

    def backward(g):
        gflat = g.reshape(b * hout * wout, cout)
        if kernel.requires_grad:
            kernel._accumulate((flat.T @ gflat).reshape(kernel.data.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(gflat.sum(axis=0))
        if x.requires_grad:
            dcols = (gflat @ kernel.data.reshape(kh * kw * cin, cout).T).reshape(
                b, hout, wout, kh, kw, cin
            )
            dpadded = np.zeros_like(padded)
            hstarts = sh * np.arange(hout)
            wstarts = sw * np.arange(wout)
            for i in range(kh):
                rows = hstarts + i
                for j in range(kw):
                    dpadded[:, rows[:, None], (wstarts + j)[None, :]] += dcols[:, :, :, i, j]
            x._accumulate(dpadded[:, pad_t : pad_t + h, pad_l : pad_l + w])

    return _make(data, parents, backward)


# --------------------------------------------------------------------------
# batch normalization

def batch_norm(x, gamma, beta, running_mean, running_var, training,
               mask=None, momentum=0.9, eps=1e-5):
    """Normalize over all axes but the last (channel) axis.

    running_mean / running_var are plain arrays owned by the caller and
    are updated in place in training mode. An optional {0,1} mask of
    shape broadcastable to x (1 on the channel axis) restricts the
    statistics to valid positions and zeroes padded outputs.
    """
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    n = 1.0
    if mask is not None:
        mask = np.asarray(mask, xd.dtype)
    if training:
        if mask is None:
            n = float(np.prod([xd.shape[i] for i in axes]))
            mu = xd.mean(axis=axes)
            var = ((xd - mu) ** 2).mean(axis=axes)
        else:
            n = float(mask.sum())
            if n < 1:
                raise InvalidArgument("batch_norm mask selects no positions")
            mu = (xd * mask).sum(axis=axes) / n
            var = (((xd - mu) * mask) ** 2).sum(axis=axes) / n
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv_std
    data = gamma.data * xhat + beta.data
    if mask is not None:
        xhat = xhat * mask
        data = data * mask

    def backward(g):
        gm = g if mask is None else g * mask
        if beta.requires_grad:
            beta._accumulate(gm.sum(axis=axes))
        if gamma.requires_grad:
            gamma._accumulate((gm * xhat).sum(axis=axes))
        if x.requires_grad:
            dxhat = gm * gamma.data
            if training:
                s1 = dxhat.sum(axis=axes)
                s2 = (dxhat * xhat).sum(axis=axes)
                dx = inv_std * (dxhat - (s1 + xhat * s2) / n)
                if mask is not None:
                    dx = dx * mask
                x._accumulate(dx)
            else:
                dx = dxhat * inv_std
                if mask is not None:
                    dx = dx * mask
                x._accumulate(dx)

    return _make(data, (x, gamma, beta), backward)


# --------------------------------------------------------------------------
# fused recurrent cells

def _pair_views(hc, hidden):
    """Split a fused [..., 2H] cell output into (h, c) tensors whose
    gradients accumulate directly into slices of the parent's grad."""
    h = Tensor(hc.data[..., :hidden])
    c = Tensor(hc.data[..., hidden:])
    if hc.requires_grad:
        for view, sl in ((h, slice(None, hidden)), (c, slice(hidden, None))):
            view.requires_grad = True
            view._parents = (hc,)

            def backward(g, sl=sl):
                if hc.grad is None:
                    hc.grad = np.zeros_like(hc.data)
                hc.grad[..., sl] += g

            view._backward = backward
    return h, c


def lstm_cell(x, h, c, wx, wh, b):
    """One LSTM step: gates = x@wx + h@wh + b -> (h', c').

    Gate order along the last axis is [input, forget, cell, output].
    Internally the step is one fused graph node holding [h'; c']; the
    returned tensors are narrow views of it, so gradients from either
    output flow through a single exact backward pass.
    """
    x, h, c = _coerce(x), _coerce(h), _coerce(c)
    wx, wh, b = _coerce(wx), _coerce(wh), _coerce(b)
    hidden = wh.data.shape[0]
    gates = x.data @ wx.data + h.data @ wh.data + b.data
    i = _sigmoid(gates[..., :hidden])
    f = _sigmoid(gates[..., hidden : 2 * hidden])
    g_ = np.tanh(gates[..., 2 * hidden : 3 * hidden])
    o = _sigmoid(gates[..., 3 * hidden :])
    c_new = f * c.data + i * g_
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c

    def backward(g):
        dh = g[..., :hidden]
        dc = g[..., hidden:]
        dct = dh * o * (1.0 - tanh_c * tanh_c) + dc
        dgates = np.empty_like(gates)
        dgates[..., :hidden] = dct * g_ * i * (1.0 - i)
        dgates[..., hidden : 2 * hidden] = dct * c.data * f * (1.0 - f)
        dgates[..., 2 * hidden : 3 * hidden] = dct * i * (1.0 - g_ * g_)
        dgates[..., 3 * hidden :] = dh * tanh_c * o * (1.0 - o)
        if x.requires_grad:
            x._accumulate(dgates @ wx.data.T)
        if h.requires_grad:
            h._accumulate(dgates @ wh.data.T)
        if c.requires_grad:
            c._accumulate(dct * f)
        if wx.requires_grad:
            wx._accumulate(x.data.reshape(-1, x.data.shape[-1]).T @ dgates.reshape(-1, 4 * hidden))
        if wh.requires_grad:
            wh._accumulate(h.data.reshape(-1, hidden).T @ dgates.reshape(-1, 4 * hidden))
        if b.requires_grad:
            b._accumulate(dgates.reshape(-1, 4 * hidden).sum(axis=0))

    hc = _make(np.concatenate([h_new, c_new], axis=-1), (x, h, c, wx, wh, b), backward)
    return _pair_views(hc, hidden)


def conv_lstm_cell(x, h, c, kx, kh_, b):
    """One convolutional-LSTM step over [B, F, C] maps.

    Input/state transforms are width-3 (or kernel-width) convolutions
    along the frequency axis, so position (f) interacts only with its
    immediate neighbors each step.
    """
    x, h, c = _coerce(x), _coerce(h), _coerce(c)
    kx, kh_, b = _coerce(kx), _coerce(kh_), _coerce(b)
    width, cin, four_h = kx.data.shape
    hidden = four_h // 4
    if x.data.shape[1] < width:
        raise InvalidArgument(f"frequency axis {x.data.shape[1]} < filter width {width}")
    _, pad_l, pad_r = _same_pads(x.data.shape[1], width, 1)
    xcols, xp_len = _conv1d_cols(x.data, width, 1, pad_l, pad_r)
    hcols, hp_len = _conv1d_cols(h.data, width, 1, pad_l, pad_r)
    bsz, freq = x.data.shape[0], x.data.shape[1]
    xflat = xcols.reshape(bsz * freq, width * cin)
    hflat = hcols.reshape(bsz * freq, width * hidden)
    gates = (
        xflat @ kx.data.reshape(width * cin, four_h)
        + hflat @ kh_.data.reshape(width * hidden, four_h)
        + b.data
    ).reshape(bsz, freq, four_h)
    i = _sigmoid(gates[..., :hidden])
    f = _sigmoid(gates[..., hidden : 2 * hidden])
    g_ = np.tanh(gates[..., 2 * hidden : 3 * hidden])
    o = _sigmoid(gates[..., 3 * hidden :])
    c_new = f * c.data + i * g_
    tanh_c = np.tanh(c_new)
    h_new = o * tanh_c

    def backward(g):
        dh = g[..., :hidden]
        dc = g[..., hidden:]
        dct = dh * o * (1.0 - tanh_c * tanh_c) + dc
        dgates = np.empty((bsz, freq, four_h), dtype=g.dtype)
        dgates[..., :hidden] = dct * g_ * i * (1.0 - i)
        dgates[..., hidden : 2 * hidden] = dct * c.data * f * (1.0 - f)
        dgates[..., 2 * hidden : 3 * hidden] = dct * i * (1.0 - g_ * g_)
        dgates[..., 3 * hidden :] = dh * tanh_c * o * (1.0 - o)
        dgates = dgates.reshape(bsz * freq, four_h)
        if kx.requires_grad:
            kx._accumulate((xflat.T @ dgates).reshape(kx.data.shape))
        if kh_.requires_grad:
            kh_._accumulate((hflat.T @ dgates).reshape(kh_.data.shape))
        if b.requires_grad:
            b._accumulate(dgates.sum(axis=0))
        if x.requires_grad:
            dxcols = (dgates @ kx.data.reshape(width * cin, four_h).T).reshape(
                bsz, freq, width, cin
            )
            x._accumulate(_conv1d_scatter(dxcols, freq, width, 1, pad_l, xp_len))
        if h.requires_grad:
            dhcols = (dgates @ kh_.data.reshape(width * hidden, four_h).T).reshape(
                bsz, freq, width, hidden
            )
            h._accumulate(_conv1d_scatter(dhcols, freq, width, 1, pad_l, hp_len))
        if c.requires_grad:
            c._accumulate(dct * f)

    hc = _make(np.concatenate([h_new, c_new], axis=-1), (x, h, c, kx, kh_, b), backward)
    return _pair_views(hc, hidden)


# --------------------------------------------------------------------------
# losses (fused)

def mse_loss(pred, target, mask=None):
    """Mean squared error per element; mask [..., 1] restricts frames."""
    pred = _coerce(pred)
    target = np.asarray(target, pred.data.dtype)
    diff = pred.data - target
    if mask is None:
        scale = 1.0 / diff.size
        data = np.array((diff * diff).sum() * scale, pred.data.dtype)
    else:
        mask = np.asarray(mask, pred.data.dtype)
        valid = mask.sum() * (diff.shape[-1] if mask.shape[-1] == 1 else 1)
        scale = 1.0 / float(valid)
        diff = diff * mask
        data = np.array((diff * diff).sum() * scale, pred.data.dtype)

    def backward(g):
        if pred.requires_grad:
            pred._accumulate((2.0 * scale * float(g)) * diff)

    return _make(data, (pred,), backward)


def bce_with_logits(logits, targets, mask=None):
    """Binary cross-entropy on logits, mean over (masked) elements."""
    logits = _coerce(logits)
    z = logits.data
    t = np.asarray(targets, z.dtype)
    loss = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    p = _sigmoid(z)
    if mask is None:
        scale = 1.0 / z.size
        data = np.array(loss.sum() * scale, z.dtype)
        dz = (p - t) * scale
    else:
        mask = np.asarray(mask, z.dtype)
        scale = 1.0 / float(mask.sum())
        data = np.array((loss * mask).sum() * scale, z.dtype)
        dz = (p - t) * mask * scale

    def backward(g):
        if logits.requires_grad:
            logits._accumulate(float(g) * dz)

    return _make(data, (logits,), backward)


def cross_entropy(logits, ids, mask=None):
    """Mean categorical cross-entropy; logits [N, V], integer ids [N]."""
    logits = _coerce(logits)
    z = logits.data
    ids = np.asarray(ids)
    n = z.shape[0]
    shifted = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1))
    nll = lse - shifted[np.arange(n), ids]
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=-1, keepdims=True)
    onehot = np.zeros_like(z)
    onehot[np.arange(n), ids] = 1.0
    if mask is None:
        scale = 1.0 / n
        data = np.array(nll.sum() * scale, z.dtype)
        dz = (probs - onehot) * scale
    else:
        mask = np.asarray(mask, z.dtype)
        scale = 1.0 / float(mask.sum())
        data = np.array((nll * mask).sum() * scale, z.dtype)
        dz = (probs - onehot) * mask[:, None] * scale

    def backward(g):
        if logits.requires_grad:
            logits._accumulate(float(g) * dz)

    return _make(data, (logits,), backward)


# --------------------------------------------------------------------------
# parameter initialization and layers

def uniform_init(rng, shape, scale=0.05):
    return rng.uniform(-scale, scale, size=shape).astype(_DEFAULT_DTYPE)


def conv_init(rng, shape):
    fan_in = int(np.prod(shape[:-1]))
    scale = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-scale, scale, size=shape).astype(_DEFAULT_DTYPE)


class Registry(dict):
    """Name -> Parameter map for one model."""

    def add(self, name, data, frozen=False) -> Parameter:
        if name in self:
            raise InvalidArgument(f"duplicate parameter {name!r}")
        p = Parameter(data, name, frozen)
        self[name] = p
        return p

    def census(self) -> dict[str, int]:
        """Total trainable scalars per top-level prefix plus 'total'."""
        counts: dict[str, int] = {}
        for name, p in self.items():
            prefix = name.split(".", 1)[0]
            counts[prefix] = counts.get(prefix, 0) + p.data.size
        counts["total"] = sum(p.data.size for p in self.values())
        return counts


class LSTMCellLayer:
    """Standard LSTM cell (no peepholes); forget-gate bias starts at 1."""

    def __init__(self, reg, name, input_size, hidden_size, rng):
        self.hidden_size = hidden_size
        self.wx = reg.add(f"{name}.wx", uniform_init(rng, (input_size, 4 * hidden_size)))
        self.wh = reg.add(f"{name}.wh", uniform_init(rng, (hidden_size, 4 * hidden_size)))
        bias = np.zeros(4 * hidden_size, _DEFAULT_DTYPE)
        bias[hidden_size : 2 * hidden_size] = 1.0
        self.b = reg.add(f"{name}.b", bias)

    def zero_state(self, batch, dtype):
        z = np.zeros((batch, self.hidden_size), dtype)
        return Tensor(z), Tensor(z.copy())

    def __call__(self, x, state):
        h, c = state
        h2, c2 = lstm_cell(x, h, c, self.wx, self.wh, self.b)
        return h2, (h2, c2)


def bidirectional_rnn(cell_forward, cell_backward, inputs, lengths=None):
    """Run two cells over [B, T, D] (or [T, D]) and concatenate, giving
    [B, T, 2H]. The backward direction respects per-row valid lengths."""
    single = inputs.ndim == 2
    if single:
        inputs = reshape(inputs, (1,) + inputs.shape)
    b, t = inputs.shape[0], inputs.shape[1]
    if t < 1:
        raise InvalidArgument("sequence must have at least one step")
    dtype = inputs.data.dtype

    def run(cell, seq):
        state = cell.zero_state(b, dtype)
        outs = []
        for step in range(t):
            x_t = reshape(narrow(seq, 1, step, 1), (b, seq.shape[2]))
            out, state = cell(x_t, state)
            outs.append(out)
        return outs

    fwd = run(cell_forward, inputs)
    rev_in = reverse_padded(inputs, lengths)
    bwd = run(cell_backward, rev_in)
    fwd_seq = stack_time(fwd)
    bwd_seq = reverse_padded(stack_time(bwd), lengths)
    out = concat([fwd_seq, bwd_seq], axis=2)
    return reshape(out, out.shape[1:]) if single else out


class ConvLSTMLayer:
    """Bidirectional convolutional LSTM over [B, T, F, C] feature maps.

    All gate transforms are 1 x width convolutions along the frequency
    axis; outputs concatenate the two directions' hidden maps.
    """

    def __init__(self, reg, name, in_channels, hidden_channels, rng, filter_width=3):
        self.hidden = hidden_channels
        self.width = filter_width
        self.kx_f = reg.add(f"{name}.fwd.kx", conv_init(rng, (filter_width, in_channels, 4 * hidden_channels)))
        self.kh_f = reg.add(f"{name}.fwd.kh", conv_init(rng, (filter_width, hidden_channels, 4 * hidden_channels)))
        self.b_f = reg.add(f"{name}.fwd.b", _forget_bias(hidden_channels))
        self.kx_b = reg.add(f"{name}.bwd.kx", conv_init(rng, (filter_width, in_channels, 4 * hidden_channels)))
        self.kh_b = reg.add(f"{name}.bwd.kh", conv_init(rng, (filter_width, hidden_channels, 4 * hidden_channels)))
        self.b_b = reg.add(f"{name}.bwd.b", _forget_bias(hidden_channels))

    def _run(self, x, kx, kh_, b):
        bsz, t, freq, _ = x.shape
        dtype = x.data.dtype
        h = Tensor(np.zeros((bsz, freq, self.hidden), dtype))
        c = Tensor(np.zeros((bsz, freq, self.hidden), dtype))
        outs = []
        for step in range(t):
            x_t = reshape(narrow(x, 1, step, 1), (bsz, freq, x.shape[3]))
            h, c = conv_lstm_cell(x_t, h, c, kx, kh_, b)
            outs.append(reshape(h, (bsz, 1, freq, self.hidden)))
        return concat(outs, axis=1)

    def __call__(self, x, lengths=None):
        if x.shape[2] < self.width:
            raise InvalidArgument(f"need >= {self.width} frequency bands, got {x.shape[2]}")
        fwd = self._run(x, self.kx_f, self.kh_f, self.b_f)
        rev = reverse_padded(x, lengths)
        bwd = reverse_padded(self._run(rev, self.kx_b, self.kh_b, self.b_b), lengths)
        return concat([fwd, bwd], axis=3)


def _forget_bias(hidden):
    b = np.zeros(4 * hidden, _DEFAULT_DTYPE)
    b[hidden : 2 * hidden] = 1.0
    return b


class AdditiveAttention:
    """Content-based attention: e_t = v . tanh(Wq q + Wk k_t)."""

    def __init__(self, reg, name, query_size, key_size, attn_size, rng):
        self.wq = reg.add(f"{name}.wq", uniform_init(rng, (query_size, attn_size)))
        self.wk = reg.add(f"{name}.wk", uniform_init(rng, (key_size, attn_size)))
        self.v = reg.add(f"{name}.v", uniform_init(rng, (attn_size,)))

    def process_keys(self, keys):
        """Precompute Wk k_t once per utterance; keys [B, T, K] -> [B, T, A]."""
        return matmul(keys, self.wk)

    def _location_term(self, prev_weights):
        return None

    def __call__(self, query, keys, values, processed_keys=None, mask=None, prev_weights=None):
        """Returns (context [B, V], weights [B, T]); accepts unbatched
        query [Q] / keys [T, K] / values [T, V] as well."""
        single = keys.ndim == 2
        if single:
            query = reshape(query, (1,) + query.shape)
            keys = reshape(keys, (1,) + keys.shape)
            values = reshape(values, (1,) + values.shape)
            if prev_weights is not None:
                prev_weights = reshape(prev_weights, (1,) + prev_weights.shape)
        t = keys.shape[1]
        if t < 1:
            raise InvalidArgument("attention needs at least one key")
        if processed_keys is None:
            processed_keys = self.process_keys(keys)
        q = matmul(query, self.wq)
        scores = add(reshape(q, (q.shape[0], 1, q.shape[1])), processed_keys)
        loc = self._location_term(prev_weights)
        if loc is not None:
            scores = add(scores, loc)
        energies = sum_(mul(tanh(scores), self.v), axis=2)
        if mask is not None:
            energies = add(energies, (np.asarray(mask, energies.data.dtype) - 1.0) * 1e9)
        weights = softmax(energies, axis=1)
        context = sum_(mul(reshape(weights, (weights.shape[0], t, 1)), values), axis=1)
        if single:
            context = reshape(context, context.shape[1:])
            weights = reshape(weights, weights.shape[1:])
        return context, weights


class LocationSensitiveAttention(AdditiveAttention):
    """Additive attention plus a term computed from the previous
    alignment, convolved with a bank of 1-D filters."""

    def __init__(self, reg, name, query_size, key_size, attn_size, rng,
                 n_filters=8, filter_width=15):
        super().__init__(reg, name, query_size, key_size, attn_size, rng)
        self.loc_kernel = reg.add(f"{name}.loc_kernel", conv_init(rng, (filter_width, 1, n_filters)))
        self.loc_proj = reg.add(f"{name}.loc_proj", uniform_init(rng, (n_filters, attn_size)))

    def _location_term(self, prev_weights):
        if prev_weights is None:
            raise InvalidArgument("location-sensitive attention needs prev_weights")
        sums = prev_weights.data.sum(axis=-1)
        if np.any(np.abs(sums - 1.0) > 1e-3):
            raise InvalidArgument("prev_weights must sum to 1 (within 1e-3)")
        b, t = prev_weights.shape
        feats = conv1d(reshape(prev_weights, (b, t, 1)), self.loc_kernel, None, 1, "same")
        return matmul(feats, self.loc_proj)

    def __call__(self, query, keys, values, processed_keys=None, mask=None, prev_weights=None):
        if prev_weights is None:
            raise InvalidArgument("location-sensitive attention needs prev_weights")
        return super().__call__(
            query, keys, values, processed_keys=processed_keys, mask=mask,
            prev_weights=prev_weights,
        )


# --------------------------------------------------------------------------
# optimizer

@dataclass(frozen=True)
class LrSchedule:
    """Learning-rate schedule: constant, or linear decay to zero at
    decay_end_step with an optional linear warmup."""

    kind: str = "linear_decay"  # constant | linear_decay
    base_lr: float = 1e-3
    warmup_steps: int = 0
    decay_end_step: int = 60000

    def lr_at(self, step: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        if self.kind != "linear_decay":
            raise InvalidArgument(f"unknown schedule kind {self.kind!r}")
        if self.warmup_steps and step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        span = self.decay_end_step - self.warmup_steps
        return self.base_lr * max(0.0, (self.decay_end_step - step) / span)


class Adam:
    """Adam with optional global-norm gradient clipping.

    Frozen parameters are skipped entirely; NaN gradients raise a
    NumericError naming the parameter.
    """

    def __init__(self, params: Registry, schedule: LrSchedule,
                 beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=1.0):
        self.params = params
        self.schedule = schedule
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def step(self):
        """Apply one update using the .grad fields; grads left untouched."""
        grads = {}
        sq_sum = 0.0
        for name, p in self.params.items():
            if p.frozen:
                continue
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
            sq_sum += float((g.astype(np.float64) ** 2).sum())
        scale = 1.0
        if self.clip_norm is not None and sq_sum > self.clip_norm**2:
            scale = self.clip_norm / np.sqrt(sq_sum)
        lr = self.schedule.lr_at(self.t)
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            p = self.params[name]
            g = g * scale
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def state_entries(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([self.t], np.int64)}
        for name in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_entries(self, entries: dict[str, np.ndarray]) -> None:
        self.t = int(entries["adam.t"][0])
        for name in self.params:
            self.m[name] = entries[f"adam.m.{name}"].astype(self.m[name].dtype)
            self.v[name] = entries[f"adam.v.{name}"].astype(self.v[name].dtype)
