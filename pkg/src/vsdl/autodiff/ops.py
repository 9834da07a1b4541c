"""Differentiable layer ops: convolution, pooling, dense, activations, LSTM, BCE.

Spatial ops take either a single sample ``[C, *spatial]`` or a batch
``[N, C, *spatial]``; the batch form is what the networks use internally.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigError, DimensionError, InputError
from .tensor import Tensor, add, mul, reshape, stack

BCE_CLAMP = 1e-7


def _unbatched(x: Tensor, spatial: int) -> bool:
    if x.ndim == spatial + 1:
        return True
    if x.ndim == spatial + 2:
        return False
    raise DimensionError(
        f"expected input of rank {spatial + 1} [C,...] or {spatial + 2} [N,C,...], got shape {x.shape}")


def _out_extent(n: int, k: int, stride: int, padding: int, axis: str) -> int:
    span = n + 2 * padding - k
    if span < 0:
        raise DimensionError(f"kernel extent {k} exceeds padded input extent {n + 2 * padding} on {axis}")
    if span % stride:
        raise ConfigError(
            f"output extent on {axis} is not integral: ({n}+2*{padding}-{k})/{stride}+1")
    return span // stride + 1


def _convnd(x: Tensor, w: Tensor, b: Tensor, stride: int, padding: int, nd: int) -> Tensor:
    if stride < 1 or padding < 0:
        raise ConfigError(f"stride must be >= 1 and padding >= 0 (got {stride}, {padding})")
    single = _unbatched(x, nd)
    xd = x.data[None] if single else x.data
    if w.ndim != nd + 2:
        raise DimensionError(f"kernel must have rank {nd + 2}, got shape {w.shape}")
    n, c_in = xd.shape[:2]
    c_out = w.shape[0]
    if w.shape[1] != c_in:
        raise DimensionError(f"kernel expects {w.shape[1]} input channels, input has {c_in}")
    if b.shape != (c_out,):
        raise DimensionError(f"bias shape {b.shape} does not match {c_out} output channels")
    ksize = w.shape[2:]
    names = "DHW"[-nd:]
    out_sp = tuple(_out_extent(xd.shape[2 + i], ksize[i], stride, padding, names[i]) for i in range(nd))

    pad = ((0, 0), (0, 0)) + ((padding, padding),) * nd
    xp = np.pad(xd, pad) if padding else xd
    win = sliding_window_view(xp, ksize, axis=tuple(range(2, 2 + nd)))
    if stride > 1:
        win = win[(slice(None), slice(None)) + (slice(None, None, stride),) * nd]
    # im2col as [N, C*k, out]: batched matmul then yields NC(spatial) directly
    perm = (0, 1) + tuple(range(2 + nd, 2 + 2 * nd)) + tuple(range(2, 2 + nd))
    n_out = int(np.prod(out_sp))
    cols = np.ascontiguousarray(win.transpose(perm)).reshape(n, -1, n_out)
    wmat = w.data.reshape(c_out, -1)
    out = np.matmul(wmat, cols)
    out += b.data[:, None]
    out = out.reshape((n, c_out) + out_sp)
    if single:
        out = out[0]

    def bw(g):
        gd = (g[None] if single else g).reshape(n, c_out, n_out)
        gw = np.matmul(gd, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape) if w.requires_grad else None
        gb = gd.sum(axis=(0, 2)) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = np.matmul(wmat.T, gd).reshape((n, c_in) + tuple(ksize) + out_sp)
            dxp = np.zeros(xp.shape, dtype=xd.dtype)
            for offs in itertools.product(*(range(k) for k in ksize)):
                dst = (slice(None), slice(None)) + tuple(
                    slice(o, o + stride * (m - 1) + 1, stride) for o, m in zip(offs, out_sp))
                dxp[dst] += dcols[(slice(None), slice(None)) + offs]
            if padding:
                dxp = dxp[(slice(None), slice(None)) + (slice(padding, -padding),) * nd]
            gx = dxp[0] if single else dxp
        return ((x, gx), (w, gw), (b, gb))

    return Tensor._result(out, (x, w, b), f"conv{nd}d", bw)


def conv2d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation. ``x`` is [C,H,W] or [N,C,H,W]; kernels [C_out,C_in,kH,kW]."""
    return _convnd(x, kernels, bias, stride, padding, 2)


def conv3d(x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """3D cross-correlation over [C,D,H,W] or [N,C,D,H,W]."""
    return _convnd(x, kernels, bias, stride, padding, 3)


def _maxpoolnd(x: Tensor, window, stride, nd: int) -> Tensor:
    single = _unbatched(x, nd)
    xd = x.data[None] if single else x.data
    window = (window,) * nd if np.isscalar(window) else tuple(window)
    stride = (stride,) * nd if np.isscalar(stride) else tuple(stride)
    if min(window) < 1 or min(stride) < 1:
        raise ConfigError("pool window and stride must be positive")
    sp = xd.shape[2:]
    for ax, (n_, k_) in enumerate(zip(sp, window)):
        if k_ > n_:
            raise ConfigError(f"pool window {k_} exceeds input extent {n_} on spatial axis {ax}")
    out_sp = tuple((n_ - k_) // s_ + 1 for n_, k_, s_ in zip(sp, window, stride))
    lead = (slice(None), slice(None))
    views = [lead + tuple(slice(o, o + s_ * (m - 1) + 1, s_) for o, s_, m in zip(offs, stride, out_sp))
             for offs in itertools.product(*(range(k) for k in window))]
    best = xd[views[0]].copy()
    for v in views[1:]:
        np.maximum(best, xd[v], out=best)
    out = best[0] if single else best
    tiled = window == stride

    def bw(g):
        # offsets are visited in row-major window order; the first element equal
        # to the maximum takes the whole gradient
        remaining = np.array(g[None] if single else g, copy=True)
        gx = np.zeros_like(xd)
        for v in views:
            hit = xd[v] == best
            if tiled:
                gx[v] = remaining * hit
            else:
                gx[v] += remaining * hit
            remaining *= ~hit
        return ((x, gx[0] if single else gx),)

    return Tensor._result(out, (x,), f"maxpool{nd}d", bw)


def maxpool2d(x: Tensor, window: int, stride: int) -> Tensor:
    """Per-window maximum; gradient goes to the first maximal element."""
    return _maxpoolnd(x, window, stride, 2)


def maxpool3d(x: Tensor, window, stride) -> Tensor:
    return _maxpoolnd(x, window, stride, 3)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    """``out_j = sum_i weights[j, i] * x[i] + bias[j]`` for x of shape [N] or [B, N]."""
    if weights.ndim != 2:
        raise DimensionError(f"dense weights must be [M,N], got {weights.shape}")
    m, n = weights.shape
    if x.ndim not in (1, 2) or x.shape[-1] != n:
        raise DimensionError(f"dense expects input [..., {n}], got {x.shape}")
    if bias is not None and bias.shape != (m,):
        raise DimensionError(f"dense bias must be [{m}], got {bias.shape}")
    xd, wd = x.data, weights.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def bw(g):
        gx = g @ wd if x.requires_grad else None
        g2 = g.reshape(-1, m)
        gw = g2.T @ xd.reshape(-1, n) if weights.requires_grad else None
        res = [(x, gx), (weights, gw)]
        if bias is not None:
            res.append((bias, g2.sum(axis=0)))
        return res

    parents = (x, weights) if bias is None else (x, weights, bias)
    return Tensor._result(out, parents, "dense", bw)


def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    return Tensor._result(out, (x,), "relu", lambda g: ((x, g * (out > 0)),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    e = np.exp(-np.abs(d))
    s = np.where(d >= 0, 1 / (1 + e), e / (1 + e)).astype(d.dtype)
    # keep the output strictly inside (0, 1) even where the dtype saturates
    info = np.finfo(d.dtype)
    s = np.clip(s, info.tiny, 1 - info.epsneg)
    return Tensor._result(s, (x,), "sigmoid", lambda g: ((x, g * s * (1 - s)),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return Tensor._result(t, (x,), "tanh", lambda g: ((x, g * (1 - t * t)),))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ConfigError(f"unknown activation {kind!r}; choose from {sorted(_ACTIVATIONS)}") from None
    return fn(x)


@dataclass
class LSTMParams:
    """Gate parameters for one LSTM layer, gates stacked in order i, f, o, g.

    ``w_x`` is [4H, I], ``w_h`` is [4H, H], ``bias`` is [4H].
    """
    w_x: Tensor
    w_h: Tensor
    bias: Tensor

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]

    @property
    def input_size(self) -> int:
        return self.w_x.shape[1]

    def check(self) -> None:
        h = self.hidden
        if self.w_h.shape != (4 * h, h):
            raise DimensionError(f"recurrent weights must be [{4 * h},{h}], got {self.w_h.shape}")
        if self.w_x.ndim != 2 or self.w_x.shape[0] != 4 * h:
            raise DimensionError(f"input weights must be [{4 * h}, I], got {self.w_x.shape}")
        if self.bias.shape != (4 * h,):
            raise DimensionError(f"gate bias must be [{4 * h}], got {self.bias.shape}")


def _gates_step(zx: Tensor, h_prev: Tensor, c_prev: Tensor, p: LSTMParams):
    hsz = p.hidden
    z = add(zx, dense(h_prev, p.w_h))
    i = sigmoid(z[..., 0:hsz])
    f = sigmoid(z[..., hsz:2 * hsz])
    o = sigmoid(z[..., 2 * hsz:3 * hsz])
    g = tanh(z[..., 3 * hsz:4 * hsz])
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


def lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTMParams):
    """One LSTM step; returns ``(h, c)``. Accepts [I] or batched [B, I] input."""
    params.check()
    hsz = params.hidden
    if x.shape[-1] != params.input_size:
        raise DimensionError(f"lstm input width {x.shape[-1]} != weight width {params.input_size}")
    want = x.shape[:-1] + (hsz,)
    if h_prev.shape != want or c_prev.shape != want:
        raise DimensionError(f"lstm state must be {want}, got h {h_prev.shape} and c {c_prev.shape}")
    return _gates_step(dense(x, params.w_x, params.bias), h_prev, c_prev, params)


def multilayer_lstm(sequence: Sequence[Tensor] | Tensor, layers: Sequence[LSTMParams]) -> Tensor:
    """Stacked LSTM over a time sequence, zero initial states.

    ``sequence`` is a list of per-step inputs ``[..., I]`` or one tensor
    ``[T, ..., I]``. Layer k+1 consumes the hidden sequence of layer k; the
    result is the last hidden state of the top layer.
    """
    if isinstance(sequence, Tensor):
        seq_t = sequence
        if seq_t.ndim < 2 or seq_t.shape[0] == 0:
            raise InputError(f"sequence tensor must be [T, ..., I] with T >= 1, got {seq_t.shape}")
    else:
        if len(sequence) == 0:
            raise InputError("multilayer_lstm needs a non-empty sequence")
        width = sequence[0].shape
        for t, s in enumerate(sequence):
            if s.shape != width:
                raise DimensionError(f"timestep {t} has shape {s.shape}, expected {width}")
        seq_t = stack(sequence)
    if len(layers) == 0:
        raise ConfigError("multilayer_lstm needs at least one layer")
    steps = seq_t.shape[0]
    for p in layers:
        p.check()
        if seq_t.shape[-1] != p.input_size:
            raise DimensionError(f"layer input width {seq_t.shape[-1]} != weight width {p.input_size}")
        lead = seq_t.shape[1:-1]
        # input projections for all timesteps in one matmul
        flat = reshape(seq_t, (-1, seq_t.shape[-1])) if seq_t.ndim > 2 else seq_t
        zx = reshape(dense(flat, p.w_x, p.bias), (steps,) + lead + (4 * p.hidden,))
        dt = p.w_h.data.dtype
        h = Tensor(np.zeros(lead + (p.hidden,), dtype=dt), dtype=dt)
        c = Tensor(np.zeros(lead + (p.hidden,), dtype=dt), dtype=dt)
        outs = []
        for t in range(steps):
            h, c = _gates_step(zx[t], h, c, p)
            outs.append(h)
        seq_t = stack(outs)
    return h


def bce_loss(prediction: Tensor, label) -> Tensor:
    """Binary cross-entropy averaged over all elements of ``prediction``.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; the clamp passes no
    gradient where it is active.
    """
    y = np.asarray(label, dtype=prediction.data.dtype).reshape(prediction.shape)
    if not np.all((y == 0) | (y == 1)):
        raise InputError("labels must be 0 or 1")
    p = prediction.data
    pc = np.clip(p, BCE_CLAMP, 1 - BCE_CLAMP)
    n = p.size
    loss = -(y * np.log(pc) + (1 - y) * np.log1p(-pc)).sum() / n
    live = (p >= BCE_CLAMP) & (p <= 1 - BCE_CLAMP)

    def bw(g):
        dp = (-(y / pc) + (1 - y) / (1 - pc)) / n * live
        return ((prediction, (g * dp).astype(p.dtype)),)

    return Tensor._result(np.asarray(loss, dtype=p.dtype), (prediction,), "bce", bw)


def flatten(x: Tensor, start: int = 1) -> Tensor:
    lead = x.shape[:start]
    return reshape(x, lead + (int(np.prod(x.shape[start:])),))


__all__ = [
    "LSTMParams", "activation", "bce_loss", "conv2d", "conv3d", "dense", "flatten",
    "lstm_cell", "maxpool2d", "maxpool3d", "multilayer_lstm", "relu", "sigmoid", "tanh",
]
