"""Finite-difference gradient checks shared by the unit and acceptance suites."""
from __future__ import annotations

import contextlib

import numpy as np

import vsdl.autodiff as ad
from vsdl.autodiff import Tensor

TRIALS = 20


def _spread(rng, shape, gap=0.02):
    """Distinct values at least ``gap`` apart, so max-pool argmax and relu kinks are stable."""
    n = int(np.prod(shape))
    vals = (np.arange(n) - n / 2) * gap + rng.uniform(0.003, 0.007)
    return rng.permutation(vals).reshape(shape)


def _away_from_zero(rng, shape):
    x = rng.uniform(0.05, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _extent(rng, k, stride, pad):
    """Input extent giving an integral output of 1..3 positions."""
    o = int(rng.integers(1, 4))
    n = (o - 1) * stride + k - 2 * pad
    while n < 1:
        o += 1
        n = (o - 1) * stride + k - 2 * pad
    return n


def _conv2d(rng):
    cin, cout = (int(v) for v in rng.integers(1, 3, size=2))
    k = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    lead = (2,) if rng.random() < 0.5 else ()
    x = rng.normal(size=lead + (cin, _extent(rng, k, stride, pad), _extent(rng, k, stride, pad)))
    w = rng.normal(size=(cout, cin, k, k))
    b = rng.normal(size=cout)
    return [x, w, b], lambda x, w, b: ad.conv2d(x, w, b, stride, pad)


def _conv3d(rng):
    cin, cout = (int(v) for v in rng.integers(1, 3, size=2))
    k = int(rng.integers(1, 3))
    pad = int(rng.integers(0, 2))
    stride = int(rng.integers(1, 3))
    lead = (2,) if rng.random() < 0.5 else ()
    x = rng.normal(size=lead + (cin,) + tuple(_extent(rng, k, stride, pad) for _ in range(3)))
    w = rng.normal(size=(cout, cin, k, k, k))
    b = rng.normal(size=cout)
    return [x, w, b], lambda x, w, b: ad.conv3d(x, w, b, stride, pad)


def _maxpool2d(rng):
    c = int(rng.integers(1, 3))
    win = int(rng.integers(1, 4))
    stride = int(rng.integers(1, 3))
    h, w = rng.integers(win, win + 4, size=2)
    lead = (2,) if rng.random() < 0.5 else ()
    return [_spread(rng, lead + (c, h, w))], lambda x: ad.maxpool2d(x, win, stride)


def _maxpool3d(rng):
    c = int(rng.integers(1, 3))
    win = int(rng.integers(1, 3))
    d, h = rng.integers(win, win + 3, size=2)
    lead = (2,) if rng.random() < 0.5 else ()
    return [_spread(rng, lead + (c, d, h, h))], lambda x: ad.maxpool3d(x, win, win)


def _dense(rng):
    n, m = rng.integers(1, 7, size=2)
    lead = (int(rng.integers(1, 4)),) if rng.random() < 0.5 else ()
    return ([rng.normal(size=lead + (n,)), rng.normal(size=(m, n)), rng.normal(size=m)],
            lambda x, w, b: ad.dense(x, w, b))


def _shape(rng, max_rank=3):
    return tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, max_rank + 1))))


def _unary(fn, sampler):
    def make(rng):
        return [sampler(rng, _shape(rng))], fn
    return make


def _lstm_params(rng, i, h):
    return [rng.normal(scale=0.5, size=(4 * h, i)), rng.normal(scale=0.5, size=(4 * h, h)),
            rng.normal(scale=0.5, size=4 * h)]


def _lstm_cell(rng):
    i, h = rng.integers(1, 5, size=2)
    lead = (int(rng.integers(1, 3)),) if rng.random() < 0.5 else ()
    arrays = [rng.normal(size=lead + (i,)), rng.normal(size=lead + (h,)),
              rng.normal(size=lead + (h,))] + _lstm_params(rng, i, h)

    def fn(x, hp, cp, wx, wh, b):
        h_, c_ = ad.lstm_cell(x, hp, cp, ad.LSTMParams(wx, wh, b))
        return ad.add(h_, c_)
    return arrays, fn


def _multilayer_lstm(rng):
    t = int(rng.integers(1, 4))
    i, h = rng.integers(1, 4, size=2)
    layers = int(rng.integers(1, 3))
    arrays = [rng.normal(size=(t, i))]
    width = i
    for _ in range(layers):
        arrays += _lstm_params(rng, width, h)
        width = h

    def fn(seq, *ps):
        params = [ad.LSTMParams(*ps[k:k + 3]) for k in range(0, len(ps), 3)]
        return ad.multilayer_lstm(seq, params)
    return arrays, fn


def _bce(rng):
    shape = _shape(rng, 2)
    labels = rng.integers(0, 2, size=shape)
    return [rng.uniform(0.05, 0.95, size=shape)], lambda p: ad.bce_loss(p, labels)


def _binary(fn):
    def make(rng):
        s = _shape(rng)
        return [rng.normal(size=s), rng.normal(size=s)], fn
    return make


def _matmul(rng):
    n, k, m = rng.integers(1, 5, size=3)
    return [rng.normal(size=(n, k)), rng.normal(size=(k, m))], ad.matmul


def _getitem(rng):
    s = _shape(rng)
    x = rng.normal(size=s)
    idx = tuple(slice(int(rng.integers(0, d)), None) for d in s)
    if rng.random() < 0.3:
        idx = (rng.integers(0, s[0], size=3),)  # repeated fancy index accumulates
    return [x], lambda a: ad.getitem(a, idx)


def _reshape(rng):
    s = _shape(rng)
    return [rng.normal(size=s)], lambda a: ad.reshape(a, (-1,))


def _stack(rng):
    s = _shape(rng, 2)
    k = int(rng.integers(1, 4))
    axis = int(rng.integers(0, len(s) + 1))
    return [rng.normal(size=s) for _ in range(k)], lambda *ts: ad.stack(list(ts), axis)


def _flatten(rng):
    s = (int(rng.integers(1, 3)),) + _shape(rng)
    return [rng.normal(size=s)], ad.flatten


CASES = {
    "add": _binary(ad.add),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul),
    "scale": _unary(lambda a: ad.scale(a, -1.7), lambda r, s: r.normal(size=s)),
    "tsum": _unary(ad.tsum, lambda r, s: r.normal(size=s)),
    "mean": _unary(ad.mean, lambda r, s: r.normal(size=s)),
    "reshape": _reshape,
    "getitem": _getitem,
    "stack": _stack,
    "matmul": _matmul,
    "flatten": _flatten,
    "conv2d": _conv2d,
    "conv3d": _conv3d,
    "maxpool2d": _maxpool2d,
    "maxpool3d": _maxpool3d,
    "dense": _dense,
    "relu": _unary(ad.relu, _away_from_zero),
    "sigmoid": _unary(ad.sigmoid, lambda r, s: r.normal(scale=2.0, size=s)),
    "tanh": _unary(ad.tanh, lambda r, s: r.normal(size=s)),
    "lstm_cell": _lstm_cell,
    "multilayer_lstm": _multilayer_lstm,
    "bce_loss": _bce,
}


def _loss(fn, arrays, weights):
    with ad.float64_mode():
        out = fn(*[Tensor(a, dtype=np.float64) for a in arrays])
    return float(np.sum(out.data * weights))


def relative_error(fn, arrays, rng, wide: bool) -> float:
    """Worst relative error between backward() and central differences over all inputs.

    The gradient under test comes from the 32-bit (or 64-bit with ``wide``)
    graph. The difference quotient itself is always evaluated in float64 on
    the same input values: a float32 forward rounds the loss by ~6e-8*|L|,
    which over a 2e-3 step would swamp small gradient components.
    """
    dtype = np.float64 if wide else np.float32
    h = 1e-6 if wide else 1e-3
    arrays = [np.asarray(a, dtype=dtype) for a in arrays]
    with ad.float64_mode() if wide else contextlib.nullcontext():
        ts = [Tensor(a, requires_grad=True, dtype=dtype) for a in arrays]
        out = fn(*ts)
        weights = rng.normal(size=out.shape)
        ad.backward(ad.tsum(ad.mul(out, Tensor(weights, dtype=dtype))))
    ref = [a.astype(np.float64) for a in arrays]
    worst = 0.0
    for k, a in enumerate(ref):
        num = np.zeros(a.shape)
        for idx in np.ndindex(a.shape):
            plus = [x.copy() for x in ref]
            minus = [x.copy() for x in ref]
            plus[k][idx] += h
            minus[k][idx] -= h
            num[idx] = (_loss(fn, plus, weights) - _loss(fn, minus, weights)) / (2 * h)
        ana = ts[k].grad.astype(np.float64) if ts[k].grad is not None else np.zeros(a.shape)
        scale = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-3)
        worst = max(worst, float(np.linalg.norm(ana - num) / scale))
    return worst


def run_case(name: str, wide: bool, trials: int = TRIALS, seed: int = 0) -> list[float]:
    rng = np.random.default_rng([seed, sorted(CASES).index(name), int(wide)])
    errs = []
    for _ in range(trials):
        arrays, fn = CASES[name](rng)
        errs.append(relative_error(fn, arrays, rng, wide))
    return errs
