"""The three stack classifiers and their binary weight format.

* ``CNN3D``     - conv3d/maxpool stages over the whole 13-slice volume, dense head.
* ``CNN_LSTM``  - a shared 2D extractor per slice, stacked LSTM, dense head.
* ``DCNN_LSTM`` - as ``CNN_LSTM`` but fed the 12 successive-slice differences.

Weight file layout (little-endian)::

    b"VSDL" | u32 version | u32 tensor count
    per tensor: u16 name length | UTF-8 name | u8 rank | u32 dims[rank] | f32 data
"""
from __future__ import annotations

import enum
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import datapipe
from .autodiff import (LSTMParams, Tensor, conv2d, conv3d, dense, flatten, maxpool2d, maxpool3d,
                       multilayer_lstm, no_grad, relu, reshape, sigmoid)
from .datapipe import STACK_LEN, SliceStack
from .errors import (BadMagicError, ConfigError, InputError, NameMismatchError,
                     ShapeMismatchError, TrailingBytesError, TruncatedFileError, VersionError)

MAGIC = b"VSDL"
FORMAT_VERSION = 1


class ModelKind(str, enum.Enum):
    CNN3D = "CNN3D"
    CNN_LSTM = "CNN_LSTM"
    DCNN_LSTM = "DCNN_LSTM"

    @classmethod
    def parse(cls, text: str) -> "ModelKind":
        key = str(text).upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            raise ConfigError(f"unknown model kind {text!r}; use cnn3d, cnn-lstm or dcnn-lstm") from None


@dataclass(frozen=True)
class Stage:
    channels: int
    kernel: int = 3
    stride: int = 1
    pool: int = 2


DEFAULT_EXTRACTOR = (Stage(8), Stage(16), Stage(32))


@dataclass(frozen=True)
class ModelSpec:
    kind: ModelKind
    input_side: int = 64
    extractor: tuple[Stage, ...] = DEFAULT_EXTRACTOR
    lstm_layers: int = 2
    lstm_hidden: int = 64
    head: tuple[int, ...] = (32, 1)

    @property
    def sequence_len(self) -> int:
        """Timesteps (or depth) the network consumes from a 13-slice stack."""
        return STACK_LEN - 1 if self.kind is ModelKind.DCNN_LSTM else STACK_LEN

    @property
    def recurrent(self) -> bool:
        return self.kind is not ModelKind.CNN3D

    def feature_geometry(self) -> tuple[int, ...]:
        """Extractor output shape per sample: (C, H, W) or (C, D, H, W) for CNN3D."""
        if not self.extractor:
            raise ConfigError("extractor needs at least one stage")
        side = self.input_side
        depth = self.sequence_len
        c = 1
        for i, st in enumerate(self.extractor):
            if st.channels < 1 or st.kernel < 1 or st.stride < 1 or st.pool < 1:
                raise ConfigError(f"stage {i}: channels, kernel, stride and pool must be positive")
            pad = st.kernel // 2
            span = side + 2 * pad - st.kernel
            if span < 0 or span % st.stride:
                raise ConfigError(f"stage {i}: kernel {st.kernel}/stride {st.stride} does not tile side {side}")
            side = span // st.stride + 1
            if not self.recurrent:
                dspan = depth + 2 * pad - st.kernel
                if dspan < 0 or dspan % st.stride:
                    raise ConfigError(f"stage {i}: kernel does not tile depth {depth}")
                depth = dspan // st.stride + 1
            if st.pool > side:
                raise ConfigError(f"stage {i}: pool {st.pool} larger than feature side {side}")
            side = (side - st.pool) // st.pool + 1
            if not self.recurrent:
                dp = min(st.pool, depth)
                depth = (depth - dp) // dp + 1
            c = st.channels
        return (c, side, side) if self.recurrent else (c, depth, side, side)

    def feature_size(self) -> int:
        return int(np.prod(self.feature_geometry()))

    def validate(self) -> None:
        if self.input_side < 4:
            raise ConfigError("input_side must be at least 4")
        if not self.head or self.head[-1] != 1 or min(self.head) < 1:
            raise ConfigError(f"head widths must be positive and end in 1, got {self.head}")
        if self.recurrent and (self.lstm_layers < 1 or self.lstm_hidden < 1):
            raise ConfigError("LSTM needs at least one layer and a positive hidden size")
        self.feature_geometry()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["extractor"] = [asdict(s) for s in self.extractor]
        d["head"] = list(self.head)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        d = dict(d)
        kind = ModelKind.parse(d.pop("kind"))
        if "extractor" in d:
            d["extractor"] = tuple(Stage(**s) if isinstance(s, dict) else Stage(*s) for s in d["extractor"])
        if "head" in d:
            d["head"] = tuple(int(w) for w in d["head"])
        try:
            spec = cls(kind, **d)
        except TypeError as exc:
            raise ConfigError(f"bad model spec: {exc}") from exc
        spec.validate()
        return spec


def param_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for a spec."""
    spec.validate()
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, st in enumerate(spec.extractor, 1):
        k = (st.kernel,) * (2 if spec.recurrent else 3)
        shapes[f"conv{i}.weight"] = (st.channels, c_in) + k
        shapes[f"conv{i}.bias"] = (st.channels,)
        c_in = st.channels
    width = spec.feature_size()
    if spec.recurrent:
        h = spec.lstm_hidden
        for li in range(1, spec.lstm_layers + 1):
            shapes[f"lstm{li}.w_x"] = (4 * h, width)
            shapes[f"lstm{li}.w_h"] = (4 * h, h)
            shapes[f"lstm{li}.bias"] = (4 * h,)
            width = h
    for j, out in enumerate(spec.head, 1):
        shapes[f"fc{j}.weight"] = (out, width)
        shapes[f"fc{j}.bias"] = (out,)
        width = out
    return shapes


def _init_param(name: str, shape, spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    if name.startswith("lstm"):
        bound = np.sqrt(1.0 / spec.lstm_hidden)
        return rng.uniform(-bound, bound, size=shape)
    if name.endswith(".bias"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:]))
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


@dataclass
class Network:
    spec: ModelSpec
    parameters: dict[str, Tensor]
    rng_seed: int = 0
    threshold: float | None = field(default=None, compare=False)

    @property
    def kind(self) -> ModelKind:
        return self.spec.kind

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.parameters.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, p in self.parameters.items():
            p.data = np.array(state[k], dtype=p.data.dtype, copy=True)

    def forward(self, batch: np.ndarray) -> Tensor:
        """Probabilities ``[B]`` for a batch of raw stacks ``[B, 13, S, S]``."""
        return forward_batch(self, batch)

    def predict(self, batch: np.ndarray) -> np.ndarray:
        with no_grad():
            return self.forward(batch).data.copy()


def build(spec: ModelSpec, seed: int = 0) -> Network:
    """Fresh network with parameters drawn deterministically from ``seed``."""
    shapes = param_shapes(spec)
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        params[name] = Tensor(_init_param(name, shape, spec, rng).astype(np.float32),
                              requires_grad=True, dtype=np.float32)
    return Network(spec, params, seed)


def _check_batch(spec: ModelSpec, batch) -> np.ndarray:
    x = np.asarray(batch, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    want = (STACK_LEN, spec.input_side, spec.input_side)
    if x.ndim != 4 or x.shape[1:] != want:
        raise InputError(f"expected stacks of shape {want}, got {x.shape[1:] if x.ndim == 4 else x.shape}")
    if not np.all(np.isfinite(x)) or x.min() < 0 or x.max() > 1:
        raise InputError("stack values must be normalised to [0, 1]")
    return x


def _extract_2d(net: Network, frames: np.ndarray) -> Tensor:
    """Shared 2D extractor over ``[N, H, W]`` frames -> ``[N, features]``."""
    p = net.parameters
    h = Tensor(frames[:, None], dtype=frames.dtype)
    for i, st in enumerate(net.spec.extractor, 1):
        h = relu(conv2d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], st.stride, st.kernel // 2))
        if st.pool > 1:
            h = maxpool2d(h, st.pool, st.pool)
    return flatten(h)


def _lstm_layers(net: Network) -> list[LSTMParams]:
    p = net.parameters
    return [LSTMParams(p[f"lstm{i}.w_x"], p[f"lstm{i}.w_h"], p[f"lstm{i}.bias"])
            for i in range(1, net.spec.lstm_layers + 1)]


def _head(net: Network, h: Tensor) -> Tensor:
    p = net.parameters
    n = len(net.spec.head)
    for j in range(1, n + 1):
        h = dense(h, p[f"fc{j}.weight"], p[f"fc{j}.bias"])
        h = relu(h) if j < n else sigmoid(h)
    return reshape(h, (h.shape[0],))


def _sequence_forward(net: Network, frames: np.ndarray) -> Tensor:
    b, t = frames.shape[:2]
    # time-major so the extractor output reshapes straight to [T, B, F]
    tm = np.ascontiguousarray(frames.transpose(1, 0, 2, 3)).reshape((t * b,) + frames.shape[2:])
    feats = _extract_2d(net, tm)
    seq = reshape(feats, (t, b, feats.shape[1]))
    return _head(net, multilayer_lstm(seq, _lstm_layers(net)))


def _cnn3d_forward(net: Network, x: np.ndarray) -> Tensor:
    p = net.parameters
    h = Tensor(x[:, None], dtype=x.dtype)
    for i, st in enumerate(net.spec.extractor, 1):
        h = relu(conv3d(h, p[f"conv{i}.weight"], p[f"conv{i}.bias"], st.stride, st.kernel // 2))
        if st.pool > 1:
            dp = min(st.pool, h.shape[2])
            h = maxpool3d(h, (dp, st.pool, st.pool), (dp, st.pool, st.pool))
    return _head(net, flatten(h))


def timesteps(spec: ModelSpec, stack_len: int = STACK_LEN) -> int:
    """Sequence positions the recurrent pathway runs for a stack of ``stack_len`` slices."""
    return stack_len - 1 if spec.kind is ModelKind.DCNN_LSTM else stack_len


def forward_batch(net: Network, batch) -> Tensor:
    x = _check_batch(net.spec, batch)
    if net.kind is ModelKind.CNN3D:
        return _cnn3d_forward(net, x)
    if net.kind is ModelKind.DCNN_LSTM:
        x = datapipe.differential_array(x, axis=1)
    return _sequence_forward(net, x)


def _stack_array(stack) -> np.ndarray:
    return stack.slices if isinstance(stack, SliceStack) else np.asarray(stack)


def _single(net: Network, stack, kind: ModelKind) -> float:
    if net.kind is not kind:
        raise ConfigError(f"network is {net.kind.value}, not {kind.value}")
    arr = _stack_array(stack)
    if arr.ndim != 3 or arr.shape[0] != STACK_LEN:
        raise InputError(f"expected a {STACK_LEN}-slice stack, got shape {arr.shape}")
    return float(net.predict(arr[None])[0])


def forward_cnn3d(net: Network, stack) -> float:
    return _single(net, stack, ModelKind.CNN3D)


def forward_cnn_lstm(net: Network, stack) -> float:
    return _single(net, stack, ModelKind.CNN_LSTM)


def forward_dcnn_lstm(net: Network, stack) -> float:
    return _single(net, stack, ModelKind.DCNN_LSTM)


# --- weight files ---------------------------------------------------------

def encode_weights(params: dict[str, np.ndarray]) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<II", FORMAT_VERSION, len(params))
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def decode_weights(blob: bytes) -> dict[str, np.ndarray]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFileError(f"file ends inside {what} (offset {pos}, need {n} bytes)")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError(f"not a VSDL weight file (magic {bytes(blob[:4])!r})")
    pos = 4
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise VersionError(f"unsupported weight format version {version} (expected {FORMAT_VERSION})")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "tensor name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, f"rank of {name}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name}"))
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * n, f"data of {name}"), dtype="<f4").reshape(dims)
        params[name] = data.astype(np.float32)
    if pos != len(blob):
        raise TrailingBytesError(f"{len(blob) - pos} unexpected bytes after the last tensor")
    return params


def save_weights(net: Network, path) -> None:
    Path(path).write_bytes(encode_weights(net.state()))


def load_weights(spec: ModelSpec, path) -> Network:
    """Network for ``spec`` whose parameters come from a weight file."""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"weight file not found: {path}")
    params = decode_weights(path.read_bytes())
    want = param_shapes(spec)
    missing = [k for k in want if k not in params]
    extra = [k for k in params if k not in want]
    if missing or extra:
        raise NameMismatchError(f"{path}: missing tensors {missing}, unexpected tensors {extra}")
    for k, shape in want.items():
        if params[k].shape != shape:
            raise ShapeMismatchError(f"{path}: tensor {k!r} has shape {params[k].shape}, spec expects {shape}")
    tensors = {k: Tensor(params[k], requires_grad=True, dtype=np.float32) for k in want}
    return Network(spec, tensors, 0)
