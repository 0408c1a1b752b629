"""Minimal numpy layers and the two collision-classifier architectures.

Tensors are batch-first. Convolutions take ``(batch, channels, length)``;
flattening is channel-major, i.e. ``(batch, channels * length)`` with the
position index varying fastest. Weight files depend on this order.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class ShapeError(ValueError):
    pass


class Layer:
    params: list[np.ndarray]
    grads: list[np.ndarray]

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class Conv1d(Layer):
    """Zero-padded 1-D convolution with stride 1."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, padding: int = 1, dtype=np.float32):
        self.in_ch, self.out_ch, self.kernel, self.padding = in_ch, out_ch, kernel, padding
        self.W = np.zeros((out_ch, in_ch, kernel), dtype=dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def fan(self) -> tuple[int, int]:
        return self.in_ch * self.kernel, self.out_ch * self.kernel

    def _cols(self, x: np.ndarray) -> np.ndarray:
        B, C, L = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (self.padding, self.padding)))
        self._out_len = L + 2 * self.padding - self.kernel + 1
        # (B, C, k, Lout) -> (B, Lout, C, k)
        stacked = np.stack([xp[:, :, t : t + self._out_len] for t in range(self.kernel)], axis=2)
        return stacked.transpose(0, 3, 1, 2).reshape(B * self._out_len, C * self.kernel)

    def forward(self, x):
        if x.ndim != 3 or x.shape[1] != self.in_ch:
            raise ShapeError(f"Conv1d expects (batch, {self.in_ch}, length), got {x.shape}")
        self._x_shape = x.shape
        self._col = self._cols(x)
        out = self._col @ self.W.reshape(self.out_ch, -1).T + self.b
        return out.reshape(x.shape[0], self._out_len, self.out_ch).transpose(0, 2, 1)

    def backward(self, dout):
        B, C, L = self._x_shape
        d2 = dout.transpose(0, 2, 1).reshape(B * self._out_len, self.out_ch)
        self.grads[0][...] = (d2.T @ self._col).reshape(self.W.shape)
        self.grads[1][...] = d2.sum(axis=0)
        dcol = (d2 @ self.W.reshape(self.out_ch, -1)).reshape(B, self._out_len, C, self.kernel)
        dxp = np.zeros((B, C, L + 2 * self.padding), dtype=dout.dtype)
        for t in range(self.kernel):
            dxp[:, :, t : t + self._out_len] += dcol[:, :, :, t].transpose(0, 2, 1)
        return dxp[:, :, self.padding : self.padding + L]


class Dense(Layer):
    def __init__(self, n_in: int, n_out: int, dtype=np.float32):
        self.W = np.zeros((n_out, n_in), dtype=dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.params = [self.W, self.b]
        self.grads = [np.zeros_like(self.W), np.zeros_like(self.b)]

    def fan(self) -> tuple[int, int]:
        return self.W.shape[1], self.W.shape[0]

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.W.shape[1]:
            raise ShapeError(f"Dense expects (batch, {self.W.shape[1]}), got {x.shape}")
        self._x = x
        return x @ self.W.T + self.b

    def backward(self, dout):
        self.grads[0][...] = dout.T @ self._x
        self.grads[1][...] = dout.sum(axis=0)
        return dout @ self.W


class ReLU(Layer):
    def __init__(self):
        self.params, self.grads = [], []

    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Flatten(Layer):
    def __init__(self):
        self.params, self.grads = [], []

    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class AntennaMean(Layer):
    """Average the antenna rows of a window into one correlation profile."""

    def __init__(self):
        self.params, self.grads = [], []

    def forward(self, x):
        self._n = x.shape[1]
        return x.mean(axis=1)

    def backward(self, dout):
        return np.repeat(dout[:, None, :], self._n, axis=1) / self._n


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class ClassifierArch:
    """Two conv layers (16 and 32 channels, kernel 3, padding 1) then a dense
    layer onto ``k_max + 1`` classes."""

    n_ant: int = 8
    n_cs: int = 8
    k_max: int = 6
    channels: tuple[int, int] = (16, 32)
    kernel: int = 3

    kind = "cnn"

    @property
    def n_classes(self) -> int:
        return self.k_max + 1

    def layers(self, dtype=np.float32) -> list[Layer]:
        c1, c2 = self.channels
        pad = self.kernel // 2
        return [
            Conv1d(self.n_ant, c1, self.kernel, pad, dtype),
            ReLU(),
            Conv1d(c1, c2, self.kernel, pad, dtype),
            ReLU(),
            Flatten(),
            Dense(c2 * self.n_cs, self.n_classes, dtype),
        ]

    def n_params(self) -> int:
        c1, c2 = self.channels
        k = self.kernel
        return (self.n_ant * c1 * k + c1) + (c1 * c2 * k + c2) + (c2 * self.n_cs + 1) * self.n_classes


@dataclass(frozen=True)
class MlpArch:
    """Antenna-averaged fully-connected baseline."""

    n_ant: int = 8
    n_cs: int = 8
    k_max: int = 6
    hidden: tuple[int, ...] = (512, 256)

    kind = "mlp"

    @property
    def n_classes(self) -> int:
        return self.k_max + 1

    def layers(self, dtype=np.float32) -> list[Layer]:
        out: list[Layer] = [AntennaMean()]
        width = self.n_cs
        for h in self.hidden:
            out += [Dense(width, h, dtype), ReLU()]
            width = h
        out.append(Dense(width, self.n_classes, dtype))
        return out

    def n_params(self) -> int:
        widths = [self.n_cs, *self.hidden, self.n_classes]
        return sum(a * b + b for a, b in zip(widths, widths[1:]))


@dataclass
class Network:
    arch: ClassifierArch | MlpArch
    dtype: type = np.float32
    layers: list[Layer] = field(init=False)

    def __post_init__(self):
        self.layers = self.arch.layers(self.dtype)

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def init_weights(self, rng: np.random.Generator) -> "Network":
        """Glorot-uniform weights, zero biases."""
        for layer in self.layers:
            if not layer.params:
                continue
            fan_in, fan_out = layer.fan()
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            W, b = layer.params
            W[...] = rng.uniform(-limit, limit, W.shape)
            b[...] = 0
        return self

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 2:
            x = x[None]
        if x.shape[1:] != (self.arch.n_ant, self.arch.n_cs):
            raise ShapeError(
                f"input windows must be ({self.arch.n_ant}, {self.arch.n_cs}), got {x.shape[1:]}"
            )
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.logits(x))

    def loss_and_grad(self, x: np.ndarray, labels: np.ndarray) -> float:
        """Mean cross-entropy over the batch; fills every layer's ``grads``."""
        logits = self.logits(x)
        p = softmax(logits)
        n = len(labels)
        idx = np.arange(n)
        loss = -float(np.mean(np.log(np.maximum(p[idx, labels], np.finfo(p.dtype).tiny))))
        d = p.copy()
        d[idx, labels] -= 1
        d /= n
        for layer in reversed(self.layers):
            d = layer.backward(d)
        return loss

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        if flat.size != self.n_params():
            raise ShapeError(f"expected {self.n_params()} parameters, got {flat.size}")
        pos = 0
        for p in self.params:
            p[...] = flat[pos : pos + p.size].reshape(p.shape)
            pos += p.size

    def astype(self, dtype) -> "Network":
        other = Network(self.arch, dtype)
        other.set_flat_params(self.flat_params().astype(dtype))
        return other

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def forward(net: Network, window) -> np.ndarray:
    """Class probabilities for one window (``CorrelationWindow`` or array)."""
    values = getattr(window, "values", window)
    return net.predict_proba(np.asarray(values))[0]


# Weight file layout (little-endian):
#   magic b"LRCW", u32 version, u32 kind (0 = cnn, 1 = mlp),
#   u32 n_ant, u32 n_cs, u32 k_max, u32 n_dims, u32 dims[n_dims],
#   u32 n_params, f32 params[n_params]
# dims are (channels..., kernel) for the CNN and the hidden widths for the MLP.
_MAGIC = b"LRCW"
_VERSION = 1


class WeightFileError(ValueError):
    pass


def save_weights(net: Network, path: str | Path) -> None:
    arch = net.arch
    if isinstance(arch, ClassifierArch):
        kind, dims = 0, (*arch.channels, arch.kernel)
    else:
        kind, dims = 1, tuple(arch.hidden)
    flat = net.flat_params().astype("<f4")
    header = struct.pack("<4sIIIIII", _MAGIC, _VERSION, kind, arch.n_ant, arch.n_cs, arch.k_max, len(dims))
    header += struct.pack(f"<{len(dims)}I", *dims) + struct.pack("<I", flat.size)
    Path(path).write_bytes(header + flat.tobytes())


def load_weights(path: str | Path, dtype=np.float32) -> Network:
    data = Path(path).read_bytes()
    base = struct.calcsize("<4sIIIIII")
    if len(data) < base:
        raise WeightFileError(f"{path}: truncated header ({len(data)} bytes)")
    magic, version, kind, n_ant, n_cs, k_max, n_dims = struct.unpack_from("<4sIIIIII", data)
    if magic != _MAGIC or version != _VERSION:
        raise WeightFileError(f"{path}: not a classifier weight file (magic={magic!r}, version={version})")
    off = base
    if len(data) < off + 4 * n_dims + 4:
        raise WeightFileError(f"{path}: truncated header")
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    (n_params,) = struct.unpack_from("<I", data, off)
    off += 4
    if kind == 0:
        if n_dims != 3:
            raise WeightFileError(f"{path}: CNN header expects 3 dims, got {n_dims}")
        arch: ClassifierArch | MlpArch = ClassifierArch(n_ant, n_cs, k_max, (dims[0], dims[1]), dims[2])
    elif kind == 1:
        arch = MlpArch(n_ant, n_cs, k_max, tuple(dims))
    else:
        raise WeightFileError(f"{path}: unknown architecture kind {kind}")
    if n_params != arch.n_params():
        raise WeightFileError(
            f"{path}: header declares {n_params} parameters but the architecture needs {arch.n_params()}"
        )
    if len(data) != off + 4 * n_params:
        raise WeightFileError(
            f"{path}: expected {off + 4 * n_params} bytes, found {len(data)} (truncated or padded)"
        )
    flat = np.frombuffer(data, dtype="<f4", count=n_params, offset=off)
    net = Network(arch, dtype)
    net.set_flat_params(flat.astype(dtype))
    return net
