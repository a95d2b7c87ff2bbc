"""A small numpy neural-network engine: layers, spatial cross-entropy, Adam.

Activations are channels-last: ``(N, H, W, C)`` for feature maps and
``(N, F)`` for dense features.  Dense layers act on the last axis, so a dense
layer on a feature map is a 1x1 convolution.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import SeededRng, ensure_rng

CKPT_MAGIC = b"SPDACKPT"
CKPT_VERSION = 1


class NetworkError(ValueError):
    pass


# --------------------------------------------------------------------------
# Layers
# --------------------------------------------------------------------------


class Layer:
    params: tuple[str, ...] = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def param_arrays(self) -> list[np.ndarray]:
        return [getattr(self, p) for p in self.params]

    def grad_arrays(self) -> list[np.ndarray]:
        return [getattr(self, "d" + p) for p in self.params]

    def astype(self, dtype) -> None:
        for p in self.params:
            setattr(self, p, getattr(self, p).astype(dtype))
            setattr(self, "d" + p, np.zeros_like(getattr(self, p)))


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero 'same' padding."""

    params = ("W", "b")

    def __init__(self, cin: int, cout: int, gen: np.random.Generator | None = None, dtype=np.float32, zero=False):
        self.cin, self.cout = cin, cout
        limit = np.sqrt(6.0 / (9 * cin))
        if zero or gen is None:
            self.W = np.zeros((9 * cin, cout), dtype=dtype)
        else:
            self.W = gen.uniform(-limit, limit, size=(9 * cin, cout)).astype(dtype)
        self.b = np.zeros(cout, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._cols = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[-1] != self.cin:
            raise NetworkError(f"conv expects (N,H,W,{self.cin}), got {x.shape}")
        N, H, W, _ = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = np.concatenate([xp[:, i : i + H, j : j + W, :] for i in range(3) for j in range(3)], axis=-1)
        self._cols = cols
        return cols @ self.W + self.b

    def backward(self, dy):
        if self._cols is None:
            raise NetworkError("backward called before forward")
        cols = self._cols
        N, H, W, _ = dy.shape
        flat_cols = cols.reshape(-1, cols.shape[-1])
        flat_dy = dy.reshape(-1, self.cout)
        self.dW = flat_cols.T @ flat_dy
        self.db = flat_dy.sum(axis=0)
        dcols = (flat_dy @ self.W.T).reshape(N, H, W, 9, self.cin)
        dxp = np.zeros((N, H + 2, W + 2, self.cin), dtype=dy.dtype)
        for k in range(9):
            i, j = divmod(k, 3)
            dxp[:, i : i + H, j : j + W, :] += dcols[..., k, :]
        return dxp[:, 1:-1, 1:-1, :]


class Dense(Layer):
    """Affine map on the last axis."""

    params = ("W", "b")

    def __init__(self, fin: int, fout: int, gen: np.random.Generator | None = None, dtype=np.float32, zero=False):
        self.fin, self.fout = fin, fout
        limit = np.sqrt(6.0 / fin)
        if zero or gen is None:
            self.W = np.zeros((fin, fout), dtype=dtype)
        else:
            self.W = gen.uniform(-limit, limit, size=(fin, fout)).astype(dtype)
        self.b = np.zeros(fout, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)
        self._x = None

    def forward(self, x):
        if x.shape[-1] != self.fin:
            raise NetworkError(f"dense expects last axis {self.fin}, got {x.shape}")
        self._x = x
        return x @ self.W + self.b

    def backward(self, dy):
        if self._x is None:
            raise NetworkError("backward called before forward")
        x2 = self._x.reshape(-1, self.fin)
        dy2 = dy.reshape(-1, self.fout)
        self.dW = x2.T @ dy2
        self.db = dy2.sum(axis=0)
        return dy @ self.W.T


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0).astype(x.dtype)

    def backward(self, dy):
        if self._mask is None:
            raise NetworkError("backward called before forward")
        return np.where(self._mask, dy, 0).astype(dy.dtype)


class MaxPool2(Layer):
    """2x2 max pooling, stride 2; ties route the gradient to the first maximum."""

    def __init__(self):
        self._arg = None
        self._shape = None

    def forward(self, x):
        N, H, W, C = x.shape
        if H % 2 or W % 2:
            raise NetworkError(f"maxpool needs even extents, got {x.shape}")
        blocks = x.reshape(N, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(N, H // 2, W // 2, C, 4)
        self._arg = np.argmax(blocks, axis=-1)
        self._shape = x.shape
        return np.take_along_axis(blocks, self._arg[..., None], axis=-1)[..., 0]

    def backward(self, dy):
        if self._arg is None:
            raise NetworkError("backward called before forward")
        N, H, W, C = self._shape
        blocks = np.zeros((N, H // 2, W // 2, C, 4), dtype=dy.dtype)
        np.put_along_axis(blocks, self._arg[..., None], dy[..., None], axis=-1)
        return blocks.reshape(N, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(N, H, W, C)


class Upsample2(Layer):
    """Nearest-neighbour 2x upsampling."""

    def __init__(self):
        self._seen = False

    def forward(self, x):
        self._seen = True
        return x.repeat(2, axis=1).repeat(2, axis=2)

    def backward(self, dy):
        if not self._seen:
            raise NetworkError("backward called before forward")
        N, H, W, C = dy.shape
        return dy.reshape(N, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


# --------------------------------------------------------------------------
# Networks
# --------------------------------------------------------------------------

_LAYER_TYPES = {"conv3x3", "dense", "relu", "maxpool2", "upsample2"}


def fcn_spec(in_channels: int = 1, num_classes: int = 3, width: int = 8) -> list[dict]:
    """Two-level encoder-decoder used as the toy segmentation model."""
    w, w2 = width, 2 * width
    return [
        {"type": "conv3x3", "in": in_channels, "out": w},
        {"type": "relu"},
        {"type": "maxpool2"},
        {"type": "conv3x3", "in": w, "out": w2},
        {"type": "relu"},
        {"type": "maxpool2"},
        {"type": "conv3x3", "in": w2, "out": w2},
        {"type": "relu"},
        {"type": "upsample2"},
        {"type": "conv3x3", "in": w2, "out": w},
        {"type": "relu"},
        {"type": "upsample2"},
        {"type": "conv3x3", "in": w, "out": w},
        {"type": "relu"},
        {"type": "dense", "in": w, "out": num_classes},
    ]


def validate_spec(spec: list[dict]) -> None:
    if not any(d.get("type") in ("conv3x3", "dense") for d in spec):
        raise NetworkError("network needs at least one parameterized layer")
    width = None
    for i, d in enumerate(spec):
        t = d.get("type")
        if t not in _LAYER_TYPES:
            raise NetworkError(f"layer {i}: unknown type {t!r}")
        if t in ("conv3x3", "dense"):
            if width is not None and d["in"] != width:
                raise NetworkError(f"layer {i}: expects {d['in']} inputs but previous layer gives {width}")
            width = d["out"]


class Network:
    """Sequential stack of layers built from a JSON-able spec."""

    def __init__(self, spec: list[dict], rng: SeededRng | int | None = None, dtype=np.float32, zero_last=False):
        validate_spec(spec)
        self.spec = [dict(d) for d in spec]
        gen = ensure_rng(rng).stream("init")
        last = max(i for i, d in enumerate(spec) if d["type"] in ("conv3x3", "dense"))
        self.layers: list[Layer] = []
        for i, d in enumerate(spec):
            t = d["type"]
            z = zero_last and i == last
            if t == "conv3x3":
                self.layers.append(Conv3x3(d["in"], d["out"], gen, dtype, zero=z))
            elif t == "dense":
                self.layers.append(Dense(d["in"], d["out"], gen, dtype, zero=z))
            elif t == "relu":
                self.layers.append(ReLU())
            elif t == "maxpool2":
                self.layers.append(MaxPool2())
            else:
                self.layers.append(Upsample2())
        self._forwarded = False

    @property
    def dtype(self):
        return self.parameters()[0].dtype

    @property
    def downsample(self) -> int:
        return 2 ** sum(d["type"] == "maxpool2" for d in self.spec)

    def logits(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        first = next(d for d in self.spec if d["type"] in ("conv3x3", "dense"))
        if x.shape[-1] != first["in"]:
            raise NetworkError(f"input has {x.shape[-1]} channels, network expects {first['in']}")
        if x.ndim == 4 and (x.shape[1] % self.downsample or x.shape[2] % self.downsample):
            raise NetworkError(f"spatial extents {x.shape[1:3]} must be divisible by {self.downsample}")
        for layer in self.layers:
            x = layer.forward(x)
        self._forwarded = True
        return x

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Per-pixel class probabilities."""
        return softmax(self.logits(x))

    def backward(self, grad_out: np.ndarray) -> list[np.ndarray]:
        if not self._forwarded:
            raise NetworkError("backward called before forward")
        g = np.asarray(grad_out, dtype=self.dtype)
        for layer in reversed(self.layers):
            g = layer.backward(g)
        self.input_grad = g
        return self.gradients()

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.param_arrays()]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.grad_arrays()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.reshape(-1) for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat)
        if flat.size != self.num_parameters():
            raise NetworkError(f"buffer has {flat.size} values, network has {self.num_parameters()}")
        i = 0
        for layer in self.layers:
            for name in layer.params:
                p = getattr(layer, name)
                setattr(layer, name, flat[i : i + p.size].reshape(p.shape).astype(p.dtype))
                i += p.size

    def astype(self, dtype) -> "Network":
        """Copy of this network with parameters cast to ``dtype``."""
        other = Network.__new__(Network)
        other.spec = [dict(d) for d in self.spec]
        other.layers = []
        for layer in self.layers:
            clone = type(layer).__new__(type(layer))
            clone.__dict__.update(layer.__dict__)
            clone.astype(dtype)
            other.layers.append(clone)
        other._forwarded = False
        return other


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def spatial_cross_entropy(logits: np.ndarray, label: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over pixels of -log p(true class), and its gradient w.r.t. the logits."""
    C = logits.shape[-1]
    lab = np.asarray(label)
    if lab.shape != logits.shape[:-1]:
        raise NetworkError(f"label shape {lab.shape} does not match prediction {logits.shape[:-1]}")
    if lab.size and (lab.min() < 0 or lab.max() >= C):
        raise NetworkError(f"label ids must lie in [0, {C})")
    z = logits - logits.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsum
    idx = lab[..., None].astype(np.int64)
    count = lab.size
    loss = float(-np.take_along_axis(logp, idx, axis=-1).sum(dtype=np.float64) / count)
    grad = np.exp(logp)
    np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=-1) - 1, axis=-1)
    return loss, (grad / count).astype(logits.dtype)


# --------------------------------------------------------------------------
# Optimizer
# --------------------------------------------------------------------------


def lr_schedule(step: int, base: float = 5e-4, decayed: float = 5e-5, boundary: int = 30000) -> float:
    """Step-decay learning rate: ``base`` for steps 1..boundary, ``decayed`` afterwards."""
    return base if step <= boundary else decayed


@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState) -> list[np.ndarray]:
    """Bias-corrected Adam update, in place; returns ``params``."""
    if len(params) != len(grads):
        raise NetworkError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise NetworkError(f"param {i}: shape {p.shape} vs grad {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {i}")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    spec: list[dict] | dict
    params: np.ndarray
    step: int = 0
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)

    def save(self, path: str | os.PathLike) -> None:
        header = {"spec": self.spec, "step": int(self.step), "meta": self.meta, "params": int(self.params.size)}
        buffers = [np.asarray(self.params, dtype="<f4")]
        if self.adam is not None and self.adam.m:
            header["adam"] = {
                "lr": self.adam.lr,
                "beta1": self.adam.beta1,
                "beta2": self.adam.beta2,
                "eps": self.adam.eps,
                "t": self.adam.t,
                "shapes": [list(m.shape) for m in self.adam.m],
            }
            buffers += [np.asarray(m, dtype="<f4").reshape(-1) for m in self.adam.m]
            buffers += [np.asarray(v, dtype="<f4").reshape(-1) for v in self.adam.v]
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CKPT_MAGIC)
            fh.write(struct.pack("<I", CKPT_VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            for b in buffers:
                fh.write(b.tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        buf = Path(path).read_bytes()
        if buf[:8] != CKPT_MAGIC or len(buf) < 16:
            raise NetworkError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", buf[8:12])
        if version != CKPT_VERSION:
            raise NetworkError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<I", buf[12:16])
        try:
            header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise NetworkError(f"{path}: corrupt checkpoint header") from exc
        off = 16 + hlen
        n = header["params"]
        shapes = header.get("adam", {}).get("shapes", [])
        expected = off + 4 * (n + 2 * sum(int(np.prod(s)) for s in shapes))
        if len(buf) != expected:
            raise NetworkError(f"{path}: expected {expected} bytes, found {len(buf)}")
        params = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32)
        off += 4 * n
        adam = None
        if "adam" in header:
            a = header["adam"]
            ms, vs = [], []
            for target in (ms, vs):
                for shape in a["shapes"]:
                    size = int(np.prod(shape))
                    target.append(np.frombuffer(buf, dtype="<f4", count=size, offset=off).astype(np.float32).reshape(shape))
                    off += 4 * size
            adam = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"], ms, vs)
        if off != len(buf):
            raise NetworkError(f"{path}: trailing or missing bytes")
        return cls(header["spec"], params, header["step"], adam, header.get("meta", {}))


def checkpoint_of(net: Network, step: int = 0, adam: AdamState | None = None, meta: dict | None = None) -> Checkpoint:
    return Checkpoint(net.spec, net.get_flat().astype(np.float32), step, adam, dict(meta or {}))


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = Network(ckpt.spec)
    net.set_flat(ckpt.params)
    return net
