"""Small fully-convolutional per-pixel classifier with hand-written backprop.

Stack of 3×3 'same' convolutions, tanh between layers and per-class sigmoid
outputs. Weights are stored as ``(C_in, 3, 3, C_out)`` so that they line up
with the im2col column layout.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import FormatError

KERNEL = 3


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def im2col(x: np.ndarray, dilation: int = 1) -> np.ndarray:
    """(B, H, W, C) -> (B·H·W, C·9) patches of the zero-padded input."""
    b, h, w, c = x.shape
    d = dilation
    xp = np.pad(x, ((0, 0), (d, d), (d, d), (0, 0)))
    span = d * (KERNEL - 1) + 1
    win = sliding_window_view(xp, (span, span), axis=(1, 2))[..., ::d, ::d]  # B,H,W,C,3,3
    return win.reshape(b * h * w, c * KERNEL * KERNEL)


def col2im(cols: np.ndarray, shape, dilation: int = 1) -> np.ndarray:
    """Adjoint of :func:`im2col`."""
    b, h, w, c = shape
    d = dilation
    cols = cols.reshape(b, h, w, c, KERNEL, KERNEL)
    dxp = np.zeros((b, h + 2 * d, w + 2 * d, c), dtype=cols.dtype)
    for di in range(KERNEL):
        for dj in range(KERNEL):
            dxp[:, di * d : di * d + h, dj * d : dj * d + w, :] += cols[..., di, dj]
    return dxp[:, d:-d, d:-d, :]


@dataclass
class PixelModel:
    in_channels: int
    widths: tuple[int, ...]  # last entry = number of classes K
    weights: list[np.ndarray] = field(default_factory=list)
    biases: list[np.ndarray] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    dilations: tuple[int, ...] = ()  # per layer, 1 when empty

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations) or (1,) * len(self.widths)
        if len(self.dilations) != len(self.widths) or min(self.dilations) < 1:
            raise ValueError("need one positive dilation per layer")

    @classmethod
    def initialize(cls, in_channels: int, widths: Sequence[int], rng: np.random.Generator, dtype=np.float32,
                   dilations: Sequence[int] = (), **meta):
        model = cls(in_channels, tuple(widths), meta=dict(meta), dilations=tuple(dilations))
        c = in_channels
        for out in widths:
            fan_in = c * KERNEL * KERNEL
            model.weights.append((rng.standard_normal((c, KERNEL, KERNEL, out)) / np.sqrt(fan_in)).astype(dtype))
            model.biases.append(np.zeros(out, dtype=dtype))
            c = out
        return model

    @classmethod
    def zeros(cls, in_channels: int, widths: Sequence[int], dtype=np.float32, dilations: Sequence[int] = (), **meta):
        model = cls(in_channels, tuple(widths), meta=dict(meta), dilations=tuple(dilations))
        c = in_channels
        for out in widths:
            model.weights.append(np.zeros((c, KERNEL, KERNEL, out), dtype=dtype))
            model.biases.append(np.zeros(out, dtype=dtype))
            c = out
        return model

    @property
    def n_classes(self) -> int:
        return self.widths[-1]

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def set_params(self, params: Sequence[np.ndarray]) -> None:
        self.weights = [np.array(p) for p in params[0::2]]
        self.biases = [np.array(p) for p in params[1::2]]

    def copy(self) -> "PixelModel":
        return PixelModel(self.in_channels, self.widths, [w.copy() for w in self.weights],
                          [b.copy() for b in self.biases], dict(self.meta), self.dilations)

    def astype(self, dtype) -> "PixelModel":
        m = self.copy()
        m.weights = [w.astype(dtype) for w in m.weights]
        m.biases = [b.astype(dtype) for b in m.biases]
        return m

    # -- forward / backward -------------------------------------------------

    def forward(self, x: np.ndarray, keep: bool = False):
        """Logits for a (B, H, W, C) batch; with ``keep`` also the backprop cache."""
        if x.shape[-1] != self.in_channels:
            raise ValueError(f"model expects {self.in_channels} channels, got {x.shape[-1]}")
        cache = []
        a = x
        n = len(self.weights)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            cols = im2col(a, self.dilations[i])
            z = cols @ w.reshape(-1, w.shape[-1]) + b
            z = z.reshape(a.shape[:3] + (w.shape[-1],))
            if keep:
                cache.append((cols, a.shape))
            a = z if i == n - 1 else np.tanh(z)
            if keep and i < n - 1:
                cache[-1] = cache[-1] + (a,)
        return (a, cache) if keep else a

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        single = x.ndim == 3
        logits = self.forward(x[None] if single else x)
        p = sigmoid(logits)
        return p[0] if single else p

    def backward(self, dlogits: np.ndarray, cache) -> list[np.ndarray]:
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        d = dlogits
        for i in range(len(self.weights) - 1, -1, -1):
            cols, in_shape = cache[i][0], cache[i][1]
            w = self.weights[i]
            d2 = d.reshape(-1, w.shape[-1])
            grads_w[i] = (cols.T @ d2).reshape(w.shape)
            grads_b[i] = d2.sum(axis=0)
            if i == 0:
                break
            dcols = d2 @ w.reshape(-1, w.shape[-1]).T
            da = col2im(dcols, in_shape, self.dilations[i])
            prev_act = cache[i - 1][2]
            d = da * (1.0 - prev_act * prev_act)
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out += [gw, gb]
        return out


def bce_with_logits(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean sigmoid cross-entropy and its gradient w.r.t. the logits."""
    m = logits.size
    loss = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    grad = (sigmoid(logits) - targets) / m
    return float(loss.sum(dtype=np.float64) / m), grad.astype(logits.dtype)


def one_hot_targets(masks: np.ndarray, n_classes: int, dtype=np.float32) -> np.ndarray:
    """(B, H, W) class ids -> (B, H, W, K) per-class indicators for classes 1..K."""
    return (masks[..., None] == np.arange(1, n_classes + 1)).astype(dtype)


def loss_and_grads(model: PixelModel, x: np.ndarray, masks: np.ndarray, weight_decay: float):
    logits, cache = model.forward(x, keep=True)
    targets = one_hot_targets(masks, model.n_classes, logits.dtype)
    data_loss, dlogits = bce_with_logits(logits, targets)
    grads = model.backward(dlogits, cache)
    reg = 0.0
    for i, w in enumerate(model.weights):
        reg += 0.5 * weight_decay * float(np.sum(w.astype(np.float64) ** 2))
        grads[2 * i] = grads[2 * i] + weight_decay * w
    return data_loss + reg, grads


def loss_only(model: PixelModel, x: np.ndarray, masks: np.ndarray, weight_decay: float = 0.0) -> float:
    logits = model.forward(x)
    data_loss, _ = bce_with_logits(logits, one_hot_targets(masks, model.n_classes, logits.dtype))
    reg = sum(0.5 * weight_decay * float(np.sum(w.astype(np.float64) ** 2)) for w in model.weights)
    return data_loss + reg


# ---------------------------------------------------------------------------
# PXM1 model files

_MAGIC = b"PXM1"
_VERSION = 1


def save_model(path, model: PixelModel) -> None:
    desc = json.dumps(
        {"kernel": KERNEL, "activation": "tanh", "output": "sigmoid", **model.meta,
         "dilations": list(model.dilations)}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<HI", _VERSION, len(desc)) + desc)
        f.write(struct.pack("<II", model.in_channels, len(model.widths)))
        f.write(struct.pack(f"<{len(model.widths)}I", *model.widths))
        for p in model.params:
            f.write(np.ascontiguousarray(p, dtype="<f4").tobytes())


def load_model(path) -> PixelModel:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise FormatError(f"{path}: bad magic")
    try:
        version, dlen = struct.unpack_from("<HI", raw, 4)
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        off = 10
        desc = json.loads(raw[off : off + dlen].decode("utf-8"))
        off += dlen
        cin, nl = struct.unpack_from("<II", raw, off)
        off += 8
        widths = struct.unpack_from(f"<{nl}I", raw, off)
        off += 4 * nl
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError(f"{path}: truncated or corrupt header") from None
    meta = {k: v for k, v in desc.items() if k not in ("kernel", "activation", "output", "dilations")}
    model = PixelModel.zeros(cin, widths, dilations=desc.get("dilations", ()), **meta)
    params = []
    for p in model.params:
        n = p.size
        if off + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated parameters")
        params.append(np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(p.shape).astype(np.float32))
        off += 4 * n
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes")
    model.set_params(params)
    return model
