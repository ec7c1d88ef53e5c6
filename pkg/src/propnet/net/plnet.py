"""PLNet: a U-Net style encoder-decoder mapping input tensors to path-loss matrices.

Encoder stage ``i`` (1..depth) is a stride-2 3x3 convolution plus ReLU,
doubling the channel count. Decoder stage ``j`` (depth..1) upsamples with a
stride-2 transposed convolution plus ReLU, concatenates the encoder feature
map of matching size (the raw input for the last stage), and mixes with a
stride-1 3x3 convolution plus ReLU. A stride-1 convolution head produces
one channel, read as ``(PL - 120) / 40`` and returned in dB.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import NoValidPixels, NonDivisibleSize, ParseError, ShapeMismatch
from .layers import conv_backward, conv_forward, deconv_backward, deconv_forward, relu, relu_backward

PL_OFFSET_DB = 120.0
PL_SCALE_DB = 40.0

WEIGHTS_MAGIC = b"PLW1"
WEIGHTS_VERSION = 1

MAE = "MAE"
MSE = "MSE"


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 8
    base_channels: int = 16
    depth: int = 4

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1 or self.depth < 1:
            raise ValueError(f"invalid architecture {self}")

    def width(self, level: int) -> int:
        """Feature channels produced at encoder level ``level`` (level 0 = top decoder output)."""
        return self.base_channels * 2 ** max(level - 1, 0)

    def skip_channels(self, level: int) -> int:
        return self.in_channels if level == 0 else self.width(level)

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter name -> shape, in declaration order."""
        shapes: dict[str, tuple[int, ...]] = {}
        c = self.in_channels
        for i in range(1, self.depth + 1):
            w = self.width(i)
            shapes[f"enc{i}.w"] = (w, c, 3, 3)
            shapes[f"enc{i}.b"] = (w,)
            c = w
        for j in range(self.depth, 0, -1):
            w = self.width(j - 1)
            shapes[f"dec{j}.up.w"] = (c, w, 3, 3)
            shapes[f"dec{j}.up.b"] = (w,)
            shapes[f"dec{j}.conv.w"] = (w, w + self.skip_channels(j - 1), 3, 3)
            shapes[f"dec{j}.conv.b"] = (w,)
            c = w
        shapes["head.w"] = (1, c, 3, 3)
        shapes["head.b"] = (1,)
        return shapes

    def check_input(self, shape: tuple[int, ...]) -> None:
        c, h, w = shape[-3:]
        if c != self.in_channels:
            raise ShapeMismatch(f"model expects {self.in_channels} channels, got {c}")
        m = 2**self.depth
        if h % m or w % m:
            raise NonDivisibleSize(f"input {h}x{w} is not divisible by 2^depth = {m}")


@dataclass(eq=False)
class ModelWeights:
    spec: ArchSpec
    params: dict[str, np.ndarray]
    seed: int = 0
    version: int = WEIGHTS_VERSION

    def __post_init__(self):
        shapes = self.spec.layer_shapes()
        if list(self.params) != list(shapes):
            raise ShapeMismatch("parameter names do not match the architecture")
        for name, shape in shapes.items():
            if self.params[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    def copy(self) -> ModelWeights:
        return ModelWeights(self.spec, {k: v.copy() for k, v in self.params.items()}, self.seed, self.version)

    def astype(self, dtype) -> ModelWeights:
        return ModelWeights(self.spec, {k: v.astype(dtype) for k, v in self.params.items()}, self.seed, self.version)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())

    def equals(self, other: ModelWeights) -> bool:
        return (
            self.spec == other.spec
            and list(self.params) == list(other.params)
            and all(np.array_equal(self.params[k], other.params[k]) for k in self.params)
        )


def init_weights(spec: ArchSpec, seed: int, dtype=np.float32) -> ModelWeights:
    """He-normal kernels (std sqrt(2 / fan_in), fan_in = input channels * 9), zero biases.

    Draws come from numpy's PCG64 generator in parameter declaration order.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in spec.layer_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
            continue
        fan_in = (shape[0] if ".up." in name else shape[1]) * 9
        params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return ModelWeights(spec, params, seed)


# ------------------------------------------------------------------- forward


def _as_batch(x) -> tuple[np.ndarray, bool]:
    data = getattr(x, "data", x)
    data = np.asarray(data)
    if data.ndim == 3:
        return data[None], True
    return data, False


def plnet_forward(w: ModelWeights, x, cache: bool = False):
    """Predict path loss in dB.

    ``x`` is an :class:`~propnet.tensor.InputTensor`, a ``(C, H, W)`` array
    or an ``(N, C, H, W)`` batch. Returns ``(H, W)`` / ``(N, H, W)``
    predictions, plus the activation cache when ``cache`` is true.
    """
    xb, single = _as_batch(x)
    w.spec.check_input(xb.shape)
    p = w.params
    dtype = p["head.w"].dtype
    xb = xb.astype(dtype, copy=False)
    spec = w.spec
    acts: dict[str, np.ndarray] = {"x": xb}

    feats = [xb]
    h = xb
    for i in range(1, spec.depth + 1):
        z = conv_forward(h, p[f"enc{i}.w"], p[f"enc{i}.b"], stride=2)
        acts[f"enc{i}.in"], acts[f"enc{i}.z"] = h, z
        h = relu(z)
        feats.append(h)
    g = h
    for j in range(spec.depth, 0, -1):
        zu = deconv_forward(g, p[f"dec{j}.up.w"], p[f"dec{j}.up.b"])
        acts[f"dec{j}.up.in"], acts[f"dec{j}.up.z"] = g, zu
        cat = np.concatenate([relu(zu), feats[j - 1]], axis=1)
        zc = conv_forward(cat, p[f"dec{j}.conv.w"], p[f"dec{j}.conv.b"], stride=1)
        acts[f"dec{j}.conv.in"], acts[f"dec{j}.conv.z"] = cat, zc
        g = relu(zc)
    y = conv_forward(g, p["head.w"], p["head.b"], stride=1)
    acts["head.in"] = g
    pred = PL_OFFSET_DB + PL_SCALE_DB * y[:, 0]
    if single:
        pred = pred[0]
    return (pred, acts) if cache else pred


def plnet_backward(w: ModelWeights, acts: dict[str, np.ndarray], pred_grad: np.ndarray) -> dict[str, np.ndarray]:
    """Parameter gradients given dLoss/dPrediction (in dB units)."""
    p = w.params
    spec = w.spec
    dtype = p["head.w"].dtype
    gp = np.asarray(pred_grad, dtype=dtype)
    if gp.ndim == 2:
        gp = gp[None]
    grads: dict[str, np.ndarray] = {}

    dy = (PL_SCALE_DB * gp)[:, None]
    dg, grads["head.w"], grads["head.b"] = conv_backward(dy, acts["head.in"], p["head.w"], 1)

    # gradients flowing into each encoder feature map through skips
    skip_grads: dict[int, np.ndarray] = {}
    for j in range(1, spec.depth + 1):
        dz = relu_backward(dg, acts[f"dec{j}.conv.z"])
        dcat, grads[f"dec{j}.conv.w"], grads[f"dec{j}.conv.b"] = conv_backward(
            dz, acts[f"dec{j}.conv.in"], p[f"dec{j}.conv.w"], 1
        )
        n_up = p[f"dec{j}.up.w"].shape[1]
        du = relu_backward(dcat[:, :n_up], acts[f"dec{j}.up.z"])
        skip_grads[j - 1] = dcat[:, n_up:]
        dg, grads[f"dec{j}.up.w"], grads[f"dec{j}.up.b"] = deconv_backward(
            du, acts[f"dec{j}.up.in"], p[f"dec{j}.up.w"]
        )
    # dg is now the gradient w.r.t. the deepest encoder output
    dh = dg
    for i in range(spec.depth, 0, -1):
        if i < spec.depth:
            dh = dh + skip_grads[i]
        dz = relu_backward(dh, acts[f"enc{i}.z"])
        dh, grads[f"enc{i}.w"], grads[f"enc{i}.b"] = conv_backward(dz, acts[f"enc{i}.in"], p[f"enc{i}.w"], 2)
    return {name: grads[name] for name in p}


# ---------------------------------------------------------------------- loss


@dataclass
class LossReport:
    value: float
    mode: str
    valid_pixel_count: int
    gradient: np.ndarray = field(repr=False)


def masked_loss(pred, truth, mask, mode: str = MAE) -> LossReport:
    """Mean absolute (or squared) error over valid pixels only.

    Works on single matrices or stacked batches; a batch is pooled, i.e.
    the mean runs over every valid pixel of every sample. Invalid pixels
    contribute nothing and get an exactly-zero gradient.
    """
    if mode not in (MAE, MSE):
        raise ValueError(f"loss mode must be MAE or MSE, got {mode!r}")
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    mask = np.asarray(mask, dtype=bool)
    if not (pred.shape == truth.shape == mask.shape):
        raise ShapeMismatch(f"pred {pred.shape}, truth {truth.shape}, mask {mask.shape} differ")
    count = int(mask.sum())
    if count == 0:
        raise NoValidPixels("no valid pixels in the mask")
    diff = np.where(mask, pred.astype(np.float64) - np.where(mask, truth, 0.0), 0.0)
    if mode == MAE:
        value = np.abs(diff).sum() / count
        grad = np.sign(diff) / count
    else:
        value = (diff * diff).sum() / count
        grad = 2.0 * diff / count
    return LossReport(float(value), mode, count, grad.astype(pred.dtype, copy=False))


# ------------------------------------------------------------------------ IO


def save_weights(w: ModelWeights, path: str | Path) -> None:
    """Binary ``PLW1`` file: header, JSON descriptor, then float32 tensors in order."""
    meta = json.dumps({"arch": asdict(w.spec), "seed": w.seed}, sort_keys=True).encode()
    parts = [WEIGHTS_MAGIC, struct.pack("<II", w.version, len(meta)), meta, struct.pack("<I", len(w.params))]
    for name, arr in w.params.items():
        bname = name.encode()
        parts.append(struct.pack("<I", len(bname)) + bname)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path: str | Path) -> ModelWeights:
    raw = Path(path).read_bytes()
    if raw[:4] != WEIGHTS_MAGIC:
        raise ParseError(f"{path}: not a PLW1 weights file")
    try:
        pos = 4
        version, meta_len = struct.unpack_from("<II", raw, pos)
        pos += 8
        meta = json.loads(raw[pos : pos + meta_len])
        pos += meta_len
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + nlen].decode()
            pos += nlen
            (ndim,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", raw, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            params[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise ParseError(f"{path}: truncated or corrupt weights file ({exc})") from None
    if pos != len(raw):
        raise ParseError(f"{path}: trailing bytes after weights")
    if version != WEIGHTS_VERSION:
        raise ParseError(f"{path}: unsupported weights version {version}")
    return ModelWeights(ArchSpec(**meta["arch"]), params, meta.get("seed", 0), version)
