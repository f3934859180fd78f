"""Tiny two-scale encoder-decoder segmentation network.

Layout (w = base width)::

    x -> conv3(1->w) -> conv3(w->w) = skip -> pool2 -> conv3(w->2w) = features
      -> up2 -> concat(skip) -> conv3(3w->w) -> conv1(w->C) -> softmax

Every conv except the 1x1 head is followed by a leaky rectifier. Parameters
live as plain float32 arrays on :class:`SegModel`; each forward call wraps
them in fresh :class:`~crossald.autodiff.Tensor` leaves, so graphs are never
reused.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_MAGIC = b"XALD1"


@dataclass(frozen=True)
class Arch:
    in_channels: int = 1
    num_classes: int = 3
    base_width: int = 8

    def validate(self) -> None:
        if self.in_channels != 1:
            raise ValueError(f"in_channels must be 1, got {self.in_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.base_width < 2:
            raise ValueError(f"base_width must be >= 2, got {self.base_width}")

    def layer_shapes(self) -> dict[str, tuple[int, ...]]:
        w, c = self.base_width, self.num_classes
        return {
            "enc1.w": (w, self.in_channels, 3, 3),
            "enc1.b": (w,),
            "enc2.w": (w, w, 3, 3),
            "enc2.b": (w,),
            "enc3.w": (2 * w, w, 3, 3),
            "enc3.b": (2 * w,),
            "dec1.w": (w, 3 * w, 3, 3),
            "dec1.b": (w,),
            "head.w": (c, w, 1, 1),
            "head.b": (c,),
        }


@dataclass
class SegModel:
    params: dict[str, np.ndarray]
    arch: Arch = field(default_factory=Arch)
    seed: int = 0

    def copy(self) -> "SegModel":
        return SegModel({k: v.copy() for k, v in self.params.items()}, self.arch, self.seed)

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def init_model(arch: Arch = Arch(), seed: int = 0) -> SegModel:
    """Uniform fan-in init, ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``; zero biases."""
    arch.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in arch.layer_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            bound = init_bound(shape)
            params[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    return SegModel(params, arch, seed)


def init_bound(kernel_shape: tuple[int, ...]) -> float:
    fan_in = kernel_shape[1] * kernel_shape[2] * kernel_shape[3]
    return math.sqrt(6.0 / fan_in)


def _as_images(image) -> tuple[Tensor, bool]:
    x = image if isinstance(image, Tensor) else Tensor(image)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
        squeeze = True
    elif x.ndim == 4:
        squeeze = False
    else:
        raise ad.ShapeError(f"expected image [1,H,W] or batch [B,1,H,W], got {x.shape}")
    _, c, H, W = x.shape
    if c != 1:
        raise ad.ShapeError(f"expected a single input channel, got shape {x.shape}")
    if H % 2 or W % 2 or H < 8 or W < 8:
        raise ad.ShapeError(f"spatial dims must be even and >= 8, got {H}x{W}")
    return x, squeeze


def param_tensors(model: SegModel, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in model.params.items()}


def encode(params: dict[str, Tensor], x: Tensor) -> tuple[Tensor, Tensor]:
    """Return ``(features, skip)`` for a [B,1,H,W] batch."""
    h = ad.leaky_relu(ad.conv2d(x, params["enc1.w"], params["enc1.b"]))
    skip = ad.leaky_relu(ad.conv2d(h, params["enc2.w"], params["enc2.b"]))
    feats = ad.leaky_relu(ad.conv2d(ad.avg_pool2(skip), params["enc3.w"], params["enc3.b"]))
    return feats, skip


def decode(params: dict[str, Tensor], feats: Tensor, skip: Tensor) -> Tensor:
    """Class probabilities [B,C,H,W] from encoder outputs."""
    h = ad.concat([ad.upsample2(feats), skip])
    h = ad.leaky_relu(ad.conv2d(h, params["dec1.w"], params["dec1.b"]))
    return ad.softmax(ad.conv2d(h, params["head.w"], params["head.b"]))


def forward(model: SegModel, image, params: dict[str, Tensor] | None = None) -> Tensor:
    """Per-pixel class probabilities.

    ``image`` is a [1,H,W] image or a [B,1,H,W] batch (array or Tensor); the
    result is [C,H,W] or [B,C,H,W] to match. Pass ``params`` (from
    :func:`param_tensors` with ``requires_grad=True``) to differentiate
    w.r.t. the weights; otherwise they enter as constants.
    """
    x, squeeze = _as_images(image)
    p = params if params is not None else param_tensors(model)
    probs = decode(p, *encode(p, x))
    return ad.reshape(probs, probs.shape[1:]) if squeeze else probs


def features(model: SegModel, image, params: dict[str, Tensor] | None = None) -> Tensor:
    """Encoder output: [2w,H/2,W/2] for one image, [B,2w,H/2,W/2] for a batch."""
    x, squeeze = _as_images(image)
    p = params if params is not None else param_tensors(model)
    feats, _ = encode(p, x)
    return ad.reshape(feats, feats.shape[1:]) if squeeze else feats


def predict_probs(model: SegModel, images: np.ndarray) -> np.ndarray:
    """Forward without graph bookkeeping beyond what the ops need; returns an array."""
    return forward(model, images).data


def predict_mask(model: SegModel, images: np.ndarray) -> np.ndarray:
    """Argmax labels; ties resolve to the lowest class index."""
    probs = predict_probs(model, images)
    return np.argmax(probs, axis=-3).astype(np.int64)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(model: SegModel, path: str | Path) -> None:
    """Write parameters in the ``XALD1`` binary format (sorted by name)."""
    chunks = [CHECKPOINT_MAGIC]
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, seed: int = 0) -> SegModel:
    path = Path(path)
    buf = path.read_bytes()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: bad magic at offset 0")
    off = len(CHECKPOINT_MAGIC)
    params: dict[str, np.ndarray] = {}

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"{path}: truncated at offset {off} (wanted {n} bytes)")
        chunk = buf[off:off + n]
        off += n
        return chunk

    while off < len(buf):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: undecodable parameter name before offset {off}") from None
        (rank,) = struct.unpack("<I", take(4))
        if rank > 8:
            raise CheckpointError(f"{path}: implausible rank {rank} for {name!r} at offset {off - 4}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = math.prod(dims)
        arr = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
        if not np.isfinite(arr).all():
            raise CheckpointError(f"{path}: non-finite values in {name!r}")
        params[name] = arr

    arch = _infer_arch(params, path)
    return SegModel(params, arch, seed)


def _infer_arch(params: dict[str, np.ndarray], path: Path) -> Arch:
    try:
        w = params["enc1.w"].shape[0]
        c = params["head.w"].shape[0]
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing parameter {exc.args[0]!r}") from None
    arch = Arch(num_classes=c, base_width=w)
    expected = arch.layer_shapes()
    if set(expected) != set(params):
        raise CheckpointError(f"{path}: parameter names {sorted(params)} do not match architecture")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointError(f"{path}: {name} has shape {params[name].shape}, expected {shape}")
    return arch
