"""Synthetic 2D segmentation corpus and its on-disk format.

Each image is a uniform background with a smooth multiplicative intensity
ramp and Gaussian noise, containing one rectangle (class 2) and one ellipse
(class 1, painted over the rectangle where they overlap).

Directory layout::

    manifest.json
    sample_0000.bin ...   # train samples first, then eval samples

Sample files: b"XDS1", u32 H, u32 W (little-endian), H*W little-endian
float32 image values, H*W uint8 labels.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SAMPLE_MAGIC = b"XDS1"
FORMAT_VERSION = "1"
MIN_AREA = 9
MAX_RETRIES = 100

ELLIPSE_GAIN = 0.4
RECT_GAIN = 0.25
NOISE_SIGMA = 0.05
RAMP_MAX = 0.4


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # [1,H,W] float32 in [0,1]
    mask: np.ndarray  # [H,W] uint8
    ellipse: "Ellipse | None" = None  # generating geometry, not serialized
    rect: "Rect | None" = None


@dataclass
class DatasetManifest:
    version: str
    H: int
    W: int
    C: int
    n_train: int
    n_eval: int
    labeled_indices: list[int] = field(default_factory=list)
    seed: int = 0

    def validate(self) -> None:
        idx = self.labeled_indices
        if len(set(idx)) != len(idx):
            raise DatasetError("labeled_indices contains duplicates")
        if any(i < 0 or i >= self.n_train for i in idx):
            raise DatasetError(f"labeled_indices must lie in [0, {self.n_train})")
        if list(idx) != sorted(idx):
            raise DatasetError("labeled_indices must be sorted")


@dataclass
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray  # [n_train+n_eval, 1, H, W]
    masks: np.ndarray  # [n_train+n_eval, H, W]

    @property
    def train_images(self) -> np.ndarray:
        return self.images[: self.manifest.n_train]

    @property
    def train_masks(self) -> np.ndarray:
        return self.masks[: self.manifest.n_train]

    @property
    def eval_images(self) -> np.ndarray:
        return self.images[self.manifest.n_train:]

    @property
    def eval_masks(self) -> np.ndarray:
        return self.masks[self.manifest.n_train:]


# ---------------------------------------------------------------- geometry


@dataclass(frozen=True)
class Ellipse:
    cy: float
    cx: float
    ry: float
    rx: float
    angle: float

    def contains(self, yy: np.ndarray, xx: np.ndarray) -> np.ndarray:
        dy, dx = yy - self.cy, xx - self.cx
        c, s = math.cos(self.angle), math.sin(self.angle)
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (u / self.rx) ** 2 + (v / self.ry) ** 2 <= 1.0


@dataclass(frozen=True)
class Rect:
    y0: int
    x0: int
    h: int
    w: int


def rasterize(H: int, W: int, ellipse: Ellipse, rect: Rect) -> np.ndarray:
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    mask = np.zeros((H, W), dtype=np.uint8)
    mask[rect.y0:rect.y0 + rect.h, rect.x0:rect.x0 + rect.w] = 2
    mask[ellipse.contains(yy, xx)] = 1
    return mask


def _draw_shapes(H: int, W: int, rng: np.random.Generator) -> tuple[Ellipse, Rect]:
    m = min(H, W)
    ellipse = Ellipse(
        cy=rng.uniform(0.2 * H, 0.8 * H),
        cx=rng.uniform(0.2 * W, 0.8 * W),
        ry=rng.uniform(0.1 * m, 0.25 * m),
        rx=rng.uniform(0.1 * m, 0.25 * m),
        angle=rng.uniform(0.0, math.pi),
    )
    h = int(rng.integers(max(3, round(0.15 * H)), max(4, round(0.4 * H)) + 1))
    w = int(rng.integers(max(3, round(0.15 * W)), max(4, round(0.4 * W)) + 1))
    rect = Rect(y0=int(rng.integers(0, H - h + 1)), x0=int(rng.integers(0, W - w + 1)), h=h, w=w)
    return ellipse, rect


def make_sample(H: int, W: int, rng: np.random.Generator, index: int = 0, seed: int | None = None) -> Sample:
    """One synthetic image/mask pair; retries until every class covers >= 9 pixels."""
    for _ in range(MAX_RETRIES):
        ellipse, rect = _draw_shapes(H, W, rng)
        mask = rasterize(H, W, ellipse, rect)
        counts = np.bincount(mask.ravel(), minlength=3)
        if (counts >= MIN_AREA).all():
            break
    else:
        raise DatasetError(f"degenerate geometry after {MAX_RETRIES} retries (seed={seed}, index={index})")

    background = rng.uniform(0.05, 0.25)
    strength = rng.uniform(0.0, RAMP_MAX)
    phi = rng.uniform(0.0, 2.0 * math.pi)
    gains = np.array([0.0, ELLIPSE_GAIN, RECT_GAIN])
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    u = 2.0 * xx / max(W - 1, 1) - 1.0
    v = 2.0 * yy / max(H - 1, 1) - 1.0
    ramp = 1.0 + strength * (math.cos(phi) * u + math.sin(phi) * v) / math.sqrt(2.0)
    img = (background + gains[mask]) * ramp + rng.normal(0.0, NOISE_SIGMA, size=(H, W))
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Sample(img[None], mask, ellipse, rect)


def generate_samples(H: int, W: int, n: int, seed: int) -> list[Sample]:
    rng = np.random.default_rng(seed)
    return [make_sample(H, W, rng, index=i, seed=seed) for i in range(n)]


# ---------------------------------------------------------------- labels


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def split_labels(n_train: int | DatasetManifest, fraction: float, seed: int) -> list[int]:
    """Sorted labeled indices: ``max(1, round(fraction * n_train))`` drawn without replacement."""
    if isinstance(n_train, DatasetManifest):
        n_train = n_train.n_train
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    count = min(n_train, max(1, round_half_away(fraction * n_train)))
    rng = np.random.default_rng(seed)
    return sorted(int(i) for i in rng.choice(n_train, size=count, replace=False))


# ---------------------------------------------------------------- I/O


def encode_sample(sample: Sample) -> bytes:
    _, H, W = sample.image.shape
    head = SAMPLE_MAGIC + struct.pack("<II", H, W)
    img = np.ascontiguousarray(sample.image[0], dtype="<f4").tobytes()
    mask = np.ascontiguousarray(sample.mask, dtype=np.uint8).tobytes()
    return head + img + mask


def save_sample(sample: Sample, path: str | Path) -> None:
    Path(path).write_bytes(encode_sample(sample))


def load_sample(path: str | Path) -> Sample:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DatasetError(f"{path}: cannot read ({exc.strerror})") from exc
    if buf[:4] != SAMPLE_MAGIC:
        raise DatasetError(f"{path}: bad magic at offset 0")
    if len(buf) < 12:
        raise DatasetError(f"{path}: truncated header at offset {len(buf)}")
    H, W = struct.unpack("<II", buf[4:12])
    need = 12 + 4 * H * W + H * W
    if len(buf) < need:
        raise DatasetError(f"{path}: truncated at offset {len(buf)}, expected {need} bytes")
    if len(buf) > need:
        raise DatasetError(f"{path}: {len(buf) - need} trailing bytes at offset {need}")
    img = np.frombuffer(buf, dtype="<f4", count=H * W, offset=12).astype(np.float32).reshape(1, H, W)
    mask = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=12 + 4 * H * W).reshape(H, W).copy()
    return Sample(img, mask)


def sample_path(root: Path, index: int) -> Path:
    return root / f"sample_{index:04d}.bin"


def generate_dataset(
    out_dir: str | Path,
    H: int = 32,
    W: int = 32,
    C: int = 3,
    n_train: int = 40,
    n_eval: int = 16,
    seed: int = 0,
    labeled_fraction: float = 0.05,
) -> Path:
    """Write a synthetic dataset directory and return its path."""
    if H % 2 or W % 2 or H < 16 or W < 16:
        raise ValueError(f"H and W must be even and >= 16, got {H}x{W}")
    if C != 3:
        raise ValueError(f"the synthetic corpus has exactly 3 classes, got C={C}")
    if n_train < 4:
        raise ValueError(f"n_train must be >= 4, got {n_train}")
    if n_eval < 1:
        raise ValueError(f"n_eval must be >= 1, got {n_eval}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = generate_samples(H, W, n_train + n_eval, seed)
    for i, s in enumerate(samples):
        save_sample(s, sample_path(out, i))
    manifest = DatasetManifest(
        version=FORMAT_VERSION,
        H=H,
        W=W,
        C=C,
        n_train=n_train,
        n_eval=n_eval,
        labeled_indices=split_labels(n_train, labeled_fraction, seed),
        seed=seed,
    )
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return out


def load_manifest(path: str | Path) -> DatasetManifest:
    mpath = Path(path) / "manifest.json"
    try:
        raw = json.loads(mpath.read_text())
    except OSError as exc:
        raise DatasetError(f"{mpath}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}: invalid JSON at offset {exc.pos}") from exc
    try:
        manifest = DatasetManifest(**raw)
    except TypeError as exc:
        raise DatasetError(f"{mpath}: {exc}") from exc
    manifest.validate()
    return manifest


def load_dataset(path: str | Path) -> Dataset:
    root = Path(path)
    manifest = load_manifest(root)
    n = manifest.n_train + manifest.n_eval
    present = sorted(root.glob("sample_*.bin"))
    if len(present) < n:
        raise DatasetError(f"{root}: manifest lists {n} samples but only {len(present)} files exist")
    images = np.empty((n, 1, manifest.H, manifest.W), dtype=np.float32)
    masks = np.empty((n, manifest.H, manifest.W), dtype=np.uint8)
    for i in range(n):
        p = sample_path(root, i)
        if not p.exists():
            raise DatasetError(f"{p}: missing (manifest lists {n} samples)")
        s = load_sample(p)
        if s.image.shape[1:] != (manifest.H, manifest.W):
            raise DatasetError(f"{p}: size {s.image.shape[1:]} disagrees with manifest {manifest.H}x{manifest.W}")
        if s.mask.max() >= manifest.C:
            raise DatasetError(f"{p}: label {int(s.mask.max())} outside [0, {manifest.C})")
        images[i] = s.image
        masks[i] = s.mask
    return Dataset(manifest, images, masks)
