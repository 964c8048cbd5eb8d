"""Datasets and image files. Pixels live in [-1, 1], channel-last."""
import logging
import os
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "cross", "ring", "diamond", "hbar", "vbar")
IMAGE_SUFFIXES = (".png", ".ppm")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ToyDatasetSpec:
    num_classes: int = 4
    image_size: int = 32
    samples_per_class: int = 256
    kind: str = "shapes"
    seed: int = 0
    patch_size: int = 8
    hue_jitter: float = 0.06

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.num_classes > len(SHAPES):
            raise ValueError(f"at most {len(SHAPES)} shape classes")
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.kind != "shapes":
            raise ValueError(f"unknown generator kind {self.kind!r}")


@dataclass
class ImageDataset:
    images: np.ndarray          # [M, H, W, 3] float32 in [-1, 1]
    labels: np.ndarray          # [M] int64
    class_names: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return len(self.class_names) if self.class_names else int(self.labels.max()) + 1

    @property
    def image_size(self) -> int:
        return self.images.shape[1]


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, r: float) -> np.ndarray:
    # u, v: coordinates relative to the shape centre, rotated
    if kind == "disk":
        return u ** 2 + v ** 2 <= r ** 2
    if kind == "square":
        return np.maximum(abs(u), abs(v)) <= 0.8 * r
    if kind == "triangle":
        return (v <= 0.7 * r) & (v >= -r + 2 * abs(u))
    if kind == "cross":
        return ((abs(u) <= 0.3 * r) | (abs(v) <= 0.3 * r)) & (np.maximum(abs(u), abs(v)) <= r)
    if kind == "ring":
        d = u ** 2 + v ** 2
        return (d <= r ** 2) & (d >= (0.55 * r) ** 2)
    if kind == "diamond":
        return abs(u) + abs(v) <= r
    if kind == "hbar":
        return (abs(u) <= r) & (abs(v) <= 0.35 * r)
    return (abs(v) <= r) & (abs(u) <= 0.35 * r)


def generate_toy_dataset(spec: ToyDatasetSpec = ToyDatasetSpec()) -> ImageDataset:
    """Class-conditional coloured shapes with pose, size and colour jitter.

    Each class has its own shape and a preferred hue; ``hue_jitter`` sets how
    far colours wander from that hue.
    """
    rng = np.random.default_rng(spec.seed)
    S = spec.image_size
    coords = (np.arange(S) + 0.5) / S * 2 - 1
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    base_hues = np.linspace(0, 1, spec.num_classes, endpoint=False)
    images, labels = [], []
    for c in range(spec.num_classes):
        for _ in range(spec.samples_per_class):
            cx, cy = rng.uniform(-0.35, 0.35, size=2)
            r = rng.uniform(0.35, 0.6)
            ang = rng.uniform(-0.4, 0.4)
            u = np.cos(ang) * (xx - cx) + np.sin(ang) * (yy - cy)
            v = -np.sin(ang) * (xx - cx) + np.cos(ang) * (yy - cy)
            mask = _shape_mask(SHAPES[c], u, v, r)
            hue = (base_hues[c] + rng.normal(0, spec.hue_jitter)) % 1.0
            fg = _hue_to_rgb(hue) * rng.uniform(0.6, 1.0)
            bg = rng.uniform(-0.6, 0.0, size=3)
            grad = rng.normal(0, 0.15, size=2)
            img = bg[None, None] + (grad[0] * xx + grad[1] * yy)[..., None]
            img = np.where(mask[..., None], fg[None, None] * 2 - 1, img)
            img = img + rng.normal(0, 0.03, size=img.shape)
            images.append(np.clip(img, -1, 1))
            labels.append(c)
    return ImageDataset(np.asarray(images, dtype=np.float32), np.asarray(labels, dtype=np.int64),
                        [SHAPES[c] for c in range(spec.num_classes)])


def _hue_to_rgb(h: float) -> np.ndarray:
    k = (np.array([0.0, 2.0, 4.0]) / 6 + h) % 1.0
    return np.clip(np.abs(k * 6 - 3) - 1, 0, 1)


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and map to 0..255, rounding half away from zero."""
    x = (np.clip(np.asarray(image, dtype=np.float64), -1, 1) + 1) / 2 * 255
    return np.floor(x + 0.5).astype(np.uint8)


def export_image(image, path) -> None:
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise DataError(f"expected [H, W, 3], got {arr.shape}")
    Image.fromarray(to_uint8(arr), mode="RGB").save(path, format="PNG")


def _load_one(path, image_size: int) -> np.ndarray:
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != image_size:
            im = im.resize((image_size, image_size), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return arr / 255.0 * 2 - 1


def load_image_folder(path, image_size: int) -> ImageDataset:
    """``path/<class>/<image>``; class index follows sorted directory names.

    Unreadable or non-image files are skipped and listed in ``skipped``.
    """
    if not os.path.isdir(path):
        raise DataError(f"{path} is not a directory")
    classes = sorted(d for d in os.listdir(path) if os.path.isdir(os.path.join(path, d)))
    images, labels, skipped = [], [], []
    for idx, name in enumerate(classes):
        folder = os.path.join(path, name)
        for fname in sorted(os.listdir(folder)):
            fpath = os.path.join(folder, fname)
            if not os.path.isfile(fpath):
                continue
            try:
                if not fname.lower().endswith(IMAGE_SUFFIXES):
                    raise DataError("not a PNG/PPM file")
                images.append(_load_one(fpath, image_size))
                labels.append(idx)
            except (OSError, DataError) as exc:
                skipped.append(fpath)
                msg = f"skipping {fpath}: {exc}"
                warnings.warn(msg, stacklevel=2)
                log.warning(msg)
    if not images:
        raise DataError(f"no readable images under {path}")
    return ImageDataset(np.stack(images).astype(np.float32), np.asarray(labels, dtype=np.int64),
                        classes, skipped)


def save_image_folder(dataset: ImageDataset, path) -> None:
    names = dataset.class_names or [str(c) for c in range(dataset.num_classes)]
    width = max(4, len(str(len(dataset))))
    for c, name in enumerate(names):
        os.makedirs(os.path.join(path, f"{c:02d}_{name}"), exist_ok=True)
    for i, (img, lab) in enumerate(zip(dataset.images, dataset.labels)):
        export_image(img, os.path.join(path, f"{lab:02d}_{names[lab]}", f"{i:0{width}d}.png"))


def spec_dict(spec) -> dict:
    return asdict(spec)
