"""Dataset loading, glyph preprocessing, splitting and batching."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.filters import threshold_otsu

from .errors import ConfigError, DataFormatError, DegenerateInputError

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
IMAGE_SIDE = 32
CACHE_MAGIC = b"KGAD"
CACHE_VERSION = 1
FILTERS = ("median", "gaussian")
POLARITIES = ("auto", "dark", "light")


@dataclass
class Dataset:
    """Images ``(N, 1, H, W)`` and integer labels.

    Raw datasets may hold uint8 images of any side or a list of differently
    sized 2-D arrays; preprocessed ones hold float32 ``(N, 1, 32, 32)`` in [0, 1].
    """

    images: object
    labels: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.provenance.get("num_classes", int(self.labels.max()) + 1 if len(self.labels) else 0))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        if isinstance(self.images, np.ndarray):
            images = self.images[idx]
        else:
            images = [self.images[i] for i in idx]
        return Dataset(images, self.labels[idx], dict(self.provenance))

    def check(self, num_classes: int, side: int = IMAGE_SIDE) -> None:
        if len(self) == 0:
            raise ConfigError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= num_classes:
            raise ConfigError(f"labels must lie in [0, {num_classes}), found max {self.labels.max()}")
        if not isinstance(self.images, np.ndarray) or self.images.shape[1:] != (1, side, side):
            raise ConfigError(f"expected preprocessed images of shape (N, 1, {side}, {side})")


def _read_be_header(buf: bytes, expected_magic: int, ndim: int, path: str):
    if len(buf) < 4:
        raise DataFormatError(f"{path}: truncated header", offset=len(buf))
    (magic,) = struct.unpack(">I", buf[:4])
    if magic != expected_magic:
        raise DataFormatError("unexpected magic", offset=0)
    need = 4 + 4 * ndim
    if len(buf) < need:
        raise DataFormatError(f"{path}: truncated dimension header", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:need])
    size = int(np.prod(dims, dtype=np.int64))
    if len(buf) < need + size:
        raise DataFormatError(f"{path}: truncated data ({len(buf) - need} of {size} bytes)", offset=len(buf))
    if len(buf) > need + size:
        raise DataFormatError(f"{path}: trailing bytes", offset=need + size)
    return dims, np.frombuffer(buf, dtype=np.uint8, count=size, offset=need).reshape(dims)


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image file (u8, N x H x W) and its IDX label file (u8, N)."""
    with open(images_path, "rb") as f:
        ibuf = f.read()
    with open(labels_path, "rb") as f:
        lbuf = f.read()
    _, images = _read_be_header(ibuf, IDX_IMAGES_MAGIC, 3, str(images_path))
    (n_labels,), labels = _read_be_header(lbuf, IDX_LABELS_MAGIC, 1, str(labels_path))
    if n_labels != images.shape[0]:
        raise DataFormatError(f"{labels_path}: {n_labels} labels for {images.shape[0]} images", offset=4)
    return Dataset(
        images[:, None, :, :].copy(),
        labels.astype(np.int64),
        {"source": f"idx:{os.fspath(images_path)}"},
    )


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images ``(N, H, W)`` or ``(N, 1, H, W)`` and labels ``(N,)`` as IDX."""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    if images.dtype != np.uint8 or np.asarray(labels).dtype != np.uint8:
        if images.min() < 0 or images.max() > 255 or np.min(labels) < 0 or np.max(labels) > 255:
            raise ConfigError("IDX u8 payload needs values in 0..255")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.astype(np.uint8).tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)))
        f.write(np.asarray(labels).astype(np.uint8).tobytes())


def load_image_dir(root) -> Dataset:
    """Load ``root/<class index>/<image>``; classes and files in lexicographic order."""
    from PIL import Image, UnidentifiedImageError

    if not os.path.isdir(root):
        raise ConfigError(f"image directory {root} does not exist")
    images, labels = [], []
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    for name in classes:
        if not name.isdigit():
            raise ConfigError(f"class directory {name!r} in {root} is not a class index")
        files = sorted(os.listdir(os.path.join(root, name)))
        if not files:
            log.warning("class %s in %s has no images", name, root)
        for fname in files:
            path = os.path.join(root, name, fname)
            try:
                with Image.open(path) as im:
                    images.append(np.asarray(im.convert("L"), dtype=np.uint8))
            except (UnidentifiedImageError, OSError) as exc:
                raise DataFormatError(f"cannot read image {path}: {exc}") from exc
            labels.append(int(name))
    num_classes = max((int(c) for c in classes), default=-1) + 1
    return Dataset(images, np.array(labels, dtype=np.int64),
                   {"source": f"dir:{os.fspath(root)}", "num_classes": num_classes})


def _as_unit_float(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2 or image.size == 0:
        raise DegenerateInputError(f"expected a nonempty 2-D grayscale image, got shape {image.shape}")
    if image.dtype == np.bool_:
        return image.astype(np.float64)
    if np.issubdtype(image.dtype, np.integer):
        return image.astype(np.float64) / np.iinfo(image.dtype).max
    return np.clip(image.astype(np.float64), 0.0, 1.0)


def nearest_resize(mask: np.ndarray, side: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum(((np.arange(side) + 0.5) * h / side).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(side) + 0.5) * w / side).astype(np.int64), w - 1)
    return mask[rows[:, None], cols[None, :]]


def square_pad(mask: np.ndarray) -> np.ndarray:
    h, w = mask.shape
    s = max(h, w)
    top, left = (s - h) // 2, (s - w) // 2
    out = np.zeros((s, s), dtype=mask.dtype)
    out[top:top + h, left:left + w] = mask
    return out


def foreground_mask(image: np.ndarray, polarity: str = "auto") -> np.ndarray:
    """Otsu-binarize; under ``auto`` the darker class is ink unless it covers over half the image.

    A constant image has no threshold; it is all ink when its value lies on the
    ink side of mid-gray (bright for ``auto``/``light``), otherwise blank.
    """
    if polarity not in POLARITIES:
        raise ConfigError(f"polarity must be one of {POLARITIES}")
    if np.ptp(image) < 1e-12:
        value = float(image.flat[0])
        ink = value < 0.5 if polarity == "dark" else value > 0.5
        return np.full(image.shape, ink)
    dark = image <= threshold_otsu(image)
    if polarity == "dark":
        return dark
    if polarity == "light":
        return ~dark
    return dark if dark.mean() <= 0.5 else ~dark


def preprocess(image, side: int = IMAGE_SIDE, filters=FILTERS, polarity: str = "auto",
               median_size: int = 3, gaussian_sigma: float = 1.0, gaussian_radius: int = 2) -> np.ndarray:
    """Denoise, binarize, crop to the glyph's bounding box, square-pad and resize.

    Returns a float32 ``(1, side, side)`` array: 1 for ink, 0 for background.
    """
    img = _as_unit_float(image)
    for name in filters:
        if name == "median":
            img = ndimage.median_filter(img, size=median_size, mode="reflect")
        elif name == "gaussian":
            img = ndimage.gaussian_filter(img, sigma=gaussian_sigma, mode="reflect",
                                          truncate=gaussian_radius / gaussian_sigma)
        else:
            raise ConfigError(f"unknown filter {name!r}; choose from {FILTERS}")
    mask = foreground_mask(img, polarity)
    if not mask.any():
        raise DegenerateInputError("image has no foreground after binarization")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    crop = mask[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1]
    return nearest_resize(square_pad(crop), side).astype(np.float32)[None]


def preprocess_dataset(raw: Dataset, side: int = IMAGE_SIDE, **options) -> Dataset:
    images = np.stack([preprocess(im, side=side, **options) for im in raw.images]) if len(raw) else \
        np.zeros((0, 1, side, side), dtype=np.float32)
    settings = {"side": side, **{k: list(v) if isinstance(v, tuple) else v for k, v in options.items()}}
    fp = hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:16]
    prov = {**raw.provenance, "preprocessing": fp}
    return Dataset(images, raw.labels.copy(), prov)


@dataclass(frozen=True)
class SplitSpec:
    validation_size: int
    split_seed: int = 0


def split_train_val(dataset: Dataset, spec: SplitSpec):
    """Seeded random partition into ``(train, val)`` with ``len(val) == validation_size``."""
    n = len(dataset)
    if not 0 < spec.validation_size < n:
        raise ConfigError(f"validation_size {spec.validation_size} must lie in (0, {n})")
    perm = np.random.default_rng(spec.split_seed).permutation(n)
    val_idx, train_idx = np.sort(perm[:spec.validation_size]), np.sort(perm[spec.validation_size:])
    return dataset.subset(train_idx), dataset.subset(val_idx)


def epoch_batches(n_or_dataset, batch_size: int = 250, epoch_seed: int = 0) -> list:
    """Index batches over a fresh seeded permutation; the short final batch is kept."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = n_or_dataset if isinstance(n_or_dataset, (int, np.integer)) else len(n_or_dataset)
    perm = np.random.default_rng(epoch_seed).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def save_cache(path, dataset: Dataset) -> None:
    """Write ``KGAD`` | u32 version | u32 N | u32 side | i32 labels | f32 images (little-endian)."""
    images = np.asarray(dataset.images, dtype="<f4")
    n, _, side, _ = images.shape
    meta = json.dumps(dataset.provenance, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CACHE_MAGIC)
        f.write(struct.pack("<III", CACHE_VERSION, n, side))
        f.write(np.asarray(dataset.labels, dtype="<i4").tobytes())
        f.write(images.tobytes())
        f.write(struct.pack("<I", len(meta)))
        f.write(meta)


def load_cache(path) -> Dataset:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != CACHE_MAGIC:
        raise DataFormatError("bad dataset cache magic", offset=0)
    if len(buf) < 16:
        raise DataFormatError("truncated dataset cache header", offset=len(buf))
    version, n, side = struct.unpack("<III", buf[4:16])
    if version != CACHE_VERSION:
        raise DataFormatError(f"unsupported cache version {version}", offset=4)
    pos = 16
    end = pos + 4 * n + 4 * n * side * side
    if len(buf) < end + 4:
        raise DataFormatError("truncated dataset cache", offset=len(buf))
    labels = np.frombuffer(buf, dtype="<i4", count=n, offset=pos).astype(np.int64)
    images = np.frombuffer(buf, dtype="<f4", count=n * side * side, offset=pos + 4 * n)
    (meta_len,) = struct.unpack("<I", buf[end:end + 4])
    meta = json.loads(buf[end + 4:end + 4 + meta_len].decode() or "{}")
    return Dataset(images.reshape(n, 1, side, side).astype(np.float32), labels, meta)


CLASS_CENTRES = ((8.0, 8.0), (8.0, 24.0), (24.0, 16.0), (24.0, 4.0), (16.0, 16.0))


def make_synthetic(n_per_class: int = 100, num_classes: int = 3, side: int = IMAGE_SIDE,
                   seed: int = 0, jitter: float = 2.0, noise: float = 0.1) -> Dataset:
    """Gaussian blobs whose position encodes the class, plus pixel noise.

    Already 32x32 in [0, 1]; the classes are separable by blob location.
    """
    if not 2 <= num_classes <= len(CLASS_CENTRES):
        raise ConfigError(f"synthetic data supports 2..{len(CLASS_CENTRES)} classes")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side].astype(np.float64)
    scale = side / IMAGE_SIDE
    images, labels = [], []
    for c in range(num_classes):
        cy, cx = CLASS_CENTRES[c]
        for _ in range(n_per_class):
            dy, dx = rng.uniform(-jitter, jitter, size=2)
            blob = np.exp(-(((yy - (cy + dy) * scale) ** 2 + (xx - (cx + dx) * scale) ** 2) / (2 * (3 * scale) ** 2)))
            images.append(np.clip(blob + rng.normal(0, noise, blob.shape), 0, 1))
            labels.append(c)
    order = rng.permutation(len(labels))
    images = np.stack(images)[order, None].astype(np.float32)
    return Dataset(images, np.array(labels, dtype=np.int64)[order],
                   {"source": f"synthetic:seed={seed}", "num_classes": num_classes})
