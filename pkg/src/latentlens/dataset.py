"""Image collections: a procedural dSprites-like shapes set and MNIST IDX parsing.

Shapes are rendered from five discrete factors (shape, scale, rotation,
x and y position). Color is always white, so it is not a factor here.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import BadMagic, LabelOutOfRange, TruncatedPayload

IDX3_MAGIC = 0x00000803
IDX1_MAGIC = 0x00000801

N_SCALES = 6
N_ROTATIONS = 40
N_POSITIONS = 32
SUPERSAMPLE = 4

DEFAULT_SIDE = 64


@dataclass(frozen=True, eq=False)
class ImageSample:
    """A grayscale image with intensities in [0, 1], stored as an (H, W) float64 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2-D grid, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel intensities must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)

    def __eq__(self, other):
        if not isinstance(other, ImageSample):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


class Shape(str, enum.Enum):
    SQUARE = "square"
    ELLIPSE = "ellipse"
    HEART = "heart"


SHAPES = (Shape.SQUARE, Shape.ELLIPSE, Shape.HEART)


@dataclass(frozen=True)
class FactorAssignment:
    shape: Shape
    scale_index: int
    rotation_index: int
    pos_x_index: int
    pos_y_index: int

    def __post_init__(self):
        object.__setattr__(self, "shape", Shape(self.shape))
        for name, limit in (
            ("scale_index", N_SCALES),
            ("rotation_index", N_ROTATIONS),
            ("pos_x_index", N_POSITIONS),
            ("pos_y_index", N_POSITIONS),
        ):
            value = getattr(self, name)
            if not 0 <= value < limit:
                raise ValueError(f"{name}={value} outside [0, {limit - 1}]")

    def to_dict(self) -> dict:
        return {
            "shape": self.shape.value,
            "scale_index": self.scale_index,
            "rotation_index": self.rotation_index,
            "pos_x_index": self.pos_x_index,
            "pos_y_index": self.pos_y_index,
        }


@dataclass
class ImageDataset:
    samples: list
    factors: Optional[list] = None
    labels: Optional[list] = None

    def __post_init__(self):
        n = len(self.samples)
        for name in ("factors", "labels"):
            extra = getattr(self, name)
            if extra is not None and len(extra) != n:
                raise ValueError(f"{name} has {len(extra)} entries for {n} samples")
        if n:
            shape = self.samples[0].pixels.shape
            if any(s.pixels.shape != shape for s in self.samples):
                raise ValueError("all samples must share height and width")

    def __len__(self):
        return len(self.samples)

    @property
    def image_shape(self) -> tuple:
        return self.samples[0].pixels.shape

    def as_matrix(self) -> np.ndarray:
        """Stack samples into a (count, H*W) array."""
        return np.stack([s.flat() for s in self.samples])


# --- rendering ---------------------------------------------------------------

def _decode_factors(factors: FactorAssignment, side: int):
    half_width = (0.1 + 0.2 * factors.scale_index / (N_SCALES - 1)) * side
    angle = 2.0 * np.pi * factors.rotation_index / N_ROTATIONS
    cx = (0.15 + 0.7 * factors.pos_x_index / (N_POSITIONS - 1)) * side
    cy = (0.15 + 0.7 * factors.pos_y_index / (N_POSITIONS - 1)) * side
    return half_width, angle, cx, cy


def _inside(shape: Shape, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    if shape is Shape.SQUARE:
        return np.maximum(np.abs(u), np.abs(v)) <= 1.0
    if shape is Shape.ELLIPSE:
        return u * u + (v / 0.5) ** 2 <= 1.0
    # heart curve has y pointing up; image rows grow downward
    y = -v
    return (u * u + y * y - 1.0) ** 3 - u * u * y ** 3 <= 0.0


def render_shape(factors: FactorAssignment, side: int = DEFAULT_SIDE) -> ImageSample:
    """Rasterize one shape with 4x4 supersampled anti-aliasing."""
    if side < 16:
        raise ValueError("side must be at least 16")
    half_width, angle, cx, cy = _decode_factors(factors, side)
    offsets = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    coords = (np.arange(side)[:, None] + offsets[None, :]).reshape(-1)
    ys, xs = np.meshgrid(coords, coords, indexing="ij")
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(angle), np.sin(angle)
    # rotate sample points into the shape's own frame
    u = (c * dx + s * dy) / half_width
    v = (-s * dx + c * dy) / half_width
    mask = _inside(factors.shape, u, v).astype(np.float64)
    pixels = mask.reshape(side, SUPERSAMPLE, side, SUPERSAMPLE).mean(axis=(1, 3))
    return ImageSample(pixels)


def generate_shapes_dataset(count: int, side: int = DEFAULT_SIDE, seed: int = 0) -> ImageDataset:
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    shapes = rng.integers(0, len(SHAPES), size=count)
    scales = rng.integers(0, N_SCALES, size=count)
    rotations = rng.integers(0, N_ROTATIONS, size=count)
    xs = rng.integers(0, N_POSITIONS, size=count)
    ys = rng.integers(0, N_POSITIONS, size=count)
    factors = [
        FactorAssignment(SHAPES[a], int(b), int(c), int(d), int(e))
        for a, b, c, d, e in zip(shapes, scales, rotations, xs, ys)
    ]
    samples = [render_shape(f, side) for f in factors]
    return ImageDataset(samples=samples, factors=factors)


# --- IDX ---------------------------------------------------------------------

def _read_header(data: bytes, magic: int, n_dims: int) -> tuple:
    need = 4 + 4 * n_dims
    if len(data) < 4:
        raise TruncatedPayload("payload shorter than the magic number")
    (found,) = struct.unpack(">I", data[:4])
    if found != magic:
        raise BadMagic(f"expected magic 0x{magic:08x}, found 0x{found:08x}")
    if len(data) < need:
        raise TruncatedPayload("payload shorter than the IDX header")
    return struct.unpack(">" + "I" * n_dims, data[4:need])


def load_idx_images(data: bytes) -> ImageDataset:
    count, rows, cols = _read_header(data, IDX3_MAGIC, 3)
    body = memoryview(data)[16:]
    size = count * rows * cols
    if len(body) < size:
        raise TruncatedPayload(f"header declares {size} pixel bytes, found {len(body)}")
    raw = np.frombuffer(body[:size], dtype=np.uint8).reshape(count, rows, cols)
    scaled = raw.astype(np.float64) / 255.0
    return ImageDataset(samples=[ImageSample(img) for img in scaled])


def load_idx_labels(data: bytes) -> list:
    (count,) = _read_header(data, IDX1_MAGIC, 1)
    body = data[8:]
    if len(body) < count:
        raise TruncatedPayload(f"header declares {count} labels, found {len(body)}")
    labels = list(body[:count])
    for i, label in enumerate(labels):
        if label > 9:
            raise LabelOutOfRange(f"label {label} at index {i}")
    return labels


def write_idx_images(images: Sequence[np.ndarray]) -> bytes:
    """Serialize uint8 images (or [0,1] floats, quantized) in IDX3 layout."""
    arr = np.asarray(images)
    if arr.dtype != np.uint8:
        arr = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    count, rows, cols = arr.shape
    return struct.pack(">IIII", IDX3_MAGIC, count, rows, cols) + arr.tobytes()


def write_idx_labels(labels: Sequence[int]) -> bytes:
    return struct.pack(">II", IDX1_MAGIC, len(labels)) + bytes(labels)


def load_mnist(images_path, labels_path=None, limit: Optional[int] = None) -> ImageDataset:
    with open(images_path, "rb") as fh:
        ds = load_idx_images(fh.read())
    labels = None
    if labels_path is not None:
        with open(labels_path, "rb") as fh:
            labels = load_idx_labels(fh.read())
    samples = ds.samples
    if limit is not None:
        samples = samples[:limit]
        labels = labels[:limit] if labels is not None else None
    return ImageDataset(samples=samples, labels=labels)


def minibatches(dataset, batch_size: int, seed: int) -> list:
    """Partition a seeded permutation of sample indices into consecutive batches."""
    n = len(dataset)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must lie in [1, {n}]")
    order = np.random.default_rng(seed).permutation(n)
    return [order[i:i + batch_size].tolist() for i in range(0, n, batch_size)]
