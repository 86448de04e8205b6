"""Single-dimension latent traversals and their composition into image strips."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dataset import ImageSample
from .errors import DimensionMismatch, SizeMismatch
from .tinyvae import VaeParameters, decode_batch

ENDPOINT_TOL = 1e-9


@dataclass(frozen=True)
class TraversalSpec:
    base: tuple
    dim_index: int
    low: float = -3.0
    high: float = 3.0
    step: float = 0.6

    def __post_init__(self):
        object.__setattr__(self, "base", tuple(float(v) for v in self.base))
        if not all(math.isfinite(v) for v in self.base):
            raise ValueError("base latent must be finite")
        if not self.low < self.high:
            raise ValueError("low must be below high")
        if self.step <= 0:
            raise ValueError("step must be positive")
        if not 0 <= self.dim_index < len(self.base):
            raise DimensionMismatch(f"dim_index {self.dim_index} outside [0, {len(self.base)})")

    def values(self) -> list:
        return traversal_values(self.low, self.high, self.step)

    def latent_inputs(self) -> np.ndarray:
        """The (k, M) matrix of latent vectors to decode."""
        values = self.values()
        z = np.tile(np.asarray(self.base), (len(values), 1))
        z[:, self.dim_index] = values
        return z


@dataclass
class TraversalSequence:
    spec: TraversalSpec
    assigned_values: list
    frames: list
    sequence_id: str
    model: str = ""
    seed: Optional[int] = None

    def __post_init__(self):
        if len(self.frames) != len(self.assigned_values):
            raise ValueError("one frame per assigned value is required")

    @property
    def k(self) -> int:
        return len(self.frames)

    def metadata(self, image_refs=()) -> dict:
        return {
            "sequence_id": self.sequence_id,
            "model": self.model,
            "seed": self.seed,
            "dim_index": self.spec.dim_index,
            "values": list(self.assigned_values),
            "image_refs": list(image_refs),
        }


def traversal_values(low: float, high: float, step: float) -> list:
    """Arithmetic grid from ``low`` by ``step``, keeping ``high`` when it sits on the lattice.

    Values are computed as ``low + i*step`` rather than by accumulation, so
    (-3, 3, 0.6) gives the 11 points -3.0 ... 3.0.
    """
    if not low < high or step <= 0:
        raise ValueError("need low < high and step > 0")
    k = int(math.floor((high - low) / step + ENDPOINT_TOL)) + 1
    # rounding keeps e.g. -1.2 from printing as -1.2000000000000002
    values = [round(float(low) + i * step, 12) + 0.0 for i in range(k)]
    if abs(values[-1] - high) <= ENDPOINT_TOL:
        values[-1] = float(high)
    return values


def sample_base_latent(seed: int, m: int = 6) -> np.ndarray:
    if m < 1:
        raise ValueError("latent dimension must be positive")
    return np.random.default_rng(seed).standard_normal(m)


def _frame_shape(params: VaeParameters, shape):
    if shape is not None:
        return tuple(shape)
    side = int(round(math.sqrt(params.input_dim)))
    if side * side != params.input_dim:
        raise SizeMismatch("non-square input; pass frame shape explicitly")
    return side, side


def generate_sequence(params: VaeParameters, spec: TraversalSpec, sequence_id: str = "",
                      shape=None, model: str = "", seed: Optional[int] = None) -> TraversalSequence:
    if len(spec.base) != params.latent_dim:
        raise DimensionMismatch(f"base has {len(spec.base)} dims, model has {params.latent_dim}")
    frame_shape = _frame_shape(params, shape)
    pixels = decode_batch(params, spec.latent_inputs())
    frames = [ImageSample(row.reshape(frame_shape)) for row in pixels]
    return TraversalSequence(spec, spec.values(), frames,
                             sequence_id or f"dim{spec.dim_index}", model, seed)


def sequence_id_for(model: str, seed: int, dim_index: int) -> str:
    return f"{model}-s{seed}-z{dim_index}"


def generate_grid(params: VaeParameters, seed: int, model: str = "model", low: float = -3.0,
                  high: float = 3.0, step: float = 0.6, shape=None,
                  resample_per_dim: bool = False) -> list:
    """One traversal per latent dimension, all around a shared base latent unless resampling."""
    m = params.latent_dim
    base = sample_base_latent(seed, m)
    grid = []
    for d in range(m):
        if resample_per_dim:
            base = sample_base_latent([seed, d], m)
        spec = TraversalSpec(tuple(base), d, low, high, step)
        grid.append(generate_sequence(params, spec, sequence_id_for(model, seed, d),
                                      shape, model, seed))
    return grid


def compose_strip(sequence: TraversalSequence, separator_px: int = 2) -> ImageSample:
    """Frames left to right in ascending value, split by white separator columns."""
    frames = sequence.frames
    if not frames:
        raise SizeMismatch("sequence has no frames")
    if separator_px < 0:
        raise ValueError("separator_px must be nonnegative")
    h, w = frames[0].pixels.shape
    if any(f.pixels.shape != (h, w) for f in frames):
        raise SizeMismatch("frames differ in size")
    order = np.argsort(sequence.assigned_values, kind="stable")
    k = len(frames)
    strip = np.ones((h, k * w + (k - 1) * separator_px))
    for slot, j in enumerate(order):
        left = slot * (w + separator_px)
        strip[:, left:left + w] = frames[j].pixels
    return ImageSample(strip)
