"""Image-space and label-space primitives.

Arrays are plain numpy grids of shape ``(H, W)`` or ``(H, W, D)``. Channel
stacks produced here (foreground regions, one-hot maps) put the channel axis
first, which is the layout the network consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateInputError,
    InvalidLabelMapError,
    InvalidRangeError,
    ShapeError,
)


def _default_spacing(ndim: int) -> tuple[float, ...]:
    return (1.0,) * ndim


@dataclass
class Volume:
    """Scalar intensity grid plus per-axis voxel size in mm."""

    data: np.ndarray
    spacing: tuple[float, ...] = field(default=())

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (2, 3) or min(self.data.shape) < 1:
            raise ShapeError(f"volume must be a non-empty 2D or 3D grid, got shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.number):
            raise TypeError(f"volume data must be numeric, got {self.data.dtype}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")
        if not self.spacing:
            self.spacing = _default_spacing(self.data.ndim)
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != self.data.ndim:
            raise ShapeError(f"spacing {self.spacing} does not match {self.data.ndim}D data")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class LabelMap:
    """Integer class grid; 0 is background, 1..num_classes are foreground."""

    data: np.ndarray
    num_classes: int | None = None
    spacing: tuple[float, ...] = field(default=())

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim not in (2, 3) or min(data.shape) < 1:
            raise ShapeError(f"label map must be a non-empty 2D or 3D grid, got shape {data.shape}")
        if not np.issubdtype(data.dtype, np.integer):
            if not np.all(np.equal(np.mod(data, 1), 0)):
                raise InvalidLabelMapError("label map contains non-integer values")
            data = data.astype(np.int64)
        if self.num_classes is None:
            self.num_classes = max(int(data.max()), 1)
        if self.num_classes < 1:
            raise InvalidLabelMapError("a label map needs at least one foreground class")
        if data.min() < 0 or data.max() > self.num_classes:
            raise InvalidLabelMapError(
                f"labels must lie in [0, {self.num_classes}], got [{data.min()}, {data.max()}]"
            )
        self.data = data
        if not self.spacing:
            self.spacing = _default_spacing(data.ndim)
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class TemplateBundle:
    """A template image, its per-class foreground regions, and its labels.

    ``foreground_channels`` has shape ``(K, *spatial)``; channel ``c`` holds the
    template intensities where ``labels == c + 1`` and zero elsewhere.
    """

    template: Volume
    foreground_channels: np.ndarray
    labels: LabelMap

    @property
    def num_classes(self) -> int:
        return self.labels.num_classes

    @property
    def shape(self) -> tuple[int, ...]:
        return self.template.shape

    def stacked(self) -> np.ndarray:
        """Template-encoder input: the template followed by its K regions."""
        return np.concatenate([self.template.data[None], self.foreground_channels], axis=0)


def truncate_intensity(v: Volume, lo: float, hi: float) -> Volume:
    """Clamp every voxel to ``[lo, hi]`` (e.g. a Hounsfield window)."""
    if not lo < hi:
        raise InvalidRangeError(f"need lo < hi, got lo={lo}, hi={hi}")
    return Volume(np.clip(v.data, lo, hi), v.spacing)


def normalize_zscore(v: Volume) -> Volume:
    """Shift and scale to zero mean and unit population standard deviation."""
    if v.data.size < 2:
        raise DegenerateInputError("z-score normalisation needs at least two voxels")
    data = v.data.astype(np.float64)
    mean = data.mean()
    std = data.std()
    # relative threshold, so large constant volumes with rounding noise still count as constant
    if std <= 1e-12 * max(1.0, abs(mean)):
        raise DegenerateInputError("cannot normalise a constant volume")
    out = (data - mean) / std
    if np.issubdtype(v.data.dtype, np.floating) and v.data.dtype != np.float64:
        out = out.astype(v.data.dtype)
    return Volume(out, v.spacing)


def center_crop(v: Volume, dims) -> Volume:
    """Central sub-grid of extent ``dims``; offsets are ``floor((in - out) / 2)``."""
    dims = tuple(int(d) for d in dims)
    if len(dims) != v.data.ndim:
        raise ShapeError(f"crop dims {dims} do not match {v.data.ndim}D volume")
    if any(d < 1 or d > n for d, n in zip(dims, v.shape)):
        raise ShapeError(f"crop dims {dims} out of bounds for shape {v.shape}")
    slices = tuple(slice((n - d) // 2, (n - d) // 2 + d) for d, n in zip(dims, v.shape))
    return Volume(v.data[slices].copy(), v.spacing)


def crop_offsets(shape, dims) -> tuple[int, ...]:
    return tuple((n - d) // 2 for n, d in zip(shape, dims))


def extract_foreground_regions(img: Volume, labels: LabelMap) -> TemplateBundle:
    if img.shape != labels.shape:
        raise ShapeError(f"image shape {img.shape} != label shape {labels.shape}")
    k = labels.num_classes
    if k < 1:
        raise InvalidLabelMapError("label map has no foreground classes")
    classes = np.arange(1, k + 1).reshape((k,) + (1,) * img.data.ndim)
    masks = labels.data[None] == classes
    channels = np.where(masks, img.data[None], np.zeros((), dtype=img.data.dtype))
    return TemplateBundle(img, channels, labels)


def one_hot_encode(labels: LabelMap, dtype=np.float32) -> np.ndarray:
    """Indicator stack of shape ``(K + 1, *spatial)``; channel 0 is background."""
    k = labels.num_classes
    classes = np.arange(k + 1).reshape((k + 1,) + (1,) * labels.data.ndim)
    return (labels.data[None] == classes).astype(dtype)
