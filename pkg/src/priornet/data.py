"""Dataset manifests, splitting, synthetic phantoms and target/template sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import io
from .errors import ConfigError, DataError, FormatError, GenerationError, ShapeError
from .volume import (
    LabelMap,
    TemplateBundle,
    Volume,
    center_crop,
    extract_foreground_regions,
    normalize_zscore,
    truncate_intensity,
)

SPLITS = ("train", "test")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    label: str
    split: str = "train"


@dataclass
class DatasetManifest:
    """Image/label file pairs with split tags.

    Paths are stored as written in the manifest file and resolved against
    ``root`` (the manifest's directory) when relative.
    """

    entries: list[ManifestEntry]
    num_classes: int
    dimensionality: int = 3
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        paths = [e.image for e in self.entries] + [e.label for e in self.entries]
        if len(set(paths)) != len(paths):
            raise DataError("manifest paths must be distinct")
        bad = {e.split for e in self.entries} - set(SPLITS)
        if bad:
            raise DataError(f"unknown split tags {sorted(bad)}")
        if self.num_classes < 1:
            raise DataError("manifest needs num_classes >= 1")

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.root / p

    def split(self, tag: str) -> list[int]:
        return [i for i, e in enumerate(self.entries) if e.split == tag]

    def write(self, path) -> Path:
        path = Path(path)
        lines = [
            "# priornet dataset manifest",
            f"# num_classes = {self.num_classes}",
            f"# dimensionality = {self.dimensionality}",
        ]
        lines += [f"{e.image}\t{e.label}\t{e.split}" for e in self.entries]
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        meta = {}
        entries = []
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            if not line.strip():
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].partition("=")
                if sep:
                    meta[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise FormatError(f"{path}:{lineno}: expected <image>\\t<label>\\t<split>")
            entries.append(ManifestEntry(*parts))
        if "num_classes" not in meta:
            raise FormatError(f"{path}: missing '# num_classes = K' line")
        manifest = cls(entries, int(meta["num_classes"]), int(meta.get("dimensionality", 3)),
                       path.parent)
        for e in manifest.entries:
            for p in (e.image, e.label):
                if not manifest.resolve(p).exists():
                    raise DataError(f"{path}: listed file {p} does not exist")
        return manifest


def split_dataset(manifest: DatasetManifest, test_fraction: float | None = None,
                  test_count: int | None = None, seed: int = 0) -> DatasetManifest:
    """Randomly retag entries into disjoint train/test splits."""
    n = len(manifest.entries)
    if test_count is None:
        if test_fraction is None or not 0.0 <= test_fraction <= 1.0:
            raise ConfigError("give test_count or a test_fraction in [0, 1]")
        test_count = int(round(test_fraction * n))
    if not 0 <= test_count <= n:
        raise ConfigError(f"cannot take {test_count} test entries from {n}")
    order = np.random.default_rng(seed).permutation(n)
    test = set(order[:test_count].tolist())
    entries = [replace(e, split="test" if i in test else "train") for i, e in enumerate(manifest.entries)]
    return replace(manifest, entries=entries)


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the blob-phantom generator.

    Every class gets its own blobs with a layout shared by all subjects; each
    volume jitters blob centres and radii. Voxels of class ``c`` are drawn from
    ``N(class_means[c-1], class_stds[c-1])`` plus the global noise, so their
    total spread is ``sqrt(class_std**2 + noise_std**2)``.
    """

    num_volumes: int = 10
    shape: tuple[int, ...] = (32, 32, 32)
    num_classes: int = 3
    # empty means evenly spaced in [1, 2]; empty stds mean 0.2 per class
    class_means: tuple[float, ...] = ()
    class_stds: tuple[float, ...] = ()
    background_mean: float = 0.0
    noise_std: float = 0.6
    blobs_per_class: tuple[int, int] = (1, 1)
    radius_range: tuple[float, float] = (3.0, 5.5)
    center_jitter: float = 2.0
    radius_jitter: float = 0.15
    max_retries: int = 200
    test_count: int = 0
    file_format: str = "pvol"
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if len(self.shape) not in (2, 3) or min(self.shape) < 1:
            raise ConfigError(f"shape must be 2D or 3D, got {self.shape}")
        if not self.class_means:
            object.__setattr__(self, "class_means", tuple(np.linspace(1.0, 2.0, self.num_classes).tolist()))
        if not self.class_stds:
            object.__setattr__(self, "class_stds", (0.2,) * self.num_classes)
        for name in ("class_means", "class_stds"):
            if len(getattr(self, name)) != self.num_classes:
                raise ConfigError(f"{name} needs {self.num_classes} values")
        lo, hi = self.blobs_per_class
        if not 1 <= lo <= hi:
            raise ConfigError("blobs_per_class must satisfy 1 <= min <= max")
        if not 0 < self.radius_range[0] <= self.radius_range[1]:
            raise ConfigError("radius_range must satisfy 0 < min <= max")
        if self.file_format not in ("pvol", "nii"):
            raise ConfigError("file_format must be 'pvol' or 'nii'")
        if not 0 <= self.test_count <= self.num_volumes:
            raise ConfigError("test_count must lie in [0, num_volumes]")


def _ellipsoid(grid, center, radii):
    dist = sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii))
    return dist <= 1.0


def _dilate(mask):
    out = mask.copy()
    for axis in range(mask.ndim):
        out |= np.roll(mask, 1, axis) | np.roll(mask, -1, axis)
    return out


def _place(rng, spec: SyntheticSpec, grid, centers, radii, jitter_c, jitter_r):
    """Rasterise one labelled layout, re-jittering until blobs don't touch."""
    shape = spec.shape
    for _ in range(spec.max_retries):
        labels = np.zeros(shape, dtype=np.uint8)
        ok = True
        for cls, c, r in zip(centers["cls"], centers["pos"], radii):
            c = np.asarray(c) + rng.uniform(-jitter_c, jitter_c, size=len(shape))
            r = np.asarray(r) * rng.uniform(1 - jitter_r, 1 + jitter_r, size=len(shape))
            blob = _ellipsoid(grid, c, r)
            if not blob.any() or (_dilate(blob) & (labels > 0)).any():
                ok = False
                break
            labels[blob] = cls
        if ok:
            return labels
    raise GenerationError(f"could not place blobs without overlap after {spec.max_retries} retries")


def _separated_positions(rng, spec, classes, reach, margin):
    for _ in range(spec.max_retries):
        pos = [rng.uniform(margin, np.array(spec.shape) - 1 - margin) for _ in classes]
        if all(np.linalg.norm(pos[a] - pos[b]) > reach[a] + reach[b] + 1
               for a in range(len(pos)) for b in range(a)):
            return pos
    return None


def synthesize(spec: SyntheticSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    """In-memory ``(image, labels)`` pairs for ``spec`` (no files written)."""
    rng = np.random.default_rng(spec.seed)
    shape = spec.shape
    grid = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in shape], indexing="ij")
    counts = rng.integers(spec.blobs_per_class[0], spec.blobs_per_class[1] + 1, size=spec.num_classes)
    classes = [c + 1 for c in range(spec.num_classes) for _ in range(counts[c])]

    # canonical layout shared by every subject
    r_lo, r_hi = spec.radius_range
    margin = r_hi * (1 + spec.radius_jitter) + spec.center_jitter
    if any(n <= 2 * margin for n in shape):
        raise GenerationError(f"shape {shape} too small for radius range {spec.radius_range}")
    # redraw radii only when a full round of position draws fails
    for _ in range(spec.max_retries):
        radii = [rng.uniform(r_lo, r_hi, size=len(shape)) for _ in classes]
        reach = [r.max() * (1 + spec.radius_jitter) for r in radii]
        pos = _separated_positions(rng, spec, classes, reach, margin)
        if pos is not None:
            break
    else:
        raise GenerationError("could not find a non-overlapping canonical layout")
    layout = {"cls": classes, "pos": pos}

    out = []
    for _ in range(spec.num_volumes):
        labels = _place(rng, spec, grid, layout, radii, spec.center_jitter, spec.radius_jitter)
        image = rng.normal(spec.background_mean, spec.noise_std, size=shape)
        for c in range(1, spec.num_classes + 1):
            mask = labels == c
            image[mask] += (spec.class_means[c - 1] - spec.background_mean
                            + rng.normal(0.0, spec.class_stds[c - 1], size=int(mask.sum())))
        out.append((image.astype(np.float32), labels))
    return out


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir) -> DatasetManifest:
    """Write phantom volumes, label maps and ``manifest.tsv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ext = spec.file_format
    entries = []
    for i, (image, labels) in enumerate(synthesize(spec)):
        img_name, lbl_name = f"image_{i:04d}.{ext}", f"label_{i:04d}.{ext}"
        io.write_volume(out_dir / img_name, Volume(image))
        io.write_volume(out_dir / lbl_name, LabelMap(labels, spec.num_classes))
        entries.append(ManifestEntry(img_name, lbl_name, "train"))
    manifest = DatasetManifest(entries, spec.num_classes, len(spec.shape), out_dir)
    if spec.test_count:
        manifest = split_dataset(manifest, test_count=spec.test_count, seed=spec.seed)
    manifest.write(out_dir / "manifest.tsv")
    return manifest


# ---------------------------------------------------------------------------
# loaded datasets and pair sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Preprocessing:
    """Intensity steps applied on load: any of ``truncate`` and ``zscore``, in order."""

    steps: tuple[str, ...] = ()
    window: tuple[float, float] = (-200.0, 250.0)
    crop: tuple[int, ...] = ()

    def __post_init__(self):
        bad = set(self.steps) - {"truncate", "zscore"}
        if bad:
            raise ConfigError(f"unknown preprocessing steps {sorted(bad)}")

    def apply(self, image: Volume, labels: LabelMap | None = None) -> tuple[Volume, LabelMap | None]:
        if self.crop:
            image = center_crop(image, self.crop)
            if labels is not None:
                labels = LabelMap(center_crop(Volume(labels.data), self.crop).data, labels.num_classes,
                                  labels.spacing)
        for step in self.steps:
            if step == "truncate":
                image = truncate_intensity(image, *self.window)
            else:
                image = normalize_zscore(image)
        return image, labels


class TrainingPair(NamedTuple):
    target: Volume
    labels: LabelMap
    bundle: TemplateBundle


class Dataset:
    """Volumes of a manifest loaded into memory.

    With ``dimensionality=2`` each axial slice (last axis) of a 3D volume is a
    sample; training samples are the slices that contain foreground. Sample
    keys are ``(volume_index, slice_index)`` with ``slice_index=None`` in 3D.
    """

    def __init__(self, images, labels, splits, num_classes: int, dimensionality: int = 3,
                 names=None):
        self.images = [np.asarray(v, dtype=np.float32) for v in images]
        self.labels = [np.asarray(v) for v in labels]
        self.splits = list(splits)
        self.num_classes = int(num_classes)
        self.dimensionality = int(dimensionality)
        self.names = list(names) if names is not None else [f"volume_{i:04d}" for i in range(len(images))]
        for img, lbl in zip(self.images, self.labels):
            if img.shape != lbl.shape:
                raise ShapeError(f"image shape {img.shape} != label shape {lbl.shape}")
        self._bundles: dict = {}

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, preprocessing: Preprocessing = Preprocessing(),
                      dimensionality: int | None = None) -> "Dataset":
        images, labels = [], []
        for e in manifest.entries:
            img = io.read_volume(manifest.resolve(e.image))
            lbl = io.read_labelmap(manifest.resolve(e.label), manifest.num_classes)
            img, lbl = preprocessing.apply(img, lbl)
            images.append(img.data)
            labels.append(lbl.data)
        names = [Path(e.image).stem for e in manifest.entries]
        return cls(images, labels, [e.split for e in manifest.entries], manifest.num_classes,
                   dimensionality or manifest.dimensionality, names)

    @property
    def slice_mode(self) -> bool:
        return self.dimensionality == 2 and self.images and self.images[0].ndim == 3

    def volumes(self, split: str) -> list[int]:
        return [i for i, s in enumerate(self.splits) if s == split]

    def samples(self, split: str = "train") -> list[tuple[int, int | None]]:
        keys = []
        for i in self.volumes(split):
            if self.slice_mode:
                fg = np.flatnonzero((self.labels[i] > 0).any(axis=(0, 1)))
                keys.extend((i, int(z)) for z in fg)
            else:
                keys.append((i, None))
        return keys

    def sample_shape(self) -> tuple[int, ...]:
        shape = self.images[0].shape
        return shape[:2] if self.slice_mode else shape

    def get(self, key) -> tuple[Volume, LabelMap]:
        i, z = key
        img, lbl = self.images[i], self.labels[i]
        if z is not None:
            img, lbl = img[..., z], lbl[..., z]
        return Volume(img), LabelMap(lbl, self.num_classes)

    def bundle(self, key) -> TemplateBundle:
        if key not in self._bundles:
            self._bundles[key] = extract_foreground_regions(*self.get(key))
        return self._bundles[key]


def sample_training_pair(data, rng: np.random.Generator) -> TrainingPair:
    """Draw a target and a template uniformly from the training split.

    The template is drawn from the training samples other than the target
    when at least two exist; with a single training sample it pairs with
    itself. ``data`` is a ``Dataset`` or a ``DatasetManifest``.
    """
    if isinstance(data, DatasetManifest):
        data = Dataset.from_manifest(data)
    keys = data.samples("train")
    if not keys:
        raise DataError("training split is empty")
    t = int(rng.integers(len(keys)))
    if len(keys) > 1:
        m = int(rng.integers(len(keys) - 1))
        m = m + 1 if m >= t else m
    else:
        m = t
    target, labels = data.get(keys[t])
    return TrainingPair(target, labels, data.bundle(keys[m]))


def steps_per_epoch(num_train: int, batch_size: int) -> int:
    return max(1, math.ceil(num_train / batch_size))
