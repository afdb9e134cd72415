"""Dataset loading, preprocessing to network resolution, and batch iteration.

On-disk layout (shared with the synthetic generator):

    <root>/images/<id>.png   8-bit grayscale
    <root>/masks/<id>.png    8-bit, background=0, band=255 (>=128 decodes to 1)
    <root>/manifest.txt

Batch schedules are pure functions of (seed, step), so an interrupted run can
resume mid-epoch without serializing iterator state.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import ConfigError, DataError, LabelVisibilityError
from .synthdata import ImageSample

MANIFEST_NAME = "manifest.txt"
MASK_THRESHOLD = 128  # PNG value >= threshold decodes to band


def write_image_png(path: str | Path, image: np.ndarray) -> None:
    """Write a [0,1] float image as 8-bit grayscale PNG."""
    path = Path(path)
    data = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    try:
        Image.fromarray(data, mode="L").save(path)
    except OSError as exc:
        raise DataError(f"cannot write image {path}: {exc}") from exc


def write_mask_png(path: str | Path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as 8-bit PNG with band=255."""
    path = Path(path)
    data = (mask.astype(np.uint8) * 255).astype(np.uint8)
    try:
        Image.fromarray(data, mode="L").save(path)
    except OSError as exc:
        raise DataError(f"cannot write mask {path}: {exc}") from exc


def read_image_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit grayscale PNG into a [0,1] float array."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc


def read_mask_png(path: str | Path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as img:
            return (np.asarray(img.convert("L")) >= MASK_THRESHOLD).astype(np.uint8)
    except OSError as exc:
        raise DataError(f"cannot read mask {path}: {exc}") from exc


def _png_size(path: Path) -> tuple[int, int]:
    """(height, width) from the PNG header without decoding pixels."""
    try:
        with Image.open(path) as img:
            w, h = img.size
        return h, w
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


class Dataset:
    """Ordered, immutable view over one domain's samples on disk.

    When labels_visible is false the mask files are never opened; requesting
    mask contents raises LabelVisibilityError. Loaded pixel data is memoized,
    callers must not mutate returned arrays.
    """

    def __init__(self, root: Path, ids: Sequence[str], domain: str, labels_visible: bool):
        self.root = root
        self._ids = list(ids)
        self.domain = domain
        self.labels_visible = labels_visible
        self._image_cache: dict[int, np.ndarray] = {}
        self._mask_cache: dict[int, np.ndarray] = {}
        self._tensor_cache: dict[tuple[int, int], tuple] = {}

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def ids(self) -> list[str]:
        return list(self._ids)

    def id(self, i: int) -> str:
        return self._ids[i]

    def image(self, i: int) -> np.ndarray:
        if i not in self._image_cache:
            self._image_cache[i] = read_image_png(self.root / "images" / f"{self._ids[i]}.png")
        return self._image_cache[i]

    def mask(self, i: int) -> np.ndarray:
        if not self.labels_visible:
            raise LabelVisibilityError(
                f"dataset at {self.root} was loaded with labels_visible=False; "
                f"mask of {self._ids[i]!r} is not accessible"
            )
        if i not in self._mask_cache:
            self._mask_cache[i] = read_mask_png(self.root / "masks" / f"{self._ids[i]}.png")
        return self._mask_cache[i]

    def sample(self, i: int) -> ImageSample:
        mask = self.mask(i) if self.labels_visible else None
        return ImageSample(image=self.image(i), mask=mask, domain=self.domain, id=self._ids[i])

    def preprocessed(self, i: int, size: int):
        """Memoized preprocess(sample(i), size)."""
        key = (i, size)
        if key not in self._tensor_cache:
            self._tensor_cache[key] = preprocess(self.sample(i), size)
        return self._tensor_cache[key]


def load_dataset(root: str | Path, domain: str, labels_visible: bool) -> Dataset:
    """Load a dataset directory; ordering is lexicographic by basename.

    For labels_visible datasets every image must have a mask of identical
    dimensions; violations name the offending basename.
    """
    root = Path(root)
    images_dir = root / "images"
    if not images_dir.is_dir():
        raise DataError(f"dataset root {root} has no images/ directory")
    ids = sorted(p.stem for p in images_dir.glob("*.png"))
    if not ids:
        raise DataError(f"dataset root {root} contains no PNG images")
    if labels_visible:
        masks_dir = root / "masks"
        for sample_id in ids:
            mask_path = masks_dir / f"{sample_id}.png"
            if not mask_path.is_file():
                raise DataError(f"missing mask for {sample_id!r} in {masks_dir}")
            image_size = _png_size(images_dir / f"{sample_id}.png")
            mask_size = _png_size(mask_path)
            if image_size != mask_size:
                raise DataError(
                    f"image/mask dimensions disagree for {sample_id!r}: "
                    f"image {image_size} vs mask {mask_size}"
                )
    return Dataset(root, ids, domain, labels_visible)


def preprocess(sample: ImageSample, size: int):
    """Resize to size x size network resolution.

    Image: bilinear, values kept in [0,1]. Mask: nearest-neighbor (labels stay
    in {0,1}) then one-hot over the 2 classes. Returns (image 1xSxS float32,
    onehot 2xSxS float32 or None).
    """
    if size < 32:
        raise ConfigError(f"network input size {size} must be >= 32")
    img = torch.from_numpy(np.ascontiguousarray(sample.image)).float()[None, None]
    img = F.interpolate(img, size=(size, size), mode="bilinear", align_corners=False)
    img = img.clamp(0.0, 1.0)[0]

    onehot = None
    if sample.mask is not None:
        m = torch.from_numpy(np.ascontiguousarray(sample.mask)).float()[None, None]
        m = F.interpolate(m, size=(size, size), mode="nearest")[0, 0]
        onehot = torch.stack([1.0 - m, m], dim=0)
    return img, onehot


@dataclass
class Batch:
    images: torch.Tensor  # B x 1 x S x S
    labels_onehot: Optional[torch.Tensor]  # B x 2 x S x S, None when label-blind
    ids: list[str]


def make_batch(dataset: Dataset, indices: Sequence[int], size: int) -> Batch:
    images, labels, ids = [], [], []
    for i in indices:
        img, onehot = dataset.preprocessed(int(i), size)
        images.append(img)
        if dataset.labels_visible:
            labels.append(onehot)
        ids.append(dataset.id(int(i)))
    return Batch(
        images=torch.stack(images, dim=0),
        labels_onehot=torch.stack(labels, dim=0) if labels else None,
        ids=ids,
    )


def _epoch_permutation(n: int, seed: int, stream: int, epoch: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, epoch)))
    return rng.permutation(n)


def epoch_steps(dataset_size: int, batch_size: int) -> int:
    """Steps per epoch; trailing partial batches are dropped."""
    return dataset_size // batch_size


def single_iterator(
    dataset: Dataset,
    batch_size: int,
    seed: int,
    *,
    size: int,
    start_step: int = 0,
) -> Iterator[Batch]:
    """Infinite seeded stream of batches from one dataset, reshuffled per epoch."""
    if batch_size > len(dataset):
        raise ConfigError(
            f"batch_size {batch_size} exceeds dataset size {len(dataset)} at {dataset.root}"
        )
    steps = epoch_steps(len(dataset), batch_size)
    k = start_step
    while True:
        perm = _epoch_permutation(len(dataset), seed, 0, k // steps)
        pos = (k % steps) * batch_size
        yield make_batch(dataset, perm[pos : pos + batch_size], size)
        k += 1


def paired_iterator(
    source: Dataset,
    target: Dataset,
    batch_size: int,
    seed: int,
    *,
    size: int,
    start_step: int = 0,
) -> Iterator[tuple[Batch, Batch]]:
    """Infinite seeded stream of (source batch, target batch) pairs.

    Epochs are driven by the source dataset (every source id appears once per
    epoch, partial batches dropped); the target is an independently shuffled
    stream that cycles so every step has both batches.
    """
    if len(source) == 0 or len(target) == 0:
        raise ConfigError("paired iteration requires non-empty source and target datasets")
    if batch_size > len(source) or batch_size > len(target):
        raise ConfigError(
            f"batch_size {batch_size} exceeds a dataset size "
            f"(source {len(source)}, target {len(target)})"
        )
    steps = epoch_steps(len(source), batch_size)
    n_t = len(target)
    k = start_step
    while True:
        src_perm = _epoch_permutation(len(source), seed, 0, k // steps)
        pos = (k % steps) * batch_size
        src_idx = src_perm[pos : pos + batch_size]
        tgt_idx = []
        for j in range(batch_size):
            g = k * batch_size + j  # global target cursor
            tgt_idx.append(_epoch_permutation(n_t, seed, 1, g // n_t)[g % n_t])
        yield make_batch(source, src_idx, size), make_batch(target, tgt_idx, size)
        k += 1
