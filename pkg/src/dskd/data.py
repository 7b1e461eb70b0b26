"""Dataset loading (MVTec-style layout), preprocessing and synthetic defects."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter
from torch import Tensor

LOGGER = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


class DataError(RuntimeError):
    """Missing directories, undecodable files or inconsistent annotations."""


@dataclass
class Sample:
    image: Tensor  # [3, S, S], standardised
    label: int
    mask: Optional[np.ndarray]  # [S, S] bool, present for labelled defects
    category: str
    sample_id: str
    raw: Optional[np.ndarray] = None  # [S, S, 3] uint8, resized source pixels


@dataclass
class DatasetSpec:
    root: Union[str, Path]
    category: str
    split: str = "train"
    input_size: int = 256

    def __post_init__(self) -> None:
        if self.split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")


def standardize(rgb: np.ndarray) -> Tensor:
    """uint8 [H, W, 3] -> float [3, H, W] with ImageNet channel statistics."""
    x = torch.from_numpy(np.array(rgb, dtype=np.float32)).div_(255.0).permute(2, 0, 1)
    mean = torch.tensor(IMAGENET_MEAN).view(3, 1, 1)
    std = torch.tensor(IMAGENET_STD).view(3, 1, 1)
    return (x - mean) / std


def resize_rgb(image: Union[Image.Image, np.ndarray], input_size: int) -> np.ndarray:
    if isinstance(image, np.ndarray):
        image = Image.fromarray(image)
    image = image.convert("RGB")
    if image.size != (input_size, input_size):
        image = image.resize((input_size, input_size), Image.BILINEAR)
    return np.asarray(image, dtype=np.uint8)


def preprocess(image: Union[Image.Image, np.ndarray], input_size: int) -> Tensor:
    """Bilinear resize to ``input_size`` squared, scale to [0, 1], standardise."""
    return standardize(resize_rgb(image, input_size))


def read_image(path: Path) -> Image.Image:
    try:
        with Image.open(path) as im:
            im.load()
            return im.copy()
    except (UnidentifiedImageError, OSError) as exc:
        raise DataError(f"cannot decode image {path}: {exc}") from exc


def read_mask(path: Path, input_size: int) -> np.ndarray:
    im = read_image(path).convert("L")
    if im.size != (input_size, input_size):
        im = im.resize((input_size, input_size), Image.NEAREST)
    return np.asarray(im, dtype=np.float32) / 255.0 >= 0.5


def _image_files(folder: Path) -> List[Path]:
    return sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def _find_mask(gt_dir: Path, stem: str) -> Optional[Path]:
    if not gt_dir.is_dir():
        return None
    hits = sorted(p for p in gt_dir.iterdir() if p.stem.startswith(f"{stem}_mask") and p.suffix.lower() in IMAGE_SUFFIXES)
    return hits[0] if hits else None


def load_dataset(spec: DatasetSpec, workers: int = 4) -> List[Sample]:
    """Load one split of one category in lexicographic order.

    Layout::

        <root>/<category>/train/good/*
        <root>/<category>/test/<defect_type>/*
        <root>/<category>/ground_truth/<defect_type>/<stem>_mask*
    """
    base = Path(spec.root) / spec.category
    split_dir = base / spec.split
    if not split_dir.is_dir():
        raise DataError(f"missing directory: {split_dir}")
    jobs: List[Tuple[Path, str, Optional[Path]]] = []
    if spec.split == "train":
        folders = [split_dir / "good"]
        if not folders[0].is_dir():
            raise DataError(f"missing directory: {folders[0]}")
    else:
        folders = sorted(p for p in split_dir.iterdir() if p.is_dir())
    for folder in folders:
        kind = folder.name
        for path in _image_files(folder):
            mask_path = None
            if kind != "good":
                mask_path = _find_mask(base / "ground_truth" / kind, path.stem)
                if mask_path is None:
                    raise DataError(f"anomalous test image without mask: {path}")
            jobs.append((path, kind, mask_path))

    def load(job: Tuple[Path, str, Optional[Path]]) -> Sample:
        path, kind, mask_path = job
        raw = resize_rgb(read_image(path), spec.input_size)
        mask = read_mask(mask_path, spec.input_size) if mask_path is not None else None
        return Sample(
            image=standardize(raw),
            label=int(kind != "good"),
            mask=mask,
            category=spec.category,
            sample_id=f"{spec.split}/{kind}/{path.stem}",
            raw=raw,
        )

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        samples = list(pool.map(load, jobs))  # map preserves submission order
    LOGGER.info("loaded %d %s samples for %s", len(samples), spec.split, spec.category)
    return samples


# ---------------------------------------------------------------------------
# synthetic textures

# normal textures blend between these two colours
PALETTE = np.array([[112, 84, 58], [196, 164, 118]], dtype=np.float64)
# defect colours lie well outside the palette's segment in RGB space
DEFECT_COLOURS = np.array([[30, 120, 220], [20, 20, 20], [235, 235, 235], [200, 40, 40]], dtype=np.float64)


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    coarse = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16, mode="wrap")
    fine = gaussian_filter(rng.standard_normal((size, size)), sigma=1.0, mode="wrap")
    t = coarse / (coarse.std() + 1e-12) + 0.5 * fine / (fine.std() + 1e-12)
    t = 1.0 / (1.0 + np.exp(-1.5 * t))  # squash into (0, 1)
    rgb = PALETTE[0] + t[..., None] * (PALETTE[1] - PALETTE[0])
    return rgb


def _defect_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    mask = np.zeros((size, size), dtype=bool)
    lo, hi = max(3, size // 10), max(4, size // 4)
    if rng.random() < 0.5:
        h, w = rng.integers(lo, hi + 1, size=2)
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        mask[y : y + h, x : x + w] = True
    else:
        # scratch: thick line segment between two random points
        length = rng.uniform(size / 4, size / 2)
        angle = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(length / 2, size - length / 2, size=2)
        dy, dx = np.sin(angle) * length / 2, np.cos(angle) * length / 2
        width = rng.uniform(1.0, max(1.5, size / 32))
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        p0 = np.array([cy - dy, cx - dx])
        d = np.array([2 * dy, 2 * dx])
        t = np.clip(((yy - p0[0]) * d[0] + (xx - p0[1]) * d[1]) / (d @ d), 0, 1)
        dist = np.hypot(yy - (p0[0] + t * d[0]), xx - (p0[1] + t * d[1]))
        mask = dist <= width
    return mask


def synthetic_raw(
    seed: int, n_train: int, n_test: int, defect_rate: float = 0.5, size: int = 64
) -> Tuple[List[np.ndarray], List[Tuple[np.ndarray, Optional[np.ndarray]]]]:
    """Raw uint8 images: train textures and (image, mask-or-None) test pairs."""
    if n_train < 1 or n_test < 1:
        raise ValueError("n_train and n_test must be >= 1")
    if not 0.0 <= defect_rate <= 1.0:
        raise ValueError(f"defect_rate must be in [0, 1], got {defect_rate}")
    rng = np.random.default_rng(seed)
    train = [np.round(_texture(rng, size)).astype(np.uint8) for _ in range(n_train)]
    n_defect = int(round(defect_rate * n_test))
    defective = np.zeros(n_test, dtype=bool)
    defective[rng.permutation(n_test)[:n_defect]] = True
    test = []
    for is_defect in defective:
        img = _texture(rng, size)
        mask = None
        if is_defect:
            mask = _defect_mask(rng, size)
            while not mask.any():
                mask = _defect_mask(rng, size)
            colour = DEFECT_COLOURS[rng.integers(len(DEFECT_COLOURS))]
            img[mask] = colour
        test.append((np.round(img).astype(np.uint8), mask))
    return train, test


def make_synthetic(
    seed: int,
    n_train: int,
    n_test: int,
    defect_rate: float = 0.5,
    size: int = 64,
    category: str = "synthetic",
) -> Tuple[List[Sample], List[Sample]]:
    """Deterministic textures with rectangle/scratch defects in off-palette colours."""
    train_raw, test_raw = synthetic_raw(seed, n_train, n_test, defect_rate, size)
    train = [
        Sample(standardize(img), 0, None, category, f"train/good/{i:03d}", img) for i, img in enumerate(train_raw)
    ]
    test = []
    for i, (img, mask) in enumerate(test_raw):
        kind = "good" if mask is None else "defect"
        test.append(Sample(standardize(img), int(mask is not None), mask, category, f"test/{kind}/{i:03d}", img))
    return train, test


def export_synthetic(
    root: Union[str, Path],
    seed: int,
    n_train: int,
    n_test: int,
    defect_rate: float = 0.5,
    size: int = 64,
    category: str = "synthetic",
) -> Path:
    """Write a synthetic dataset in the directory layout read by :func:`load_dataset`."""
    base = Path(root) / category
    train_raw, test_raw = synthetic_raw(seed, n_train, n_test, defect_rate, size)
    (base / "train" / "good").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(train_raw):
        Image.fromarray(img).save(base / "train" / "good" / f"{i:03d}.png")
    for i, (img, mask) in enumerate(test_raw):
        kind = "good" if mask is None else "defect"
        (base / "test" / kind).mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(base / "test" / kind / f"{i:03d}.png")
        if mask is not None:
            gt = base / "ground_truth" / kind
            gt.mkdir(parents=True, exist_ok=True)
            Image.fromarray(mask.astype(np.uint8) * 255).save(gt / f"{i:03d}_mask.png")
    return base
