"""
Training images: directory ingestion and a procedural toy corpus.

The procedural corpus has two visually separate families:

* ``painting``: layered sinusoidal blends of a warm palette plus short
  brush strokes. Every colour satisfies R >= G >= B, so all hues sit in the
  red-yellow sector.
* ``object``: a filled disk, triangle or bar in a cool palette on a pale
  cool background. Every colour satisfies B >= G >= R (cyan-blue sector).

Convex mixtures keep those orderings, so the two families never share hues.
"""

from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from config import DataConfig
from errors import DegenerateInputError, ParameterError
from image_io import center_crop_resize, list_images, pil_to_tensor, read_image
from utils import derive_rng

logger = logging.getLogger(__name__)

PAINTING = "painting"
OBJECT = "object"

PAINTING_PALETTES = (
    ((0.85, 0.45, 0.20), (0.95, 0.80, 0.35), (0.55, 0.30, 0.15)),
    ((0.75, 0.25, 0.15), (0.90, 0.65, 0.45), (0.65, 0.50, 0.30)),
    ((0.60, 0.35, 0.25), (0.98, 0.88, 0.60), (0.80, 0.40, 0.10)),
)
OBJECT_PALETTE = ((0.10, 0.45, 0.85), (0.20, 0.70, 0.80), (0.30, 0.35, 0.90), (0.15, 0.60, 0.75))
OBJECT_BACKGROUND = ((0.80, 0.88, 0.95), (0.70, 0.82, 0.90))
SHAPES = ("disk", "triangle", "bar")


class ImageDataset:
    """
    An in-memory image set.

    Attributes:
        images (torch.Tensor): (N, 3, R, R) float32 in [-1, 1].
        labels (List[str]): Family label or source file name per image.
    """

    def __init__(self, images: torch.Tensor, labels: Sequence[str]):
        if images.dim() != 4 or images.shape[0] == 0:
            raise DegenerateInputError("dataset needs a non-empty (N, C, H, W) tensor")
        if len(labels) != images.shape[0]:
            raise ParameterError("one label per image is required")
        self._images = images
        self._labels = list(labels)

    @property
    def images(self) -> torch.Tensor:
        return self._images

    @property
    def labels(self) -> List[str]:
        return list(self._labels)

    @property
    def resolution(self) -> int:
        return int(self._images.shape[-1])

    def __len__(self) -> int:
        return int(self._images.shape[0])

    def __getitem__(self, index: int) -> torch.Tensor:
        return self._images[index]

    def batch(self, indices: Sequence[int]) -> torch.Tensor:
        return self._images[torch.as_tensor(list(indices), dtype=torch.long)]

    def indices_with_label(self, label: str) -> List[int]:
        return [i for i, lab in enumerate(self._labels) if lab == label]

    def split(self, holdout: int) -> Tuple["ImageDataset", "ImageDataset"]:
        """Deterministic (train, held-out) split: the last ``holdout`` images are held out."""
        if not 0 < holdout < len(self):
            raise ParameterError(f"holdout must be in (0, {len(self)}), got {holdout}")
        cut = len(self) - holdout
        return (ImageDataset(self._images[:cut], self._labels[:cut]),
                ImageDataset(self._images[cut:], self._labels[cut:]))


def load_dir(path: str | Path, resolution: int) -> ImageDataset:
    """
    Load every readable image in a directory.

    Files are visited in sorted order, center-cropped to a square and
    resized to ``resolution``. Unreadable files are skipped with a warning.

    Raises:
        FileNotFoundError: If the directory does not exist.
        DegenerateInputError: If no image could be read.
    """
    tensors, names = [], []
    for file in list_images(path):
        try:
            img = center_crop_resize(read_image(file), resolution)
        except (OSError, ValueError) as e:
            logger.warning("skipping unreadable image %s: %s", file, e)
            continue
        tensors.append(pil_to_tensor(img))
        names.append(file.name)
    if not tensors:
        raise DegenerateInputError(f"no readable images in {path}")
    logger.info("loaded %d images from %s at %dx%d", len(tensors), path, resolution, resolution)
    return ImageDataset(torch.stack(tensors), names)


def _mix(palette: Sequence[Tuple[float, float, float]], weights: np.ndarray) -> np.ndarray:
    """Convex combination of palette colours; ``weights`` is (K, H, W) non-negative."""
    colors = np.asarray(palette, dtype=np.float64)                 # (K, 3)
    weights = weights / weights.sum(axis=0, keepdims=True)
    return np.einsum("khw,kc->hwc", weights, colors)


def _rgb255(color: Sequence[float]) -> Tuple[int, int, int]:
    return tuple(int(round(c * 255)) for c in color)


def _painting(rng: np.random.Generator, size: int) -> np.ndarray:
    palette = PAINTING_PALETTES[int(rng.integers(len(PAINTING_PALETTES)))]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    layers = []
    for _ in palette:
        fx, fy = rng.uniform(0.5, 3.0, size=2)
        phase = rng.uniform(0, 2 * math.pi)
        layers.append(1.05 + np.sin(2 * math.pi * (fx * xx + fy * yy) + phase))
    base = _mix(palette, np.stack(layers))
    canvas = Image.fromarray(np.round(base * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for _ in range(int(rng.integers(3, 9))):
        x0, y0 = rng.uniform(0, size, size=2)
        angle = rng.uniform(0, 2 * math.pi)
        length = rng.uniform(0.1, 0.4) * size
        x1, y1 = x0 + length * math.cos(angle), y0 + length * math.sin(angle)
        color = palette[int(rng.integers(len(palette)))]
        draw.line([(x0, y0), (x1, y1)], fill=_rgb255(color), width=max(1, size // 16))
    return np.asarray(canvas)


def _object(rng: np.random.Generator, size: int) -> np.ndarray:
    background = OBJECT_BACKGROUND[int(rng.integers(len(OBJECT_BACKGROUND)))]
    color = OBJECT_PALETTE[int(rng.integers(len(OBJECT_PALETTE)))]
    canvas = Image.new("RGB", (size, size), _rgb255(background))
    draw = ImageDraw.Draw(canvas)
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    cx, cy = rng.uniform(0.3, 0.7, size=2) * size
    r = rng.uniform(0.15, 0.3) * size
    if shape == "disk":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=_rgb255(color))
    elif shape == "triangle":
        rot = rng.uniform(0, 2 * math.pi)
        pts = [(cx + r * math.cos(rot + k * 2 * math.pi / 3), cy + r * math.sin(rot + k * 2 * math.pi / 3))
               for k in range(3)]
        draw.polygon(pts, fill=_rgb255(color))
    else:
        half_w = r * rng.uniform(0.25, 0.45)
        if rng.random() < 0.5:
            draw.rectangle([cx - r, cy - half_w, cx + r, cy + half_w], fill=_rgb255(color))
        else:
            draw.rectangle([cx - half_w, cy - r, cx + half_w, cy + r], fill=_rgb255(color))
    return np.asarray(canvas)


def procedural_sample(seed: int, index: int, resolution: int = 32) -> Tuple[torch.Tensor, str]:
    """Sample ``index`` of the corpus for ``seed``; even indices are paintings, odd are objects."""
    rng = derive_rng(seed, index)
    label = PAINTING if index % 2 == 0 else OBJECT
    arr = _painting(rng, resolution) if label == PAINTING else _object(rng, resolution)
    return pil_to_tensor(Image.fromarray(arr)), label


def procedural_corpus(seed: int, n: int, resolution: int = 32) -> ImageDataset:
    """Deterministic toy corpus of ``n`` images alternating painting/object."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    samples = [procedural_sample(seed, i, resolution) for i in range(n)]
    return ImageDataset(torch.stack([s[0] for s in samples]), [s[1] for s in samples])


def dataset_from_config(data: DataConfig, resolution: int) -> ImageDataset:
    """Build the training set described by a run config's ``data`` section."""
    if data.source == "dir":
        return load_dir(data.path, resolution)
    return procedural_corpus(data.seed, data.n, resolution)
