# image_io.py
"""
Image, mask and table I/O for RefPaint.

Handles:
- Reading PNG/PPM images into [-1, 1] tensors and writing them back as 8-bit
- Reading and writing binary masks as PGM (P5) or grayscale PNG
- Reading evaluation manifests from CSV
- Writing comma-separated report tables with a header row

Pixel mapping: x in [-1, 1] <-> round((x + 1) * 127.5) in [0, 255].
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Sequence

import numpy as np
import torch
from PIL import Image

from errors import ShapeError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".ppm", ".pnm", ".jpg", ".jpeg", ".bmp"}
MANIFEST_COLUMNS = ("output", "original", "cp", "mask")


def read_image(path: str | Path) -> Image.Image:
    """
    Open an image file as RGB.

    Raises:
        FileNotFoundError: If the file is missing.
        OSError: If Pillow cannot decode it.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image not found: {path}")
    with Image.open(path) as img:
        return img.convert("RGB")


def center_crop_resize(img: Image.Image, resolution: int) -> Image.Image:
    """Center-crop the shortest side to a square, then resize to ``resolution``."""
    w, h = img.size
    side = min(w, h)
    left, top = (w - side) // 2, (h - side) // 2
    img = img.crop((left, top, left + side, top + side))
    if side != resolution:
        img = img.resize((resolution, resolution), Image.BICUBIC)
    return img


def pil_to_tensor(img: Image.Image) -> torch.Tensor:
    """RGB image -> (3, H, W) float32 tensor in [-1, 1]."""
    arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return torch.from_numpy(arr / 127.5 - 1.0).permute(2, 0, 1).contiguous()


def to_uint8(x: torch.Tensor) -> np.ndarray:
    """(C, H, W) tensor in [-1, 1] -> (H, W, C) uint8 array."""
    if x.dim() != 3:
        raise ShapeError(f"expected a (C, H, W) image, got {tuple(x.shape)}")
    arr = torch.round((x.detach().to(torch.float64).clamp(-1.0, 1.0) + 1.0) * 127.5)
    return arr.permute(1, 2, 0).cpu().numpy().astype(np.uint8)


def load_image_tensor(path: str | Path, resolution: int) -> torch.Tensor:
    """Read, crop, resize and normalize an image file."""
    return pil_to_tensor(center_crop_resize(read_image(path), resolution))


def save_image(x: torch.Tensor, path: str | Path) -> Path:
    """
    Write a (3, H, W) image in [-1, 1] as 8-bit RGB.

    The format follows the suffix (.png or .ppm). If PNG encoding is not
    available, a P6 PPM is written next to the requested path instead.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = Image.fromarray(to_uint8(x))
    try:
        img.save(path)
    except (OSError, KeyError) as e:
        fallback = path.with_suffix(".ppm")
        logger.warning("could not write %s (%s); writing %s instead", path, e, fallback)
        img.save(fallback, format="PPM")
        return fallback
    return path


def load_mask(path: str | Path, resolution: int | None = None) -> torch.Tensor:
    """
    Read a grayscale mask; values >= 128 map to 1 (keep), the rest to 0.

    Returns:
        torch.Tensor: (H, W) float32 of {0, 1}.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mask not found: {path}")
    with Image.open(path) as img:
        gray = img.convert("L")
        if resolution is not None and gray.size != (resolution, resolution):
            gray = gray.resize((resolution, resolution), Image.NEAREST)
        arr = np.asarray(gray, dtype=np.uint8)
    return torch.from_numpy((arr >= 128).astype(np.float32))


def save_mask(m: torch.Tensor, path: str | Path) -> Path:
    """Write an (H, W) binary mask as PGM (P5) or grayscale PNG, 1 -> 255."""
    path = Path(path)
    if m.dim() != 2:
        raise ShapeError(f"expected an (H, W) mask, got {tuple(m.shape)}")
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (m.detach().cpu().numpy() > 0.5).astype(np.uint8) * 255
    fmt = "PPM" if path.suffix.lower() in (".pgm", ".pnm") else None
    Image.fromarray(arr).save(path, format=fmt)
    return path


def list_images(directory: str | Path) -> List[Path]:
    """Image files in ``directory`` sorted lexicographically by name."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"image directory not found: {directory}")
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())


def read_manifest(csv_path: str | Path) -> List[Dict[str, str]]:
    """
    Read an evaluation manifest.

    Expected columns (header row): output,original,cp,mask. Paths are
    resolved relative to the manifest. Rows missing a column are skipped.

    Raises:
        FileNotFoundError: If the manifest is missing.
    """
    path = Path(csv_path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")

    rows: List[Dict[str, str]] = []
    with path.open("r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        for line_no, row in enumerate(reader, start=2):
            values = {k: (row.get(k) or "").strip() for k in MANIFEST_COLUMNS}
            if not all(values.values()):
                logger.warning("manifest %s line %d: missing column, skipped", path, line_no)
                continue
            rows.append({k: str((path.parent / v).resolve()) if not Path(v).is_absolute() else v
                         for k, v in values.items()})
    return rows


def write_table_csv(rows: Iterable[Dict[str, object]], fieldnames: Sequence[str],
                    csv_path: str | Path) -> Path:
    """
    Write rows as CSV with a header.

    Raises:
        OSError: If writing the file fails.
    """
    path = Path(csv_path)
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        with path.open("w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(fieldnames))
            writer.writeheader()
            for row in rows:
                writer.writerow({k: row.get(k, "") for k in fieldnames})
    except OSError as e:
        raise OSError(f"Failed to write table to {path}: {e}") from e
    return path
