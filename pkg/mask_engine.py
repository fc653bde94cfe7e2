"""
Inpainting masks and self-supervised training quadruplets.

Mask convention used everywhere in this repository:
    1 = keep (untouched background), 0 = inpaint (hole).

Single masks are float tensors of shape (H, W); batched masks are
(B, 1, H, W).
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch
from PIL import Image, ImageDraw

from config import StrokeParams
from errors import MaskGenerationError, ParameterError, ShapeError
from utils import check_mask_matches, check_probability

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Quadruplet:
    """
    One self-supervised training instance cut from a single image.

    Attributes:
        I_bg (torch.Tensor): Image with the hole zeroed (I * M_bg).
        I_o (torch.Tensor): Hole content with the background zeroed (I * M_o).
        M_o (torch.Tensor): Object support, 1 inside the hole.
        M_bg (torch.Tensor): Background mask, 1 where pixels are kept.
    """

    I_bg: torch.Tensor
    I_o: torch.Tensor
    M_o: torch.Tensor
    M_bg: torch.Tensor


def is_binary(m: torch.Tensor) -> bool:
    """True if every entry is exactly 0 or 1."""
    return bool(((m == 0) | (m == 1)).all())


def validate_mask(m: torch.Tensor) -> torch.Tensor:
    """Return ``m`` if it is a binary mask, otherwise raise ParameterError."""
    if m.dim() not in (2, 3, 4):
        raise ShapeError(f"mask must be (H, W) or (B, 1, H, W), got {tuple(m.shape)}")
    if not is_binary(m):
        raise ParameterError("mask values must be exactly 0 or 1")
    return m


def hole_coverage(m: torch.Tensor) -> float:
    """Fraction of pixels marked for inpainting (value 0)."""
    return float(1.0 - m.float().mean().item())


def _draw_strokes(rng: np.random.Generator, H: int, W: int, params: StrokeParams) -> np.ndarray:
    """Rasterize one random set of strokes; returns a uint8 canvas (255 = keep, 0 = hole)."""
    scale = H / float(params.reference_size)
    canvas = Image.new("L", (W, H), 255)
    draw = ImageDraw.Draw(canvas)

    n_strokes = int(rng.integers(params.min_strokes, params.max_strokes + 1))
    for _ in range(n_strokes):
        n_vertices = int(rng.integers(params.min_vertices, params.max_vertices + 1))
        width = float(rng.uniform(params.min_width, params.max_width)) * scale
        radius = width / 2.0
        x, y = float(rng.uniform(0, W - 1)), float(rng.uniform(0, H - 1))
        angle = float(rng.uniform(0.0, 2.0 * math.pi))
        points = [(x, y)]
        for _ in range(n_vertices - 1):
            angle += float(rng.uniform(-params.max_angle_step, params.max_angle_step))
            length = float(rng.uniform(params.min_length, params.max_length)) * scale
            x = min(max(x + length * math.cos(angle), 0.0), W - 1.0)
            y = min(max(y + length * math.sin(angle), 0.0), H - 1.0)
            points.append((x, y))

        if len(points) > 1:
            draw.line(points, fill=0, width=max(1, int(round(width))))
        # disks at the joints keep the stroke outline smooth
        for px, py in points:
            draw.ellipse([px - radius, py - radius, px + radius, py + radius], fill=0)

    return np.asarray(canvas, dtype=np.uint8)


def generate_freeform(rng: np.random.Generator, H: int, W: int,
                      params: StrokeParams = StrokeParams()) -> torch.Tensor:
    """
    Draw a free-form eraser mask.

    The hole is a union of thick random polylines with disks at every vertex.
    Samples whose hole coverage falls outside
    ``[params.min_coverage, params.max_coverage]`` are rejected and redrawn.
    A stroke count of zero yields the all-ones mask.

    Args:
        rng (np.random.Generator): Random stream.
        H (int): Mask height (>= 8).
        W (int): Mask width (>= 8).
        params (StrokeParams): Stroke and coverage settings.

    Returns:
        torch.Tensor: (H, W) float32 mask of {0, 1}.

    Raises:
        ParameterError: If the size is too small.
        MaskGenerationError: If no sample lands in the coverage band.
    """
    if H < 8 or W < 8:
        raise ParameterError(f"mask size must be at least 8x8, got {H}x{W}")
    if params.max_strokes == 0:
        return torch.ones(H, W, dtype=torch.float32)

    for attempt in range(params.max_retries):
        canvas = _draw_strokes(rng, H, W, params)
        mask = (canvas >= 128).astype(np.float32)
        coverage = 1.0 - float(mask.mean())
        if params.min_coverage <= coverage <= params.max_coverage:
            return torch.from_numpy(mask)
    raise MaskGenerationError(
        f"no mask with coverage in [{params.min_coverage}, {params.max_coverage}] "
        f"after {params.max_retries} attempts at {H}x{W}")


def maybe_full_hole(rng: np.random.Generator, m: torch.Tensor, p: float = 0.25) -> torch.Tensor:
    """With probability ``p`` replace ``m`` by the all-zeros mask (inpaint everything)."""
    p = check_probability(p, "p")
    if rng.random() < p:
        return torch.zeros_like(m)
    return m


def make_quadruplet(I: torch.Tensor, M: torch.Tensor) -> Quadruplet:
    """
    Split an image into background and hole content.

    ``I`` is (C, H, W) with an (H, W) mask, or (B, C, H, W) with a
    (B, 1, H, W) mask.
    """
    check_mask_matches(I, M)
    if I.dim() == 4 and M.dim() == 2:
        M = M.expand(I.shape[0], 1, *M.shape)
    elif I.dim() == 3 and M.dim() != 2:
        raise ShapeError("a single image needs an (H, W) mask")
    M_o = 1.0 - M
    return Quadruplet(I_bg=I * M, I_o=I * M_o, M_o=M_o, M_bg=M)


def downsample_mask(m: torch.Tensor, factor: int) -> torch.Tensor:
    """
    Nearest-neighbour subsample by ``factor`` (a power of two).

    Each output cell takes the top-left pixel of its ``factor`` x ``factor``
    block, so values stay in {0, 1}.
    """
    if not isinstance(factor, int) or factor < 1 or factor & (factor - 1):
        raise ParameterError(f"factor must be a positive power of two, got {factor!r}")
    H, W = m.shape[-2:]
    if H % factor or W % factor:
        raise ParameterError(f"factor {factor} does not divide mask size {H}x{W}")
    if factor == 1:
        return m
    return m[..., ::factor, ::factor].contiguous()
