"""Small shared helpers: shape checks, mask layout, RNG streams, thread caps."""

import os
from typing import Sequence, Union

import numpy as np
import torch

from errors import ParameterError, ShapeError

THREADS_ENV = "REFPAINT_THREADS"


def check_same_shape(a: torch.Tensor, b: torch.Tensor, what: str = "tensors") -> None:
    """Raise ShapeError unless ``a`` and ``b`` have identical shapes."""
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeError(f"{what} must have the same shape, got {tuple(a.shape)} and {tuple(b.shape)}")


def check_probability(value: float, name: str) -> float:
    """Return ``value`` as float if it lies in [0, 1]."""
    if not isinstance(value, (int, float)) or not 0.0 <= float(value) <= 1.0:
        raise ParameterError(f"{name} must be in [0, 1], got {value!r}")
    return float(value)


def as_image_batch(image: torch.Tensor) -> torch.Tensor:
    """View a (C, H, W) image as (1, C, H, W); batched input passes through."""
    if image.dim() == 3:
        return image.unsqueeze(0)
    if image.dim() == 4:
        return image
    raise ShapeError(f"image must be (C, H, W) or (B, C, H, W), got {tuple(image.shape)}")


def as_mask_batch(mask: torch.Tensor, batch: int = 1) -> torch.Tensor:
    """
    Bring a mask to (B, 1, H, W).

    Accepts (H, W), (1, H, W), (B, 1, H, W). A single mask is broadcast to
    ``batch`` entries.
    """
    if mask.dim() == 2:
        mask = mask.unsqueeze(0).unsqueeze(0)
    elif mask.dim() == 3:
        mask = mask.unsqueeze(1)
    elif mask.dim() != 4 or mask.shape[1] != 1:
        raise ShapeError(f"mask must be (H, W) or (B, 1, H, W), got {tuple(mask.shape)}")
    if mask.shape[0] == 1 and batch > 1:
        mask = mask.expand(batch, -1, -1, -1)
    elif mask.shape[0] != batch:
        raise ShapeError(f"mask batch {mask.shape[0]} does not match image batch {batch}")
    return mask


def check_mask_matches(image: torch.Tensor, mask: torch.Tensor) -> None:
    """Spatial size of ``mask`` must equal that of ``image``."""
    if tuple(image.shape[-2:]) != tuple(mask.shape[-2:]):
        raise ShapeError(
            f"mask size {tuple(mask.shape[-2:])} does not match image size {tuple(image.shape[-2:])}")


def derive_rng(*keys: int) -> np.random.Generator:
    """Deterministic generator from an integer key tuple, e.g. (seed, worker, step)."""
    return np.random.default_rng([int(k) & 0xFFFFFFFF for k in keys])


def spawn_rngs(rng: np.random.Generator, n: int) -> Sequence[np.random.Generator]:
    """Split ``rng`` into ``n`` independent child streams (order-stable)."""
    seeds = rng.integers(0, 2 ** 63 - 1, size=n, dtype=np.int64)
    return [np.random.default_rng(int(s)) for s in seeds]


def torch_generator(seed: Union[int, np.random.Generator]) -> torch.Generator:
    """CPU torch generator seeded from an int or drawn from a numpy stream."""
    if isinstance(seed, np.random.Generator):
        seed = int(seed.integers(0, 2 ** 62))
    gen = torch.Generator(device="cpu")
    gen.manual_seed(int(seed))
    return gen


def worker_count(requested: int = 0) -> int:
    """
    Number of worker threads to use.

    ``requested`` <= 0 means "as many as the machine has". The
    REFPAINT_THREADS environment variable caps the result.
    """
    count = requested if requested > 0 else (os.cpu_count() or 1)
    cap = os.environ.get(THREADS_ENV, "").strip()
    if cap:
        try:
            count = min(count, max(1, int(cap)))
        except ValueError:
            raise ParameterError(f"{THREADS_ENV} must be an integer, got {cap!r}")
    return max(1, count)
