"""
Patch-token image embedder, token masking and PCA semantic/style split.

The embedder is a strided convolution (one token per P x P patch) followed by
two per-token residual MLP blocks. Tokens never mix across patches, so a
token invalidated by masking carries no information from the excluded
region into the surviving ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from config import DenoiserConfig
from errors import ParameterError, ShapeError
from utils import as_image_batch, as_mask_batch, check_mask_matches

logger = logging.getLogger(__name__)

KEEP_ONES = "ones_region"
KEEP_ZEROS = "zeros_region"


@dataclass
class PatchTokens:
    """
    A batch of token sets.

    Attributes:
        tokens (torch.Tensor): (B, N, D) token vectors; invalid rows are zero.
        valid (torch.Tensor): (B, N) float flags, 1 for usable tokens.
        grid (Tuple[int, int]): Patch grid (rows, cols); (1, 1) for global-embedding contexts.
    """

    tokens: torch.Tensor
    valid: torch.Tensor
    grid: Tuple[int, int]

    @property
    def batch(self) -> int:
        return int(self.tokens.shape[0])

    @property
    def dim(self) -> int:
        return int(self.tokens.shape[-1])

    def any_valid(self) -> torch.Tensor:
        """(B,) bool: whether each set has at least one valid token."""
        return self.valid.sum(dim=1) > 0

    def embedding(self) -> torch.Tensor:
        """Global embedding per set: mean of valid tokens, zero if none."""
        count = self.valid.sum(dim=1, keepdim=True)
        total = (self.tokens * self.valid.unsqueeze(-1)).sum(dim=1)
        return total / count.clamp(min=1.0)

    @classmethod
    def from_embedding(cls, emb: torch.Tensor) -> "PatchTokens":
        """Wrap (D,) or (B, D) embeddings as single-token contexts."""
        if emb.dim() == 1:
            emb = emb.unsqueeze(0)
        if emb.dim() != 2:
            raise ShapeError(f"embedding must be (D,) or (B, D), got {tuple(emb.shape)}")
        return cls(tokens=emb.unsqueeze(1),
                   valid=torch.ones(emb.shape[0], 1, dtype=emb.dtype, device=emb.device),
                   grid=(1, 1))

    def with_null(self, drop: torch.Tensor) -> "PatchTokens":
        """
        Replace the sets flagged in ``drop`` (B,) by the null conditioning.

        A dropped set keeps exactly one valid token and that token is zero,
        which is the same context as ``null_context``.
        """
        keep = (~drop.bool()).to(self.tokens.dtype)
        tokens = self.tokens * keep.view(-1, 1, 1)
        first = torch.zeros_like(self.valid)
        first[:, 0] = 1.0
        valid = self.valid * keep.view(-1, 1) + first * (1.0 - keep).view(-1, 1)
        return PatchTokens(tokens=tokens, valid=valid, grid=self.grid)


def null_embedding(dim: int, batch: Optional[int] = None, dtype=torch.float32) -> torch.Tensor:
    """The unconditional embedding: the zero vector."""
    shape = (dim,) if batch is None else (batch, dim)
    return torch.zeros(shape, dtype=dtype)


def null_context(dim: int, batch: int = 1, dtype=torch.float32) -> PatchTokens:
    """Single zero token per set."""
    return PatchTokens.from_embedding(null_embedding(dim, batch, dtype))


class TokenBlock(nn.Module):
    """Per-token residual MLP: x + W2 silu(W1 norm(x))."""

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, dim * 2)
        self.fc2 = nn.Linear(dim * 2, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.fc2(F.silu(self.fc1(self.norm(x))))


class PatchEmbedder(nn.Module):
    """
    Stand-in image encoder producing patch tokens and a global embedding.

    Trained jointly with the denoiser; it has no pre-training of its own.
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.resolution = cfg.resolution
        self.patch_size = cfg.patch_size
        self.dim = cfg.embed_dim
        self.threshold = cfg.token_threshold
        self.patchify = nn.Conv2d(cfg.image_channels, cfg.embed_dim,
                                  kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.blocks = nn.ModuleList([TokenBlock(cfg.embed_dim) for _ in range(2)])

    @property
    def grid(self) -> Tuple[int, int]:
        side = self.resolution // self.patch_size
        return side, side

    def _tokens(self, images: torch.Tensor) -> torch.Tensor:
        if tuple(images.shape[-2:]) != (self.resolution, self.resolution):
            raise ShapeError(
                f"embedder expects {self.resolution}x{self.resolution} images, got {tuple(images.shape[-2:])}")
        x = self.patchify(images)                  # (B, D, rows, cols)
        x = x.flatten(2).transpose(1, 2)           # (B, N, D), row-major patches
        for block in self.blocks:
            x = block(x)
        return x

    def encode(self, image: torch.Tensor) -> Tuple[PatchTokens, torch.Tensor]:
        """
        Encode (C, H, W) or (B, C, H, W) images.

        Returns:
            Tuple[PatchTokens, torch.Tensor]: all-valid tokens and the (B, D)
            global embedding (mean of tokens).
        """
        images = as_image_batch(image)
        tokens = self._tokens(images)
        valid = torch.ones(tokens.shape[:2], dtype=tokens.dtype, device=tokens.device)
        pt = PatchTokens(tokens=tokens, valid=valid, grid=self.grid)
        return pt, pt.embedding()

    def token_validity(self, mask: torch.Tensor, keep: str) -> torch.Tensor:
        """
        (B, N) validity flags for a (B, 1, H, W) mask.

        A token is invalid when the excluded share of its patch exceeds the
        threshold.
        """
        if keep == KEEP_ONES:
            excluded = (mask == 0)
        elif keep == KEEP_ZEROS:
            excluded = (mask == 1)
        else:
            raise ParameterError(f"keep must be {KEEP_ONES!r} or {KEEP_ZEROS!r}, got {keep!r}")
        overlap = F.avg_pool2d(excluded.to(torch.float64), self.patch_size)
        return (overlap <= self.threshold).flatten(1)

    def masked_encode(self, image: torch.Tensor, mask: torch.Tensor,
                      keep: str = KEEP_ONES) -> Tuple[PatchTokens, torch.Tensor]:
        """
        Encode the full, unmasked image and invalidate tokens in the excluded region.

        Args:
            image (torch.Tensor): (C, H, W) or (B, C, H, W).
            mask (torch.Tensor): (H, W) or (B, 1, H, W) binary mask.
            keep (str): Which mask value marks the region whose tokens survive.

        Returns:
            Tuple[PatchTokens, torch.Tensor]: surviving tokens and the mean of
            the surviving tokens (zero where nothing survives).
        """
        images = as_image_batch(image)
        check_mask_matches(images, mask)
        mask = as_mask_batch(mask, images.shape[0])
        pt, _ = self.encode(images)
        valid = self.token_validity(mask, keep).to(pt.tokens.dtype)
        pt = PatchTokens(tokens=pt.tokens * valid.unsqueeze(-1), valid=valid, grid=pt.grid)
        empty = int((~pt.any_valid()).sum())
        if empty:
            logger.warning("masked_encode: %d of %d images have no valid tokens; using zero embedding",
                           empty, pt.batch)
        return pt, pt.embedding()


# ---------------------------------------------------------------------------
# PCA split of embeddings
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PcaBasis:
    """
    Principal subspace of an embedding corpus (float64).

    Attributes:
        mean (np.ndarray): (D,) corpus mean.
        components (np.ndarray): (k, D) orthonormal rows, largest variance first.
        explained (np.ndarray): (k,) fraction of total variance per component.
    """

    mean: np.ndarray
    components: np.ndarray
    explained: np.ndarray

    @property
    def k(self) -> int:
        return int(self.components.shape[0])

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])


EmbeddingLike = Union[np.ndarray, torch.Tensor, Sequence[float]]


def _as_float64(e: EmbeddingLike) -> np.ndarray:
    if isinstance(e, torch.Tensor):
        return e.detach().cpu().to(torch.float64).numpy()
    return np.asarray(e, dtype=np.float64)


def _sign_normalize(vectors: np.ndarray) -> np.ndarray:
    """Flip each row so its largest-magnitude entry is positive (first index wins ties)."""
    out = vectors.copy()
    for i, v in enumerate(out):
        j = int(np.argmax(np.abs(v)))
        if v[j] < 0:
            out[i] = -v
    return out


def fit_pca(corpus: Sequence[EmbeddingLike], k: Optional[int] = None,
            variance_target: float = 0.9) -> PcaBasis:
    """
    Fit a PCA basis to a list of embeddings.

    Components are the top-k eigenvectors of the mean-centred covariance,
    sign-normalized. When ``k`` is None the smallest rank whose cumulative
    explained variance reaches ``variance_target`` is used. A rank-deficient
    corpus still yields k components; the extra ones span the null space.

    Raises:
        ParameterError: If the corpus is smaller than k or k exceeds the dimension.
    """
    if len(corpus) < 1:
        raise ParameterError("corpus must contain at least one embedding")
    X = np.stack([_as_float64(e).reshape(-1) for e in corpus])
    n, D = X.shape
    if k is not None and not 1 <= k <= min(n, D):
        raise ParameterError(f"k must satisfy 1 <= k <= min(corpus size, dim) = {min(n, D)}, got {k}")

    mean = X.mean(axis=0)
    centered = X - mean
    cov = centered.T @ centered / n
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(-eigvals, kind="stable")
    eigvals = np.clip(eigvals[order], 0.0, None)
    eigvecs = eigvecs[:, order].T

    total = float(eigvals.sum())
    ratios = eigvals / total if total > 0 else np.zeros_like(eigvals)
    if k is None:
        cumulative = np.cumsum(ratios)
        k = int(np.searchsorted(cumulative, variance_target - 1e-12) + 1) if total > 0 else 1
        k = min(max(k, 1), min(n, D))

    components = _sign_normalize(eigvecs[:k])
    logger.info("fit_pca: n=%d dim=%d k=%d explained=%.4f", n, D, k, float(ratios[:k].sum()))
    return PcaBasis(mean=mean, components=components, explained=ratios[:k].copy())


def decompose(e: EmbeddingLike, basis: PcaBasis) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split an embedding into semantic and style parts.

    ``c_sem`` is the mean plus the projection onto the principal subspace;
    ``c_sty`` is the residual plus the mean, so that
    ``c_sem + c_sty - mean == e``.
    """
    v = _as_float64(e)
    if v.shape[-1] != basis.dim:
        raise ShapeError(f"embedding dim {v.shape[-1]} does not match basis dim {basis.dim}")
    centered = v - basis.mean
    projection = (centered @ basis.components.T) @ basis.components
    c_sem = basis.mean + projection
    c_sty = v - c_sem + basis.mean
    return c_sem, c_sty
