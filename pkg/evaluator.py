"""
Copy-paste baseline and embedding-distance metrics.

Distances are ``1 - cosine`` between global embeddings of the model's own
patch embedder, so they lie in [0, 2].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import torch
import torch.nn.functional as F

from checkpoint import Checkpoint
from denoiser import RefPaintModel
from embedder import PatchEmbedder
from errors import DegenerateInputError, ShapeError
from image_io import load_image_tensor, load_mask, read_manifest, write_table_csv
from utils import check_mask_matches, check_same_shape

logger = logging.getLogger(__name__)

Encoder = Union[RefPaintModel, PatchEmbedder, Checkpoint, Callable[[torch.Tensor], torch.Tensor]]
REPORT_COLUMNS = ("name", "dist_original", "dist_cp_object")


def _bbox(region: torch.Tensor, what: str) -> Tuple[int, int, int, int]:
    """(top, left, bottom, right) of the True entries, bottom/right exclusive."""
    rows = torch.nonzero(region.any(dim=1)).flatten()
    cols = torch.nonzero(region.any(dim=0)).flatten()
    if rows.numel() == 0:
        raise DegenerateInputError(f"{what} is empty")
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def _plane(mask: torch.Tensor) -> torch.Tensor:
    """(H, W) view of a single mask given as (H, W), (1, H, W) or (1, 1, H, W)."""
    while mask.dim() > 2:
        if mask.shape[0] != 1:
            raise ShapeError(f"expected a single mask, got {tuple(mask.shape)}")
        mask = mask[0]
    return mask


def copy_paste(I_bg: torch.Tensor, M_bg: torch.Tensor, I_r: torch.Tensor, M_o: torch.Tensor) -> torch.Tensor:
    """
    Paste the reference object straight into the hole.

    The object (``I_r`` where ``M_o`` = 1, zero elsewhere) is cropped to its
    bounding box, resized nearest-neighbour to the hole's bounding box and
    composited: ``I_bg`` where ``M_bg`` = 1, pasted pixels elsewhere.

    Raises:
        DegenerateInputError: If there is a hole but the object mask is empty.
    """
    check_same_shape(I_bg, I_r, "background and reference")
    m_bg, m_o = _plane(M_bg), _plane(M_o)
    check_mask_matches(I_bg, m_bg)
    check_mask_matches(I_r, m_o)
    hole = m_bg == 0
    if not bool(hole.any()):
        logger.debug("copy_paste: no hole, returning the background")
        return I_bg.clone()

    top, left, bottom, right = _bbox(hole, "hole")
    o_top, o_left, o_bottom, o_right = _bbox(m_o == 1, "object mask")
    obj = (I_r * m_o.to(I_r.dtype))[:, o_top:o_bottom, o_left:o_right]
    obj = F.interpolate(obj.unsqueeze(0), size=(bottom - top, right - left), mode="nearest")[0]

    canvas = torch.zeros_like(I_bg)
    canvas[:, top:bottom, left:right] = obj
    return torch.where(hole.unsqueeze(0), canvas, I_bg)


def _embed(encoder: Encoder, x: torch.Tensor) -> torch.Tensor:
    if isinstance(encoder, Checkpoint):
        encoder = encoder.build_model()
    if isinstance(encoder, RefPaintModel):
        encoder = encoder.embedder
    batch = x.unsqueeze(0) if x.dim() == 3 else x
    with torch.no_grad():
        if isinstance(encoder, PatchEmbedder):
            dtype = next(encoder.parameters()).dtype
            _, emb = encoder.encode(batch.to(dtype))
        else:
            emb = encoder(batch)
    return emb.reshape(-1).to(torch.float64)


def cosine_distance(e_a: torch.Tensor, e_b: torch.Tensor) -> float:
    """``1 - cos(e_a, e_b)``; exactly 0 for identical vectors, 1 when one of two different vectors is zero."""
    if torch.equal(e_a, e_b):
        return 0.0
    na, nb = torch.linalg.norm(e_a), torch.linalg.norm(e_b)
    if float(na) == 0.0 or float(nb) == 0.0:
        return 1.0
    cos = float(torch.dot(e_a, e_b) / (na * nb))
    return min(2.0, max(0.0, 1.0 - cos))


def embed_distance(a: torch.Tensor, b: torch.Tensor, encoder: Encoder) -> float:
    """
    Embedding distance between two images of the same size.

    ``encoder`` is a model, its patch embedder, a checkpoint, or any callable
    mapping a (1, C, H, W) batch to a (1, D) embedding.
    """
    check_same_shape(a, b, "images")
    return cosine_distance(_embed(encoder, a), _embed(encoder, b))


@dataclass
class EvalRow:
    name: str
    dist_original: float
    dist_cp_object: float

    def as_dict(self) -> Dict[str, object]:
        return {"name": self.name, "dist_original": f"{self.dist_original:.6f}",
                "dist_cp_object": f"{self.dist_cp_object:.6f}"}


@dataclass
class EvalReport:
    """Per-image distances and their corpus means."""

    rows: List[EvalRow] = field(default_factory=list)

    @property
    def dist_original(self) -> float:
        return sum(r.dist_original for r in self.rows) / len(self.rows) if self.rows else float("nan")

    @property
    def dist_cp_object(self) -> float:
        return sum(r.dist_cp_object for r in self.rows) / len(self.rows) if self.rows else float("nan")

    def extend(self, other: "EvalReport") -> None:
        self.rows.extend(other.rows)

    def table(self) -> List[Dict[str, object]]:
        out = [r.as_dict() for r in self.rows]
        out.append(EvalRow("mean", self.dist_original, self.dist_cp_object).as_dict())
        return out

    def write_csv(self, path: Union[str, Path]) -> Path:
        return write_table_csv(self.table(), REPORT_COLUMNS, path)


def _resolution(encoder: Encoder, fallback: int) -> int:
    if isinstance(encoder, Checkpoint):
        return encoder.run_config.model.resolution
    if isinstance(encoder, RefPaintModel):
        return encoder.cfg.resolution
    if isinstance(encoder, PatchEmbedder):
        return encoder.resolution
    return fallback


def _crop_resized(x: torch.Tensor, box: Tuple[int, int, int, int], size: int) -> torch.Tensor:
    top, left, bottom, right = box
    crop = x[:, top:bottom, left:right].unsqueeze(0)
    return F.interpolate(crop, size=(size, size), mode="bilinear", align_corners=False)[0]


def eval_pair(output: torch.Tensor, original: torch.Tensor, cp_result: torch.Tensor,
              M_bg: torch.Tensor, encoder: Encoder, name: str = "") -> EvalReport:
    """
    Distance of the output to the original artwork, and of its hole region to
    the copy-paste result's hole region (bounding-box crops resized to the
    model resolution).

    Raises:
        DegenerateInputError: If ``M_bg`` has no hole.
    """
    check_same_shape(output, original, "output and original")
    check_same_shape(output, cp_result, "output and copy-paste result")
    m = _plane(M_bg)
    check_mask_matches(output, m)
    box = _bbox(m == 0, "hole")
    size = _resolution(encoder, int(output.shape[-1]))
    if isinstance(encoder, Checkpoint):
        encoder = encoder.build_model()
    d_orig = embed_distance(output, original, encoder)
    d_obj = embed_distance(_crop_resized(output, box, size), _crop_resized(cp_result, box, size), encoder)
    return EvalReport([EvalRow(name, d_orig, d_obj)])


def hole_mse(output: torch.Tensor, target: torch.Tensor, M_bg: torch.Tensor) -> float:
    """Mean squared error over hole pixels (all channels)."""
    check_same_shape(output, target, "output and target")
    hole = (_plane(M_bg) == 0).to(output.dtype)
    count = float(hole.sum()) * output.shape[0]
    if count == 0:
        raise DegenerateInputError("hole is empty")
    return float((((output - target) ** 2) * hole).sum() / count)


def evaluate_manifest(manifest: Union[str, Path], encoder: Encoder, resolution: Optional[int] = None,
                      out_csv: Optional[Union[str, Path]] = None) -> EvalReport:
    """
    Run ``eval_pair`` for every row of a CSV manifest (columns
    output, original, cp, mask). Rows whose files cannot be read or whose
    mask has no hole are skipped with a warning.

    Raises:
        DegenerateInputError: If no row could be evaluated.
    """
    if isinstance(encoder, Checkpoint):
        resolution = resolution or encoder.run_config.model.resolution
        encoder = encoder.build_model()
    resolution = resolution or _resolution(encoder, 0) or None
    report = EvalReport()
    for row in read_manifest(manifest):
        name = Path(row["output"]).name
        try:
            if resolution is None:
                resolution = load_mask(row["mask"]).shape[-1]
            images = [load_image_tensor(row[k], resolution) for k in ("output", "original", "cp")]
            mask = load_mask(row["mask"], resolution)
            report.extend(eval_pair(*images, mask, encoder, name=name))
        except (OSError, DegenerateInputError) as e:
            logger.warning("evaluate_manifest: skipping %s: %s", name, e)
    if not report.rows:
        raise DegenerateInputError(f"no evaluable rows in {manifest}")
    logger.info("evaluated %d rows: dist_original=%.4f dist_cp_object=%.4f",
                len(report.rows), report.dist_original, report.dist_cp_object)
    if out_csv is not None:
        report.write_csv(out_csv)
    return report
