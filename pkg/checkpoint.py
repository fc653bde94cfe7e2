"""
Checkpoint container for RefPaint.

Binary layout (all integers little-endian)::

    b"RFPT"                      magic
    uint32  format version
    uint64  header length, then that many bytes of UTF-8 JSON
    uint64  record count, then per record:
        uint32  name length, name (UTF-8)
        uint32  rank
        int64   dims[rank]
        float32 data (row-major)

The JSON header is written with sorted keys and no whitespace, so
save -> load -> save reproduces the file byte for byte.

Tensor names: model weights use their ``state_dict`` keys; optimizer state
lives under ``optim/``, pending accumulated gradients under ``grad/`` and
the PCA basis under ``pca/``.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

import numpy as np
import torch

from config import RunConfig
from diffusion_schedule import NoiseSchedule, schedule_from_config
from denoiser import RefPaintModel
from embedder import PcaBasis
from errors import CheckpointError, ConfigurationError

logger = logging.getLogger(__name__)

MAGIC = b"RFPT"
FORMAT_VERSION = 1
RESERVED_PREFIXES = ("optim/", "grad/", "pca/")


class CheckpointStore:
    """
    Reads and writes one checkpoint file.

    Writes go to a temporary sibling and are renamed into place, so a failed
    write leaves the previous checkpoint untouched.
    """

    def __init__(self, file_path: str | Path):
        self.file_path = Path(file_path)

    def save(self, header: Dict[str, Any], tensors: Dict[str, torch.Tensor]) -> Path:
        payload = encode_container(header, tensors)
        tmp = self.file_path.with_name(self.file_path.name + ".tmp")
        try:
            self.file_path.parent.mkdir(parents=True, exist_ok=True)
            with tmp.open("wb") as f:
                f.write(payload)
            os.replace(tmp, self.file_path)
        except OSError as e:
            if tmp.exists():
                try:
                    tmp.unlink()
                except OSError:
                    logger.warning("could not remove partial checkpoint %s", tmp)
            raise CheckpointError(f"failed to write checkpoint {self.file_path}: {e}") from e
        logger.info("checkpoint saved to %s (%d tensors)", self.file_path, len(tensors))
        return self.file_path

    def load(self) -> Tuple[Dict[str, Any], "OrderedDict[str, torch.Tensor]"]:
        if not self.file_path.exists():
            raise FileNotFoundError(f"checkpoint not found: {self.file_path}")
        try:
            data = self.file_path.read_bytes()
        except OSError as e:
            raise CheckpointError(f"failed to read checkpoint {self.file_path}: {e}") from e
        return decode_container(data, source=str(self.file_path))


def encode_container(header: Dict[str, Any], tensors: Dict[str, torch.Tensor]) -> bytes:
    """Serialize a header and an ordered tensor table."""
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(head)), head,
             struct.pack("<Q", len(tensors))]
    for name, tensor in tensors.items():
        raw_name = name.encode("utf-8")
        arr = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}q", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes(order="C"))
    return b"".join(parts)


def decode_container(data: bytes, source: str = "<bytes>"):
    """Inverse of ``encode_container``."""
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"{source}: truncated checkpoint")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError(f"{source}: not a RefPaint checkpoint (bad magic)")
    (version,) = struct.unpack("<I", take(4))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")
    (head_len,) = struct.unpack("<Q", take(8))
    try:
        header = json.loads(bytes(take(head_len)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupt header: {e}") from e

    (count,) = struct.unpack("<Q", take(8))
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}q", take(8 * rank)) if rank else ()
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(bytes(take(4 * n)), dtype="<f4").reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
    if pos != len(view):
        raise CheckpointError(f"{source}: {len(view) - pos} trailing bytes")
    return header, tensors


# ---------------------------------------------------------------------------
# Typed view
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    """A loaded checkpoint: JSON header plus tensor table."""

    header: Dict[str, Any]
    tensors: "OrderedDict[str, torch.Tensor]"

    @property
    def run_config(self) -> RunConfig:
        try:
            return RunConfig.from_dict(self.header["config"])
        except KeyError as e:
            raise ConfigurationError("checkpoint header has no config") from e

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))

    def model_tensors(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, v) for k, v in self.tensors.items() if not k.startswith(RESERVED_PREFIXES))

    def build_model(self) -> RefPaintModel:
        model = RefPaintModel(self.run_config.model)
        try:
            model.load_state_dict(self.model_tensors(), strict=True)
        except RuntimeError as e:
            raise ConfigurationError(f"checkpoint tensors do not match its model config: {e}") from e
        model.eval()
        return model

    def schedule(self) -> NoiseSchedule:
        return schedule_from_config(self.run_config.schedule)

    @property
    def pca(self) -> Optional[PcaBasis]:
        if "pca/mean" not in self.tensors:
            return None
        return PcaBasis(mean=self.tensors["pca/mean"].to(torch.float64).numpy(),
                        components=self.tensors["pca/components"].to(torch.float64).numpy(),
                        explained=self.tensors["pca/explained"].to(torch.float64).numpy())

    def require_pca(self) -> PcaBasis:
        basis = self.pca
        if basis is None:
            raise ConfigurationError("checkpoint has no PCA basis; run the 'pca' command first")
        return basis


def pca_tensors(basis: PcaBasis) -> Dict[str, torch.Tensor]:
    return {
        "pca/mean": torch.from_numpy(np.asarray(basis.mean)),
        "pca/components": torch.from_numpy(np.asarray(basis.components)),
        "pca/explained": torch.from_numpy(np.asarray(basis.explained)),
    }


def build_header(run_config: RunConfig, step: int, pca: Optional[PcaBasis] = None,
                 micro_step: int = 0) -> Dict[str, Any]:
    return {
        "config": run_config.to_dict(),
        "step": int(step),
        "micro_step": int(micro_step),
        "pca": None if pca is None else {"k": pca.k, "dim": pca.dim},
    }


def save_checkpoint(path: str | Path, run_config: RunConfig, model: RefPaintModel, step: int = 0,
                    extra: Optional[Dict[str, torch.Tensor]] = None,
                    pca: Optional[PcaBasis] = None, micro_step: int = 0) -> Path:
    """Write model weights plus optional optimizer/gradient/PCA tensors."""
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict(model.state_dict())
    for name, tensor in (extra or {}).items():
        tensors[name] = tensor
    if pca is not None:
        tensors.update(pca_tensors(pca))
    return CheckpointStore(path).save(build_header(run_config, step, pca, micro_step), tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, tensors = CheckpointStore(path).load()
    return Checkpoint(header=header, tensors=tensors)


def store_pca(source: str | Path, basis: PcaBasis, target: Optional[str | Path] = None) -> Path:
    """Copy a checkpoint with its PCA basis replaced."""
    ckpt = load_checkpoint(source)
    tensors = OrderedDict((k, v) for k, v in ckpt.tensors.items() if not k.startswith("pca/"))
    tensors.update(pca_tensors(basis))
    header = dict(ckpt.header)
    header["pca"] = {"k": basis.k, "dim": basis.dim}
    return CheckpointStore(target or source).save(header, tensors)
