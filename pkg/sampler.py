"""
Reverse-diffusion inpainting.

Per step the noise estimate is a three-way mix of the unconditional branch,
the reference object's semantic component and the background's style
component:

    eps = (1 - omega) * eps(x, null) + omega * gamma * eps(x, c_ref_sem)
          + omega * (1 - gamma) * eps(x, c_bg_sty)

``gamma`` slides between "follow the reference object" (1) and "follow the
background style" (0). After each reverse update the known background is
re-imposed at the matching noise level, and the final image copies the
background pixels exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import torch

from checkpoint import Checkpoint, load_checkpoint
from denoiser import RefPaintModel
from diffusion_schedule import NoiseSchedule, forward_sample, reverse_step
from embedder import KEEP_ONES, PatchTokens, PcaBasis, decompose, null_context
from errors import ConfigurationError, ParameterError
from mask_engine import validate_mask
from utils import as_image_batch, as_mask_batch, check_mask_matches, check_probability, torch_generator

logger = logging.getLogger(__name__)

EmbeddingLike = Union[torch.Tensor, np.ndarray]
Denoiser = Callable[..., torch.Tensor]


@dataclass(frozen=True)
class GuidanceParams:
    """
    Sampling knobs.

    Attributes:
        omega (float): Guidance strength; 0 is the unconditional path.
        gamma (float): Semantic (1) vs style (0) weight.
        eta (float): 0 = deterministic DDIM update, 1 = ancestral DDPM.
        rho (float): Background blending runs while t / T >= rho (0 = every step).
        num_steps (Optional[int]): Reverse steps on an evenly spaced subsequence; None = all T.
    """

    omega: float = 7.5
    gamma: float = 0.5
    eta: float = 0.0
    rho: float = 0.0
    num_steps: Optional[int] = None

    def __post_init__(self):
        if not isinstance(self.omega, (int, float)) or self.omega < 0:
            raise ParameterError(f"omega must be >= 0, got {self.omega!r}")
        check_probability(self.gamma, "gamma")
        check_probability(self.eta, "eta")
        check_probability(self.rho, "rho")
        if self.num_steps is not None and self.num_steps < 1:
            raise ParameterError(f"num_steps must be >= 1, got {self.num_steps}")


def _context(emb: EmbeddingLike, batch: int, like: torch.Tensor) -> PatchTokens:
    e = torch.as_tensor(emb).to(dtype=like.dtype, device=like.device)
    if e.dim() == 1:
        e = e.unsqueeze(0)
    if e.shape[0] == 1 and batch > 1:
        e = e.expand(batch, -1)
    return PatchTokens.from_embedding(e)


def guided_epsilon(model: Denoiser, x_t: torch.Tensor, t: int,
                   c_ref_sem: Optional[EmbeddingLike], c_bg_sty: Optional[EmbeddingLike],
                   side_input: torch.Tensor, m: torch.Tensor, g: GuidanceParams,
                   dim: Optional[int] = None) -> torch.Tensor:
    """
    Disentangled guidance: three forward passes mixed with weights
    (1 - omega), omega * gamma and omega * (1 - gamma).

    Both conditionings None means unconditional sampling and only the null
    branch is evaluated. ``dim`` is the embedding width for the null token
    when it cannot be read off the conditionings.
    """
    B = x_t.shape[0]
    if c_ref_sem is None and c_bg_sty is None:
        if dim is None:
            raise ParameterError("dim is required when both conditionings are None")
        return model(x_t, t, null_context(dim, B, x_t.dtype), side_input, m)

    ref = c_ref_sem if c_ref_sem is not None else torch.zeros_like(torch.as_tensor(c_bg_sty))
    sty = c_bg_sty if c_bg_sty is not None else torch.zeros_like(torch.as_tensor(c_ref_sem))
    ref_ctx = _context(ref, B, x_t)
    sty_ctx = _context(sty, B, x_t)
    null = null_context(ref_ctx.dim, B, x_t.dtype)

    eps_null = model(x_t, t, null, side_input, m)
    eps_ref = model(x_t, t, ref_ctx, side_input, m)
    eps_sty = model(x_t, t, sty_ctx, side_input, m)
    w = float(g.omega)
    return (1.0 - w) * eps_null + (w * g.gamma) * eps_ref + (w * (1.0 - g.gamma)) * eps_sty


def blend_step(x_t: torch.Tensor, I_bg: torch.Tensor, M_bg: torch.Tensor, t: int,
               sched: NoiseSchedule, rng: Optional[torch.Generator] = None,
               eps_bg: Optional[torch.Tensor] = None) -> torch.Tensor:
    """
    Replace the kept region of ``x_t`` with the background noised to level ``t``:
    ``x_t * (1 - M_bg) + (alpha_t * I_bg + sigma_t * eps_bg) * M_bg``.

    ``eps_bg`` is drawn fresh from ``rng`` unless given.
    """
    if eps_bg is None:
        eps_bg = torch.randn(I_bg.shape, generator=rng, dtype=I_bg.dtype, device=I_bg.device)
    noisy_bg = forward_sample(I_bg, t, eps_bg, sched)
    M = M_bg.to(x_t.dtype)
    return x_t * (1.0 - M) + noisy_bg * M


def timestep_sequence(T: int, num_steps: Optional[int] = None) -> List[int]:
    """Descending timesteps from T - 1 to 0; evenly spaced when ``num_steps`` < T."""
    if num_steps is None or num_steps >= T:
        return list(range(T - 1, -1, -1))
    ts = np.unique(np.round(np.linspace(0, T - 1, num_steps)).astype(np.int64))
    return [int(t) for t in ts[::-1]]


@dataclass
class InpaintEngine:
    """Model, schedule and (optional) PCA basis needed to sample."""

    model: RefPaintModel
    sched: NoiseSchedule
    pca: Optional[PcaBasis] = None

    @classmethod
    def from_checkpoint(cls, ckpt: Union[Checkpoint, str, Path]) -> "InpaintEngine":
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt)
        return cls(model=ckpt.build_model(), sched=ckpt.schedule(), pca=ckpt.pca)

    def conditionings(self, I_bg: torch.Tensor, M_bg: torch.Tensor,
                      I_r: torch.Tensor, M_o: torch.Tensor):
        """(c_ref_sem, c_bg_sty) as float64 numpy arrays of shape (B, D)."""
        if self.pca is None:
            raise ConfigurationError("no PCA basis available; run the 'pca' command on the checkpoint first")
        embedder = self.model.embedder
        _, e_ref = embedder.masked_encode(I_r, M_o, keep=KEEP_ONES)
        _, e_bg = embedder.masked_encode(I_bg, M_bg, keep=KEEP_ONES)
        c_ref_sem, _ = decompose(e_ref, self.pca)
        _, c_bg_sty = decompose(e_bg, self.pca)
        return c_ref_sem, c_bg_sty


EngineLike = Union[InpaintEngine, Checkpoint, str, Path]


def _engine(source: EngineLike) -> InpaintEngine:
    return source if isinstance(source, InpaintEngine) else InpaintEngine.from_checkpoint(source)


def inpaint(source: EngineLike, I_bg: torch.Tensor, M_bg: torch.Tensor,
            I_r: Optional[torch.Tensor], M_o: Optional[torch.Tensor],
            g: GuidanceParams = GuidanceParams(), seed: int = 0) -> torch.Tensor:
    """
    Fill the hole of ``I_bg`` (where ``M_bg`` = 0) guided by the object of
    ``I_r`` selected by ``M_o``.

    Args:
        source: An ``InpaintEngine``, a loaded ``Checkpoint`` or a checkpoint path.
        I_bg (torch.Tensor): (C, R, R) or (B, C, R, R) background, values in [-1, 1].
        M_bg (torch.Tensor): Background mask, 1 = keep.
        I_r (Optional[torch.Tensor]): Reference image; None for unconditional inpainting.
        M_o (Optional[torch.Tensor]): Reference object mask, 1 = object.
        g (GuidanceParams): Guidance settings.
        seed (int): Seed of the initial noise and all per-step draws.

    Returns:
        torch.Tensor: Inpainted image(s) in [-1, 1], shaped like ``I_bg``.
        Pixels with ``M_bg`` = 1 equal ``I_bg`` exactly.

    Raises:
        ConfigurationError: If a reference is given and no PCA basis is available.
    """
    engine = _engine(source)
    model, sched = engine.model, engine.sched
    dtype = next(model.parameters()).dtype
    single = I_bg.dim() == 3
    bg = as_image_batch(I_bg).to(dtype)
    check_mask_matches(bg, M_bg)
    M = as_mask_batch(validate_mask(M_bg), bg.shape[0]).to(dtype)

    model.eval()
    with torch.no_grad():
        if I_r is not None:
            if M_o is None:
                M_o = torch.ones(I_r.shape[-2:], dtype=dtype)
            c_ref_sem, c_bg_sty = engine.conditionings(bg, M, as_image_batch(I_r).to(dtype), M_o)
        else:
            c_ref_sem = c_bg_sty = None
            logger.info("inpaint: no reference given, sampling unconditionally")

        gen = torch_generator(seed)
        x = torch.randn(bg.shape, generator=gen, dtype=dtype)
        steps = timestep_sequence(sched.T, g.num_steps)
        for i, t in enumerate(steps):
            t_prev = steps[i + 1] if i + 1 < len(steps) else -1
            eps = guided_epsilon(model, x, t, c_ref_sem, c_bg_sty, bg, M, g, dim=model.cfg.embed_dim)
            x = reverse_step(x, eps, t, sched, eta=g.eta, rng=gen, t_prev=t_prev)
            if t_prev >= 0 and t / sched.T >= g.rho:
                x = blend_step(x, bg, M, t_prev, sched, gen)

    out = torch.where(M > 0.5, bg, x.clamp(-1.0, 1.0))
    return out[0] if single else out


def sweep_gamma(source: EngineLike, I_bg: torch.Tensor, M_bg: torch.Tensor, I_r: torch.Tensor,
                M_o: Optional[torch.Tensor], gammas: Sequence[float],
                g: GuidanceParams = GuidanceParams(), seed: int = 0) -> List[torch.Tensor]:
    """Run ``inpaint`` once per gamma with the same seed (the semantic/style dial)."""
    engine = _engine(source)
    return [inpaint(engine, I_bg, M_bg, I_r, M_o, replace(g, gamma=float(gamma)), seed)
            for gamma in gammas]
