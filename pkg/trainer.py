"""
Self-supervised training loop.

Each image is cut into background and hole with a random free-form mask.
The model sees the noisy full image, the masked background on its ladder
side, and the tokens of the hole region as context, and learns to predict
the noise (uniform timestep weighting). The context is replaced by the null
conditioning with probability ``p_drop`` so one network serves both the
conditional and the unconditional branch of guidance.

Randomness: every sample of every step draws from its own stream derived
from (seed, step, sample index). Results therefore do not depend on how
many worker threads prepare the batch.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import torch
from tqdm import tqdm

from checkpoint import load_checkpoint, save_checkpoint
from config import RunConfig, StrokeParams, TrainConfig
from dataset import ImageDataset
from denoiser import RefPaintModel, init_params
from diffusion_schedule import NoiseSchedule, forward_sample, schedule_from_config
from embedder import KEEP_ZEROS, fit_pca
from errors import CheckpointError, ConfigurationError, NonFiniteLossError
from mask_engine import generate_freeform, make_quadruplet, maybe_full_hole
from utils import derive_rng, spawn_rngs, worker_count

logger = logging.getLogger(__name__)


@dataclass
class TrainingDraw:
    """
    All random choices for one batch.

    Attributes:
        masks (torch.Tensor): (B, 1, H, W) background masks M_bg.
        t (torch.Tensor): (B,) timesteps.
        eps (torch.Tensor): (B, C, H, W) target noise.
        drop (torch.Tensor): (B,) bool, context replaced by the null conditioning.
    """

    masks: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    drop: torch.Tensor

    def chunk(self, start: int, stop: int) -> "TrainingDraw":
        return TrainingDraw(self.masks[start:stop], self.t[start:stop],
                            self.eps[start:stop], self.drop[start:stop])


@dataclass
class CheckpointHandle:
    """Result of a training run."""

    path: Path
    step: int
    losses: List[float] = field(default_factory=list)


def _draw_one(rng: np.random.Generator, shape: Tuple[int, int, int], T: int,
              cfg: TrainConfig, strokes: StrokeParams):
    C, H, W = shape
    mask = generate_freeform(rng, H, W, strokes)
    mask = maybe_full_hole(rng, mask, cfg.p_full_hole)
    t = int(rng.integers(0, T))
    eps = torch.from_numpy(rng.standard_normal((C, H, W)).astype(np.float32))
    drop = bool(rng.random() < cfg.p_drop)
    return mask, t, eps, drop


def draw_training_inputs(images: torch.Tensor, rng: np.random.Generator, sched: NoiseSchedule,
                         cfg: TrainConfig, strokes: StrokeParams = StrokeParams(),
                         workers: int = 1) -> TrainingDraw:
    """Draw masks, timesteps, noise and dropout flags for a batch."""
    shape = tuple(images.shape[1:])
    streams = spawn_rngs(rng, images.shape[0])
    job = lambda r: _draw_one(r, shape, sched.T, cfg, strokes)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, streams))
    else:
        results = [job(r) for r in streams]
    masks, ts, eps, drops = zip(*results)
    return TrainingDraw(masks=torch.stack(masks).unsqueeze(1),
                        t=torch.tensor(ts, dtype=torch.long),
                        eps=torch.stack(eps),
                        drop=torch.tensor(drops, dtype=torch.bool))


def epsilon_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared noise residual (uniform weighting over timesteps)."""
    return torch.mean((eps_hat - eps) ** 2)


def compute_loss(model: RefPaintModel, images: torch.Tensor, draw: TrainingDraw,
                 sched: NoiseSchedule) -> torch.Tensor:
    """
    Loss for one batch given its random draw.

    The context is the token set of the hole region of the unmasked image
    (under self-supervision the hole content plays the reference object).
    """
    images = images.to(draw.eps.dtype)
    x_t = forward_sample(images, draw.t, draw.eps, sched)
    quad = make_quadruplet(images, draw.masks.to(images.dtype))
    context, _ = model.embedder.masked_encode(images, quad.M_bg, keep=KEEP_ZEROS)
    context = context.with_null(draw.drop)
    eps_hat = model(x_t, draw.t, context, quad.I_bg, quad.M_bg)
    return epsilon_loss(eps_hat, draw.eps)


class Trainer:
    """
    Owns the model, optimizer and accumulation counter.

    ``train_step`` back-propagates one batch; the optimizer update runs on
    every ``grad_accum``-th call, with each batch loss scaled by
    1 / ``grad_accum`` so the update equals one step on the concatenated batch.
    """

    def __init__(self, model: RefPaintModel, sched: NoiseSchedule, cfg: TrainConfig,
                 strokes: StrokeParams = StrokeParams(),
                 loss_fn: Callable[..., torch.Tensor] = compute_loss):
        self.model = model
        self.sched = sched
        self.cfg = cfg
        self.strokes = strokes
        self.loss_fn = loss_fn
        self.optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas),
                                           weight_decay=cfg.weight_decay)
        self.micro_step = 0
        self.workers = worker_count(cfg.num_workers)

    @property
    def updates(self) -> int:
        return self.micro_step // self.cfg.grad_accum

    def train_step(self, images: torch.Tensor, rng: np.random.Generator,
                   draw: Optional[TrainingDraw] = None) -> float:
        """
        One forward/backward pass.

        Returns:
            float: The unscaled batch loss.

        Raises:
            NonFiniteLossError: If the loss is NaN or infinite; nothing is
                accumulated in that case.
        """
        self.model.train()
        if draw is None:
            draw = draw_training_inputs(images, rng, self.sched, self.cfg, self.strokes, self.workers)
        loss = self.loss_fn(self.model, images, draw, self.sched)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(f"non-finite loss {loss.item()} at micro-step {self.micro_step}",
                                     self._diagnostics(loss, draw))
        (loss / self.cfg.grad_accum).backward()
        self.micro_step += 1
        if self.micro_step % self.cfg.grad_accum == 0:
            self.optimizer.step()
            self.optimizer.zero_grad(set_to_none=True)
        return float(loss.item())

    def _diagnostics(self, loss: torch.Tensor, draw: TrainingDraw) -> Dict[str, object]:
        norms = {name: float(p.detach().norm()) for name, p in self.model.named_parameters()}
        bad = sorted(name for name, v in norms.items() if not np.isfinite(v))
        return {
            "micro_step": self.micro_step,
            "loss": float(loss.item()),
            "timesteps": draw.t.tolist(),
            "dropped": draw.drop.tolist(),
            "hole_fraction": (1.0 - draw.masks.flatten(1).mean(1)).tolist(),
            "non_finite_params": bad,
            "max_param_norm": max((v for v in norms.values() if np.isfinite(v)), default=0.0),
        }

    # -- checkpoint state -------------------------------------------------

    def state_tensors(self) -> Dict[str, torch.Tensor]:
        """Optimizer moments and any pending accumulated gradients, keyed by parameter name."""
        out: Dict[str, torch.Tensor] = {}
        for name, param in self.model.named_parameters():
            state = self.optimizer.state.get(param)
            if state:
                out[f"optim/{name}/step"] = torch.as_tensor(state["step"], dtype=torch.float32).reshape(())
                out[f"optim/{name}/exp_avg"] = state["exp_avg"]
                out[f"optim/{name}/exp_avg_sq"] = state["exp_avg_sq"]
            if self.micro_step % self.cfg.grad_accum and param.grad is not None:
                out[f"grad/{name}"] = param.grad
        return out

    def load_state_tensors(self, tensors: Dict[str, torch.Tensor], micro_step: int) -> None:
        for name, param in self.model.named_parameters():
            key = f"optim/{name}/step"
            if key in tensors:
                self.optimizer.state[param] = {
                    "step": tensors[key].clone(),
                    "exp_avg": tensors[f"optim/{name}/exp_avg"].clone(),
                    "exp_avg_sq": tensors[f"optim/{name}/exp_avg_sq"].clone(),
                }
            grad = tensors.get(f"grad/{name}")
            param.grad = grad.clone() if grad is not None else None
        self.micro_step = micro_step


def _write_metric(path: Path, step: int, loss: float) -> None:
    with path.open("a", encoding="utf-8") as f:
        f.write(f"step={step} loss={loss:.6f}\n")


def _embed_corpus(model: RefPaintModel, images: torch.Tensor, batch: int = 64) -> List[np.ndarray]:
    model.eval()
    out: List[np.ndarray] = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch):
            _, emb = model.embedder.encode(images[start:start + batch])
            out.extend(emb.to(torch.float64).numpy())
    return out


def _dump_failure(out_dir: Path, err: NonFiniteLossError, step: int) -> Path:
    dump = out_dir / f"nonfinite_step{step}.json"
    with dump.open("w", encoding="utf-8") as f:
        json.dump({"step": step, **err.state}, f, indent=2)
    return dump


def run_training(dataset: ImageDataset, config: RunConfig) -> CheckpointHandle:
    """
    Train for ``config.train.steps`` steps and write a checkpoint.

    Logs ``step=<int> loss=<float>`` lines to the metrics file every
    ``log_every`` steps, checkpoints every ``checkpoint_every`` steps (0 = only
    at the end) and, with ``fit_pca``, stores a PCA basis of the training
    corpus embeddings in the final checkpoint. Resumes from
    ``config.resume_from`` when set.

    Raises:
        ConfigurationError: If the dataset resolution does not match the model.
        CheckpointError: If a checkpoint cannot be written; earlier
            checkpoints are left intact.
        NonFiniteLossError: If training diverges; a JSON dump of the failing
            step is written next to the metrics file.
    """
    tcfg = config.train
    if len(dataset) == 0:
        raise ConfigurationError("dataset is empty")
    if dataset.resolution != config.model.resolution:
        raise ConfigurationError(
            f"dataset resolution {dataset.resolution} != model resolution {config.model.resolution}")

    with _torch_threading(tcfg.num_workers):
        return _train(dataset, config)


@contextmanager
def _torch_threading(num_workers: int) -> Iterator[None]:
    """Apply the run's thread count and determinism mode, restoring the previous settings on exit."""
    threads = torch.get_num_threads()
    deterministic = torch.are_deterministic_algorithms_enabled()
    if num_workers == 1:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.set_num_threads(worker_count(num_workers))
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(deterministic)


def _train(dataset: ImageDataset, config: RunConfig) -> CheckpointHandle:
    tcfg = config.train
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / config.checkpoint_name
    metrics_path = out_dir / config.metrics_file

    sched = schedule_from_config(config.schedule)
    model = init_params(config.model, seed=tcfg.seed)
    trainer = Trainer(model, sched, tcfg, config.masks)
    start = 0
    if config.resume_from:
        ckpt = load_checkpoint(config.resume_from)
        model.load_state_dict(ckpt.model_tensors())
        trainer.load_state_tensors(ckpt.tensors, int(ckpt.header.get("micro_step", ckpt.step)))
        start = ckpt.step
        logger.info("resumed from %s at step %d", config.resume_from, start)
    else:
        metrics_path.write_text("", encoding="utf-8")

    losses: List[float] = []
    steps = range(start, tcfg.steps)
    if tcfg.progress:
        steps = tqdm(steps, initial=start, total=tcfg.steps, dynamic_ncols=True)
    for step in steps:
        rng = derive_rng(tcfg.seed, step)
        idx = rng.integers(0, len(dataset), size=tcfg.batch)
        try:
            loss = trainer.train_step(dataset.batch(idx.tolist()), rng)
        except NonFiniteLossError as e:
            dump = _dump_failure(out_dir, e, step)
            logger.error("training diverged at step %d; state dumped to %s", step, dump)
            raise
        losses.append(loss)
        done = step + 1
        if done % tcfg.log_every == 0:
            _write_metric(metrics_path, done, loss)
            logger.info("step=%d loss=%.6f", done, loss)
        if tcfg.checkpoint_every and done % tcfg.checkpoint_every == 0 and done < tcfg.steps:
            save_checkpoint(ckpt_path, config, model, done, trainer.state_tensors(),
                            micro_step=trainer.micro_step)

    final_step = max(start, tcfg.steps)
    pca = None
    if tcfg.fit_pca:
        pca = fit_pca(_embed_corpus(model, dataset.images), k=tcfg.pca_rank,
                      variance_target=tcfg.pca_variance)
    try:
        path = save_checkpoint(ckpt_path, config, model, final_step, trainer.state_tensors(),
                               pca=pca, micro_step=trainer.micro_step)
    except CheckpointError:
        logger.error("final checkpoint could not be written; last good checkpoint kept at %s", ckpt_path)
        raise
    return CheckpointHandle(path=path, step=final_step, losses=losses)
