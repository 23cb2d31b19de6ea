"""SGD training of the rectification model with a poly schedule, plus checkpoints."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
import torch

from .backbone import DEFAULT_TEMPLATES, FrozenEncoder, ToyEncoder, ToyEncoderSpec
from .core import ClassVocabulary, ImageRecord, RngStreams, RunConfig
from .hypothesis import HypothesisCache, LabelHypothesis
from .loss import contrastive_loss, cosine_similarities, masked_pool
from .model import RectificationModel
from .rectify import gumbel_mask, sample_gumbel

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "reclip-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(FloatingPointError):
    pass


def lr_at(iteration: int, max_iters: int, base_lr: float, power: float = 0.9) -> float:
    """Poly schedule ``base_lr * (1 - iteration / max_iters) ** power``."""
    if max_iters <= 0:
        raise ValueError("max_iters must be positive for the poly schedule")
    if not 0 <= iteration <= max_iters:
        raise ValueError(f"iteration {iteration} outside [0, {max_iters}]")
    return base_lr * (1.0 - iteration / max_iters) ** power


def augment(image: ImageRecord, rng: np.random.Generator, crop_size: Optional[int],
            flip_prob: float) -> ImageRecord:
    """Random crop to ``crop_size`` (if smaller than the image) and random horizontal flip."""
    px = image.pixels
    H, W = px.shape[:2]
    if crop_size is not None and (crop_size < H or crop_size < W):
        ch, cw = min(crop_size, H), min(crop_size, W)
        top = int(rng.integers(0, H - ch + 1))
        left = int(rng.integers(0, W - cw + 1))
        px = px[top : top + ch, left : left + cw]
    if rng.random() < flip_prob:
        px = px[:, ::-1]
    return ImageRecord(image.id, np.ascontiguousarray(px))


@dataclass
class TrainState:
    model: RectificationModel
    optimizer: torch.optim.Optimizer
    config: RunConfig
    rngs: RngStreams
    iteration: int = 0
    history: List[tuple] = field(default_factory=list)
    hypotheses: HypothesisCache = field(default_factory=HypothesisCache)
    order: Optional[np.ndarray] = None
    cursor: int = 0

    @classmethod
    def create(cls, vocab: ClassVocabulary, encoder: FrozenEncoder, config: RunConfig,
               templates: Sequence[str] = DEFAULT_TEMPLATES, dtype=torch.float32) -> "TrainState":
        rngs = RngStreams(config.seed)
        model = RectificationModel(vocab, encoder, config, templates, rngs, dtype)
        opt = torch.optim.SGD(model.decay_groups(), lr=config.lr, momentum=config.momentum)
        return cls(model, opt, config, rngs)

    def hypothesis(self, image: ImageRecord) -> LabelHypothesis:
        cfg = self.config
        return self.hypotheses.get(image, self.model.encoder, self.model.query,
                                   cfg.crop_ratio, cfg.freq_threshold)


def _batch_loss(state: TrainState, batch: Sequence[ImageRecord]):
    cfg, model = state.config, state.model
    dtype = model.projection.linear.weight.dtype
    hyps = [state.hypothesis(im) for im in batch]
    views = [augment(im, state.rngs["augment"], cfg.crop_size, cfg.flip_prob) for im in batch]
    maps = [model.encoder.encode_image_patches(v) for v in views]
    grids = {fm.grid for fm in maps}
    if len(grids) != 1:
        raise ValueError("batch images have different patch grids; set crop_size")
    grid = maps[0].grid
    Z = torch.stack([fm.Z for fm in maps]).to(dtype)
    out = model(Z, grid)
    noise = sample_gumbel(out["M_o"].shape, state.rngs["gumbel"], dtype)
    masks = gumbel_mask(out["M_o"], cfg.tau_gumbel, cfg.gumbel_hard, noise=noise)
    losses = []
    for b, im in enumerate(batch):
        pooled = masked_pool(Z[b], masks[b], hard=cfg.gumbel_hard)
        S = cosine_similarities(pooled.Z_g, out["W_q"])
        li = contrastive_loss(S, hyps[b], cfg.tau_contrastive)
        if not torch.isfinite(li):
            raise TrainingDiverged(
                f"non-finite loss {float(li.detach())} on image {im.id!r} at iteration {state.iteration}"
            )
        losses.append(li)
    return torch.stack(losses).mean()


def train_step(batch: Sequence[ImageRecord], state: TrainState) -> float:
    """One SGD update on ``batch``; returns the batch-mean loss."""
    cfg = state.config
    batch = sorted(batch, key=lambda im: im.id)
    lr = lr_at(state.iteration, cfg.max_iters, cfg.lr, cfg.poly_power)
    for g in state.optimizer.param_groups:
        g["lr"] = lr
    state.model.train()
    loss = _batch_loss(state, batch)
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if lr > 0:
        state.optimizer.step()
    state.iteration += 1
    value = float(loss.detach())
    state.history.append((state.iteration, lr, value))
    return value


def _next_batch(state: TrainState, dataset: Sequence[ImageRecord]) -> List[ImageRecord]:
    bs = min(state.config.batch_size, len(dataset))
    out = []
    while len(out) < bs:
        if state.order is None or state.cursor >= len(state.order):
            state.order = state.rngs["data-order"].permutation(len(dataset))
            state.cursor = 0
        out.append(dataset[int(state.order[state.cursor])])
        state.cursor += 1
    return out


def format_loss_line(iteration: int, lr: float, loss: float) -> str:
    return f"{iteration}\t{lr!r}\t{loss!r}"


def fit(dataset: Sequence[ImageRecord], state: TrainState,
        checkpoint_path: Optional[Path] = None,
        on_step: Optional[Callable[[int, float, float], None]] = None) -> TrainState:
    """Run training until ``config.max_iters``; resumes from ``state.iteration``."""
    if len(dataset) == 0:
        raise ValueError("cannot fit on an empty dataset")
    cfg = state.config
    for im in dataset:
        state.hypothesis(im)
    while state.iteration < cfg.max_iters:
        loss = train_step(_next_batch(state, dataset), state)
        it, lr, _ = state.history[-1]
        if on_step is not None:
            on_step(it, lr, loss)
        if it % 50 == 0 or it == cfg.max_iters:
            log.info("iter %d lr %.5f loss %.4f", it, lr, loss)
        if checkpoint_path is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
            save_checkpoint(state, checkpoint_path)
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path)
    return state


# --------------------------------------------------------------------------
# checkpoints


def encoder_description(enc: FrozenEncoder) -> dict:
    if isinstance(enc, ToyEncoder):
        return {"kind": "toy", "spec": enc.spec.to_dict()}
    describe = getattr(enc, "describe", None)
    if describe is None:
        raise CheckpointError(f"encoder {type(enc).__name__} cannot be described in a checkpoint")
    return describe()


def encoder_from_description(desc: dict, dtype=torch.float32) -> FrozenEncoder:
    kind = desc.get("kind")
    if kind == "toy":
        return ToyEncoder(ToyEncoderSpec.from_dict(desc["spec"]), dtype=dtype)
    if kind == "clip":
        from .clip_adapter import ClipEncoder

        return ClipEncoder.from_description(desc)
    raise CheckpointError(f"unknown encoder kind {kind!r}")


def state_to_container(state: TrainState) -> dict:
    m = state.model
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "vocabulary": list(m.vocab.names),
        "vocab_fingerprint": m.vocab.fingerprint,
        "templates": list(m.query.templates),
        "encoder": encoder_description(m.encoder),
        "encoder_fingerprint": m.encoder.state_fingerprint(),
        "dtype": str(m.projection.linear.weight.dtype).replace("torch.", ""),
        "model": m.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "iteration": state.iteration,
        "rng": state.rngs.state_dict(),
        "order": None if state.order is None else state.order.tolist(),
        "cursor": state.cursor,
        "history": [list(h) for h in state.history],
    }


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(state_to_container(state), tmp)
    tmp.replace(path)


def load_checkpoint(path, encoder: Optional[FrozenEncoder] = None,
                    vocab: Optional[ClassVocabulary] = None) -> TrainState:
    try:
        blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} container")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint version {blob.get('version')} unsupported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    stored = ClassVocabulary(blob["vocabulary"])
    if stored.fingerprint != blob["vocab_fingerprint"]:
        raise CheckpointError(f"{path}: vocabulary fingerprint is inconsistent")
    if vocab is not None:
        vocab.check(stored)
    dtype = getattr(torch, blob.get("dtype", "float32"))
    enc = encoder or encoder_from_description(blob["encoder"], dtype)
    if enc.state_fingerprint() != blob["encoder_fingerprint"]:
        raise CheckpointError(f"{path}: encoder does not match the one used for training")
    config = RunConfig.from_dict(blob["config"])
    state = TrainState.create(stored, enc, config, blob["templates"], dtype)
    state.model.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.iteration = int(blob["iteration"])
    state.rngs.load_state_dict(blob["rng"])
    state.order = None if blob["order"] is None else np.asarray(blob["order"], dtype=np.int64)
    state.cursor = int(blob["cursor"])
    state.history = [tuple(h) for h in blob["history"]]
    return state
