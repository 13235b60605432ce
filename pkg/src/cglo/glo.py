"""Unsupervised decoder pretraining by generative latent optimization.

Every training slice owns a free unit latent.  Decoder weights and the latents
of the current mini-batch are updated jointly with Adam; latents are projected
back onto the unit sphere after each update.  Only the decoder is returned:
reconstruction always starts from fresh latents.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import SliceStack
from .decoder import (AdamState, DecoderParams, DecoderSpec, LatentBank, adam_step,
                      build_decoder, commit_running_stats, decoder_backward,
                      decoder_forward, sample_latent)
from .errors import InvalidArgument, NumericError

log = logging.getLogger(__name__)


def default_batch_schedule(epochs: int, start: int = 16) -> list[tuple[int, int]]:
    """Start at ``start`` and double at 50% and 75% of the epochs."""
    marks = sorted({0, epochs // 2, (3 * epochs) // 4})
    return [(m, start * 2 ** i) for i, m in enumerate(marks)]


@dataclass
class PretrainConfig:
    epochs: int = 100
    lr_latent: float = 1e-3
    lr_weights: float = 1e-3
    batch_schedule: list[tuple[int, int]] | None = None
    seed: int = 0
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument("epochs must be >= 1")
        if self.lr_latent < 0 or self.lr_weights < 0:
            raise InvalidArgument("learning rates must be non-negative")
        if self.batch_schedule is None:
            self.batch_schedule = default_batch_schedule(self.epochs)
        self.batch_schedule = [(int(e), int(b)) for e, b in self.batch_schedule]
        thresholds = [e for e, _ in self.batch_schedule]
        sizes = [b for _, b in self.batch_schedule]
        if not thresholds or thresholds[0] != 0:
            raise InvalidArgument("batch schedule must start at epoch 0")
        if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
            raise InvalidArgument("batch schedule thresholds must be strictly increasing")
        if any(b < a for a, b in zip(sizes, sizes[1:])) or min(sizes) < 1:
            raise InvalidArgument("batch sizes must be positive and nondecreasing")

    def batch_size(self, epoch: int) -> int:
        size = self.batch_schedule[0][1]
        for threshold, b in self.batch_schedule:
            if epoch >= threshold:
                size = b
        return size


@dataclass
class PretrainResult:
    params: DecoderParams
    final_losses: np.ndarray
    loss_history: list[float]
    batch_sizes: list[int] = field(default_factory=list)
    latents: np.ndarray | None = None


def glo_loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Batch mean of per-image summed squared differences."""
    outputs, targets = np.asarray(outputs), np.asarray(targets)
    if outputs.shape != targets.shape:
        raise InvalidArgument(f"shape mismatch {outputs.shape} vs {targets.shape}")
    return float(np.mean(np.sum((outputs - targets) ** 2, axis=(-2, -1))))


def flatten_slices(train: list[SliceStack]) -> np.ndarray:
    return np.concatenate([s.as_array() for s in train], axis=0)


def glo_pretrain(train, spec: DecoderSpec, cfg: PretrainConfig, init: DecoderParams | None = None,
                 on_epoch=None, keep_latents: bool = False) -> PretrainResult:
    """Fit decoder weights and one latent per slice to the training slices.

    ``train`` is a list of :class:`SliceStack` or an ``(N, n, n)`` array.
    ``on_epoch(epoch, params, mean_loss, batch_size, bank)`` is called after
    every epoch, e.g. for checkpointing.
    """
    images = train if isinstance(train, np.ndarray) else flatten_slices(train)
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 3 or len(images) < 1:
        raise InvalidArgument("need at least one training slice")
    if images.shape[1:] != (spec.out_size, spec.out_size):
        raise InvalidArgument(
            f"slices are {images.shape[1:]} but the decoder emits {spec.out_size}^2")
    n = len(images)
    params = init.copy() if init is not None else build_decoder(spec, cfg.seed)
    bank = LatentBank(sample_latent(np.random.default_rng([cfg.seed, 1]), spec.latent_dim, n))
    opt = AdamState()
    history, sizes = [], []
    for epoch in range(cfg.epochs):
        bs = min(cfg.batch_size(epoch), n)
        order = np.random.default_rng([cfg.seed, 2, epoch]).permutation(n)
        total = 0.0
        for b, start in enumerate(range(0, n, bs)):
            rows = np.sort(order[start:start + bs])
            out, cache = decoder_forward(params, bank.z[rows], "train")
            resid = out - images[rows]
            per_image = np.sum(resid ** 2, axis=(1, 2))
            if not np.all(np.isfinite(per_image)):
                raise NumericError(f"non-finite GLO loss at epoch {epoch}, batch {b}")
            total += per_image.sum()
            gw, gz = decoder_backward(cache, 2.0 * resid / len(rows))
            if cfg.lr_weights > 0:
                params.weights, opt = adam_step(opt, params.weights, gw, cfg.lr_weights)
            commit_running_stats(params, cache)
            bank.update(rows, gz, cfg.lr_latent)
        history.append(total / n)
        sizes.append(bs)
        log.debug("epoch %d loss %.6g batch %d", epoch, history[-1], bs)
        if on_epoch is not None:
            on_epoch(epoch, params, history[-1], bs, bank)
    final = per_image_losses(params, bank.z, images, min(cfg.batch_size(cfg.epochs - 1), n))
    return PretrainResult(params, final, history, sizes, bank.z.copy() if keep_latents else None)


def per_image_losses(params: DecoderParams, z: np.ndarray, images: np.ndarray,
                     batch: int) -> np.ndarray:
    """Train-mode reconstruction error of each slice, decoded in fixed-order chunks."""
    out = np.empty(len(images))
    for start in range(0, len(images), batch):
        sl = slice(start, start + batch)
        dec, _ = decoder_forward(params, z[sl], "train")
        out[sl] = np.sum((dec - images[sl]) ** 2, axis=(1, 2))
    return out
