"""Reconstruction engines.

* :func:`cglo_reconstruct` - joint latent/decoder fit of all slices of a scan
  against their measured sinograms, starting from a pretrained (or fresh)
  decoder and fresh latents.
* :func:`dip_reconstruct` - per-slice fit of a randomly initialized decoder with
  a fixed input latent and a TV penalty.
* :func:`map_tv_reconstruct` - Adam descent on least squares plus smoothed TV.
* :func:`csgm_proximal_step` / :func:`csgm_sample` - score-based sampling with
  a closed-form data-consistency step.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import augment_sinograms_vertical
from .decoder import (AdamState, DecoderParams, DecoderSpec, LatentBank,
                      adam_step, build_decoder, commit_running_stats, decoder_backward,
                      decoder_forward, sample_latent)
from .errors import ConfigError, ContractViolation, InvalidArgument, NumericError
from .tomo import AngleSet, Geometry, fbp, pad_profiles, radon_adjoint, radon_forward

log = logging.getLogger(__name__)

LOSS_KINDS = ("squared_l1", "l1", "l2")

# Upper bound on augmented slices decoded in one reconstruction job.
MAX_LATENTS = 20000


@dataclass
class ReconConfig:
    steps: int = 500
    lr_latent: float = 1e-2
    lr_weights: float = 1e-4
    loss_kind: str = "squared_l1"
    augment_factor: int = 8
    batch_size: int = 8
    seed: int = 0
    tv_alpha: float = 0.0
    tv_epsilon: float = 1e-6

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.lr_latent <= 0 or self.lr_weights <= 0:
            raise InvalidArgument("learning rates must be positive")
        if self.augment_factor < 1:
            raise InvalidArgument("augment_factor must be >= 1")
        if self.batch_size < 1:
            raise InvalidArgument("batch_size must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidArgument(f"loss_kind must be one of {LOSS_KINDS}")
        if self.tv_alpha < 0 or self.tv_epsilon <= 0:
            raise InvalidArgument("tv_alpha must be >= 0 and tv_epsilon > 0")


@dataclass
class ReconJob:
    """Sinograms of one scan (axial order) measured on ``angles``.

    ``decoder`` is a pretrained :class:`DecoderParams`, or a :class:`DecoderSpec`
    for a freshly initialized decoder seeded from ``config.seed``.
    """

    sinograms: list[np.ndarray]
    angles: AngleSet
    geometry: Geometry
    decoder: DecoderParams | DecoderSpec
    config: ReconConfig = field(default_factory=ReconConfig)

    def __post_init__(self):
        self.sinograms = [np.asarray(s, dtype=np.float64) for s in self.sinograms]
        if not self.sinograms:
            raise InvalidArgument("a reconstruction job needs at least one sinogram")
        want = (len(self.angles), self.geometry.n_detectors)
        for i, s in enumerate(self.sinograms):
            if s.shape != want:
                raise InvalidArgument(f"sinogram {i} has shape {s.shape}, expected {want}")

    @property
    def spec(self) -> DecoderSpec:
        return self.decoder if isinstance(self.decoder, DecoderSpec) else self.decoder.spec


@dataclass
class ReconResult:
    slices: list[np.ndarray]
    latents: np.ndarray | None
    loss_history: list[float]


# --- losses ----------------------------------------------------------------


def _residual_loss(r: np.ndarray, kind: str):
    """Per-item loss and its gradient for residuals ``(K, ...)``."""
    axes = tuple(range(1, r.ndim))
    if kind == "squared_l1":
        l1 = np.abs(r).sum(axis=axes)
        shape = (-1,) + (1,) * (r.ndim - 1)
        return l1 ** 2, 2.0 * l1.reshape(shape) * np.sign(r)
    if kind == "l1":
        return np.abs(r).sum(axis=axes), np.sign(r)
    if kind == "l2":
        return (r ** 2).sum(axis=axes), 2.0 * r
    raise InvalidArgument(f"unknown loss kind {kind!r}")


def sino_loss(simulated, measured, kind: str = "squared_l1") -> float:
    """Mean over slices of the chosen residual norm."""
    sim, meas = np.asarray(simulated, dtype=np.float64), np.asarray(measured, dtype=np.float64)
    if sim.shape != meas.shape:
        raise InvalidArgument(f"shape mismatch {sim.shape} vs {meas.shape}")
    if sim.ndim == 2:
        sim, meas = sim[None], meas[None]
    per, _ = _residual_loss(sim - meas, kind)
    return float(per.mean())


def sino_loss_grad(simulated, measured, kind: str = "squared_l1"):
    """``(loss, d loss / d simulated)`` for a batch ``(K, n_angles, n_det)``."""
    sim, meas = np.asarray(simulated, dtype=np.float64), np.asarray(measured, dtype=np.float64)
    if sim.shape != meas.shape:
        raise InvalidArgument(f"shape mismatch {sim.shape} vs {meas.shape}")
    per, grad = _residual_loss(sim - meas, kind)
    return float(per.mean()), grad / len(sim)


def tv_value_and_grad(x: np.ndarray, eps: float = 1e-6):
    """Isotropic smoothed TV ``sum sqrt(dh^2 + dv^2 + eps^2)`` with its gradient.

    Forward differences with replicate boundary (last row/column differences
    are zero).  Works on ``(n, n)`` or a batch ``(B, n, n)``; the value is summed
    over the batch.
    """
    if eps <= 0:
        raise InvalidArgument("tv epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    dh = np.zeros_like(x)
    dv = np.zeros_like(x)
    dh[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    dv[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    mag = np.sqrt(dh ** 2 + dv ** 2 + eps ** 2)
    u, w = dh / mag, dv / mag
    g = -u - w
    g[..., :, 1:] += u[..., :, :-1]
    g[..., 1:, :] += w[..., :-1, :]
    return float(mag.sum()), g


# --- cGLO ------------------------------------------------------------------


def _initial_decoder(decoder, seed: int) -> DecoderParams:
    if isinstance(decoder, DecoderSpec):
        return build_decoder(decoder, seed)
    return decoder.copy()


def cglo_reconstruct(job: ReconJob, on_step: Callable | None = None) -> ReconResult:
    """Reconstruct every slice of ``job`` with one shared decoder.

    The measured sinograms are vertically augmented, every augmented position
    gets a fresh unit latent, and each step sweeps shuffled mini-batches: decode,
    project, compare to the measurements, backpropagate through the exact
    adjoint and the decoder, update.  Only slices at original positions are
    returned, decoded in eval mode.
    """
    cfg = job.config
    spec = job.spec
    size = spec.out_size
    job.geometry.check(size)
    if len(job.sinograms) >= 2 and cfg.augment_factor > 1:
        targets, mask = augment_sinograms_vertical(job.sinograms, cfg.augment_factor)
    else:
        targets, mask = list(job.sinograms), [True] * len(job.sinograms)
    targets = np.stack(targets)
    n = len(targets)
    if n > MAX_LATENTS:
        raise ConfigError(
            f"{n} augmented slices exceed the limit of {MAX_LATENTS}; "
            "lower augment_factor or split the scan")
    params = _initial_decoder(job.decoder, cfg.seed)
    bank = LatentBank(sample_latent(np.random.default_rng([cfg.seed, 11]), spec.latent_dim, n))
    opt = AdamState()
    history = []
    bs = min(cfg.batch_size, n)
    for step in range(cfg.steps):
        order = np.random.default_rng([cfg.seed, 12, step]).permutation(n)
        total = 0.0
        for start in range(0, n, bs):
            rows = np.sort(order[start:start + bs])
            out, cache = decoder_forward(params, bank.z[rows], "train")
            sim = radon_forward(out, job.geometry, job.angles)
            loss, g_sino = sino_loss_grad(sim, targets[rows], cfg.loss_kind)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite reconstruction loss at step {step}")
            total += loss * len(rows)
            g_img = radon_adjoint(g_sino, job.geometry, job.angles, size)
            gw, gz = decoder_backward(cache, g_img)
            params.weights, opt = adam_step(opt, params.weights, gw, cfg.lr_weights)
            commit_running_stats(params, cache)
            bank.update(rows, gz, cfg.lr_latent)
        history.append(total / n)
        if on_step is not None:
            on_step(step, history[-1], params, bank)
    keep = np.flatnonzero(mask)
    slices = decode_eval(params, bank.z[keep], bs)
    return ReconResult(list(slices), bank.z[keep].copy(), history)


def decode_eval(params: DecoderParams, z: np.ndarray, batch: int = 64) -> np.ndarray:
    out = [decoder_forward(params, z[i:i + batch], "eval")[0] for i in range(0, len(z), batch)]
    return np.concatenate(out, axis=0)


# --- DIP -------------------------------------------------------------------


def dip_reconstruct(sinograms, angles: AngleSet, g: Geometry, spec: DecoderSpec,
                    cfg: ReconConfig) -> ReconResult:
    """Fit a fresh decoder per slice with a fixed latent; loss ``||T f(z) - y||^2 + a TV``.

    Only the decoder weights move (``cfg.lr_weights``).  The output is the
    train-mode decoding at the final step.
    """
    single = np.ndim(sinograms) == 2
    sinos = [np.asarray(sinograms, dtype=np.float64)] if single else [
        np.asarray(s, dtype=np.float64) for s in sinograms]
    size = spec.out_size
    g.check(size)
    slices, history = [], []
    for i, y in enumerate(sinos):
        if y.shape != (len(angles), g.n_detectors):
            raise InvalidArgument(f"sinogram {i} has shape {y.shape}")
        params = build_decoder(spec, int(np.random.default_rng([cfg.seed, 21, i]).integers(2**31)))
        z = sample_latent(np.random.default_rng([cfg.seed, 22, i]), spec.latent_dim, 1)
        opt = AdamState()
        hist = []
        for step in range(cfg.steps):
            out, cache = decoder_forward(params, z, "train")
            sim = radon_forward(out[0], g, angles)
            r = sim - y
            tv, tv_grad = tv_value_and_grad(out[0], cfg.tv_epsilon)
            loss = float((r ** 2).sum() + cfg.tv_alpha * tv)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite DIP loss at slice {i}, step {step}")
            hist.append(loss)
            g_img = radon_adjoint(2.0 * r, g, angles, size) + cfg.tv_alpha * tv_grad
            gw, _ = decoder_backward(cache, g_img[None])
            params.weights, opt = adam_step(opt, params.weights, gw, cfg.lr_weights)
            commit_running_stats(params, cache)
        out, _ = decoder_forward(params, z, "train")
        slices.append(out[0])
        history.append(hist)
    mean_hist = list(np.mean(np.asarray(history), axis=0))
    return ReconResult(slices, None, mean_hist)


# --- MAP-TV ----------------------------------------------------------------


def map_tv_reconstruct(y: np.ndarray, angles: AngleSet, g: Geometry, size: int, alpha: float,
                       steps: int, seed: int = 0, lr: float = 1e-2,
                       eps: float = 1e-6, history: list | None = None) -> np.ndarray:
    """Adam on ``||T x - y||^2 + alpha TV(x)`` from the clamped FBP image.

    The iteration is deterministic; ``seed`` is accepted for interface symmetry
    with the other engines.
    """
    if alpha < 0:
        raise InvalidArgument("alpha must be non-negative")
    del seed
    y = np.asarray(y, dtype=np.float64)
    x = np.clip(fbp(y, g, angles, size), 0.0, 1.0)
    state = AdamState()
    for step in range(steps):
        r = radon_forward(x, g, angles) - y
        tv, tv_grad = tv_value_and_grad(x, eps)
        obj = float((r ** 2).sum() + alpha * tv)
        if not math.isfinite(obj):
            raise NumericError(f"non-finite MAP-TV objective at step {step}")
        if history is not None:
            history.append(obj)
        grad = 2.0 * radon_adjoint(r, g, angles, size) + alpha * tv_grad
        new, state = adam_step(state, {"x": x}, {"x": grad}, lr)
        x = new["x"]
    return x


# --- cSGM ------------------------------------------------------------------


def csgm_proximal_step(x_uncond: np.ndarray, y_t: np.ndarray, angles_e: AngleSet,
                       angles_full: AngleSet, lam: float, g: Geometry,
                       inverse: Callable | None = None) -> np.ndarray:
    """Closed-form data consistency on the full angle set.

    Measured rows become ``lam * y_t + (1 - lam) * T_e x``, simulated rows keep
    ``T_s x``, and the completed sinogram is inverted with ``inverse`` (FBP by
    default; any ``f(sinogram) -> image`` on ``angles_full`` may be supplied).
    """
    if not 0.0 <= lam <= 1.0:
        raise InvalidArgument(f"lambda must lie in [0, 1], got {lam}")
    size = x_uncond.shape[-1]
    idx = angles_e.index_in(angles_full)
    full = radon_forward(x_uncond, g, angles_full)
    sino = full.copy()
    # Measured rows are blended; rows outside angles_e stay T_s(x).
    sino[..., idx, :] = lam * np.asarray(y_t) + (1.0 - lam) * full[..., idx, :]
    if inverse is None:
        return fbp(sino, g, angles_full, size)
    return inverse(sino)


def completed_sinogram(x_uncond, y_t, angles_e, angles_full, lam, g):
    """``P_e(lam y + (1 - lam) T_e x) + P_s T_s x`` assembled via explicit padding."""
    x_uncond = np.asarray(x_uncond, dtype=np.float64)
    idx = angles_e.index_in(angles_full)
    rest = np.setdiff1d(np.arange(len(angles_full)), idx)
    angles_s = angles_full.subset(rest)
    t_e = radon_forward(x_uncond, g, angles_e)
    t_s = radon_forward(x_uncond, g, angles_s)
    return (pad_profiles(lam * np.asarray(y_t) + (1 - lam) * t_e, angles_e, angles_full)
            + pad_profiles(t_s, angles_s, angles_full))


def geometric_sigma(t, sigma_min: float = 0.01, sigma_max: float = 1.0):
    return sigma_min * (sigma_max / sigma_min) ** np.asarray(t)


ScoreFunction = Callable[[np.ndarray, float], np.ndarray]


def csgm_sample(score: ScoreFunction, y: np.ndarray, angles_e: AngleSet, angles_full: AngleSet,
                lam: float, g: Geometry, size: int, schedule, seed: int,
                sigma_min: float = 0.01, sigma_max: float = 1.0,
                inverse: Callable | None = None) -> np.ndarray:
    """Conditioned reverse-time sampling with a variance-exploding SDE.

    At each time ``t_i`` of the decreasing ``schedule`` the current sample is
    made consistent with perturbed measurements ``y + sigma(t_i) T_e(n)``; the
    Euler-Maruyama predictor then moves the consistent sample to ``t_{i+1}``
    using the score evaluated at the unconditioned sample.  The consistent
    sample at the last time point is returned.

    Draw order from ``default_rng(seed)``: the initial ``sigma_max * N(0, I)``
    image, then per time point the measurement noise image followed (except at
    the last point) by the predictor noise.
    """
    ts = np.asarray(schedule, dtype=np.float64)
    if ts.ndim != 1 or ts.size < 1 or np.any(np.diff(ts) >= 0):
        raise InvalidArgument("schedule must be a strictly decreasing 1-D time grid")
    if ts[0] > 1.0 or ts[-1] < 0.0:
        raise InvalidArgument("schedule must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    log_ratio = math.log(sigma_max / sigma_min)
    x = sigma_max * rng.standard_normal((size, size))
    y = np.asarray(y, dtype=np.float64)
    x_cond = x
    for i, t in enumerate(ts):
        sigma = float(geometric_sigma(t, sigma_min, sigma_max))
        y_t = y + sigma * radon_forward(rng.standard_normal((size, size)), g, angles_e)
        x_cond = csgm_proximal_step(x, y_t, angles_e, angles_full, lam, g, inverse)
        if i == len(ts) - 1:
            break
        s = np.asarray(score(x, float(t)))
        if s.shape != x.shape:
            raise ContractViolation(f"score returned shape {s.shape}, expected {x.shape}")
        dt = float(t - ts[i + 1])
        g2 = sigma ** 2 * 2.0 * log_ratio
        x = x_cond + g2 * s * dt + math.sqrt(g2 * dt) * rng.standard_normal((size, size))
    return x_cond


def gaussian_score(mean: np.ndarray, std: float, sigma_min: float = 0.01,
                   sigma_max: float = 1.0) -> ScoreFunction:
    """Exact score of ``N(mean, std^2 I)`` diffused by the VE SDE."""
    mean = np.asarray(mean, dtype=np.float64)

    def score(x, t):
        var = std ** 2 + float(geometric_sigma(t, sigma_min, sigma_max)) ** 2
        return -(x - mean) / var

    return score
