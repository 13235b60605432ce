"""DCGAN-style decoder with explicit reverse-mode gradients.

Architecture: ``linear -> reshape (C, 2, 2) -> L x [ConvTranspose(4, 2, 1) ->
BatchNorm -> ReLU]`` where the last layer skips normalization and ends with a
sigmoid.  Each layer doubles the resolution and halves the channel count, the
last one emits a single channel, so ``out_size == 2 ** (L + 1)``.

Parameters live in plain ordered dicts of numpy arrays.  The forward pass is a
pure function returning a cache; :func:`decoder_backward` consumes the cache.
Train-mode forward passes report updated batch-norm running statistics in
``cache.running``; the caller commits them with :func:`commit_running_stats`.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractViolation, DegenerateInput, InvalidArgument, NumericError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
INIT_STD = 0.02


@dataclass(frozen=True)
class DecoderSpec:
    latent_dim: int
    base_channels: int
    out_size: int

    def __post_init__(self):
        if self.latent_dim < 2:
            raise InvalidArgument("latent_dim must be >= 2")
        if self.out_size < 8 or self.out_size & (self.out_size - 1):
            raise InvalidArgument(f"out_size must be a power of two >= 8, got {self.out_size}")
        if self.base_channels < 2 or self.base_channels % 2 ** (self.n_layers - 1):
            raise InvalidArgument(
                f"base_channels={self.base_channels} must be >= 2 and divisible by "
                f"2**{self.n_layers - 1}")

    @property
    def n_layers(self) -> int:
        return int(round(math.log2(self.out_size))) - 1

    @property
    def channels(self) -> list[int]:
        """Channel ladder from the stem to the output, e.g. ``[32, 16, 8, 1]``."""
        C, L = self.base_channels, self.n_layers
        return [C // 2 ** l for l in range(L)] + [1]

    def to_dict(self) -> dict:
        return {"latent_dim": self.latent_dim, "base_channels": self.base_channels,
                "out_size": self.out_size}


@dataclass
class DecoderParams:
    spec: DecoderSpec
    weights: dict[str, np.ndarray]
    buffers: dict[str, np.ndarray]
    seed: int = 0

    def copy(self) -> "DecoderParams":
        return DecoderParams(self.spec, {k: v.copy() for k, v in self.weights.items()},
                             {k: v.copy() for k, v in self.buffers.items()}, self.seed)

    def n_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())


def build_decoder(spec: DecoderSpec, seed: int, dtype=np.float64) -> DecoderParams:
    """Gaussian(0, 0.02) weights, zero biases, unit scale / zero shift."""
    rng = np.random.default_rng(seed)
    ch = spec.channels
    C = spec.base_channels
    w: dict[str, np.ndarray] = {
        "linear.weight": rng.normal(0.0, INIT_STD, (spec.latent_dim, 4 * C)),
        "linear.bias": np.zeros(4 * C),
    }
    buf: dict[str, np.ndarray] = {}
    for l in range(spec.n_layers):
        cin, cout = ch[l], ch[l + 1]
        w[f"conv{l}.weight"] = rng.normal(0.0, INIT_STD, (cin, cout, 4, 4))
        w[f"conv{l}.bias"] = np.zeros(cout)
        if l < spec.n_layers - 1:
            w[f"bn{l}.scale"] = np.ones(cout)
            w[f"bn{l}.shift"] = np.zeros(cout)
            buf[f"bn{l}.running_mean"] = np.zeros(cout)
            buf[f"bn{l}.running_var"] = np.ones(cout)
    w = {k: v.astype(dtype) for k, v in w.items()}
    buf = {k: v.astype(dtype) for k, v in buf.items()}
    return DecoderParams(spec, w, buf, seed)


# --- layer primitives ------------------------------------------------------


def conv_transpose_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Transposed convolution, kernel 4, stride 2, padding 1: ``(B, Ci, H, W) -> (B, Co, 2H, 2W)``.

    ``out[2i + ky - 1, 2j + kx - 1] += x[i, j] * w[ky, kx]`` (no kernel flip).
    """
    B, _, H, W = x.shape
    cout = w.shape[1]
    cols = np.tensordot(x, w, axes=([1], [0]))  # (B, H, W, Co, 4, 4)
    out = np.zeros((B, cout, 2 * H + 2, 2 * W + 2), dtype=cols.dtype)
    for ky in range(4):
        for kx in range(4):
            out[:, :, ky:ky + 2 * H:2, kx:kx + 2 * W:2] += cols[..., ky, kx].transpose(0, 3, 1, 2)
    return out[:, :, 1:-1, 1:-1] + b[None, :, None, None]


def conv_transpose_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    """Gradients ``(dx, dw, db)`` of :func:`conv_transpose_forward`."""
    B, _, H, W = x.shape
    cout = w.shape[1]
    gp = np.pad(g, ((0, 0), (0, 0), (1, 1), (1, 1)))
    gcols = np.empty((B, H, W, cout, 4, 4), dtype=g.dtype)
    for ky in range(4):
        for kx in range(4):
            gcols[..., ky, kx] = gp[:, :, ky:ky + 2 * H:2, kx:kx + 2 * W:2].transpose(0, 2, 3, 1)
    dx = np.tensordot(gcols, w, axes=([3, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    dw = np.tensordot(x, gcols, axes=([0, 2, 3], [0, 1, 2]))
    db = g.sum(axis=(0, 2, 3))
    return dx, dw, db


def batchnorm_forward(h, scale, shift, running_mean, running_var, train: bool):
    if train:
        mean = h.mean(axis=(0, 2, 3))
        var = h.var(axis=(0, 2, 3))
        n = h.shape[0] * h.shape[2] * h.shape[3]
        unbiased = var * n / max(n - 1, 1)
        new_running = ((1 - BN_MOMENTUM) * running_mean + BN_MOMENTUM * mean,
                       (1 - BN_MOMENTUM) * running_var + BN_MOMENTUM * unbiased)
    else:
        mean, var = running_mean, running_var
        new_running = None
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (h - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * scale[None, :, None, None] + shift[None, :, None, None]
    return out, xhat, inv_std, new_running


def batchnorm_backward(g, xhat, inv_std, scale, train: bool):
    dscale = (g * xhat).sum(axis=(0, 2, 3))
    dshift = g.sum(axis=(0, 2, 3))
    gx = g * scale[None, :, None, None]
    if train:
        n = g.shape[0] * g.shape[2] * g.shape[3]
        dx = (inv_std[None, :, None, None] / n) * (
            n * gx - gx.sum(axis=(0, 2, 3))[None, :, None, None]
            - xhat * (gx * xhat).sum(axis=(0, 2, 3))[None, :, None, None])
    else:
        dx = gx * inv_std[None, :, None, None]
    return dx, dscale, dshift


def sigmoid(a):
    # Split by sign so large |a| never overflows exp.
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# --- network ---------------------------------------------------------------


@dataclass
class ForwardCache:
    spec: DecoderSpec
    mode: str
    z: np.ndarray
    weights: dict[str, np.ndarray]
    layer_inputs: list[np.ndarray] = field(default_factory=list)
    bn: list[tuple] = field(default_factory=list)
    relu_masks: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None
    running: dict[str, np.ndarray] = field(default_factory=dict)


def decoder_forward(params: DecoderParams, z: np.ndarray, mode: str = "train"):
    """Decode a batch of latents ``(B, latent_dim)`` into images ``(B, n, n)``.

    Returns ``(images, cache)``.
    """
    if mode not in ("train", "eval"):
        raise InvalidArgument(f"mode must be 'train' or 'eval', got {mode!r}")
    spec, w = params.spec, params.weights
    z = np.asarray(z)
    if z.ndim != 2 or z.shape[1] != spec.latent_dim:
        raise InvalidArgument(
            f"latents must have shape (B, {spec.latent_dim}), got {z.shape}")
    if z.shape[0] < 1:
        raise InvalidArgument("empty latent batch")
    train = mode == "train"
    cache = ForwardCache(spec, mode, z, dict(w))
    C = spec.base_channels
    h = (z @ w["linear.weight"] + w["linear.bias"]).reshape(len(z), C, 2, 2)
    L = spec.n_layers
    for l in range(L):
        cache.layer_inputs.append(h)
        h = conv_transpose_forward(h, w[f"conv{l}.weight"], w[f"conv{l}.bias"])
        if l == L - 1:
            break
        h, xhat, inv_std, new_running = batchnorm_forward(
            h, w[f"bn{l}.scale"], w[f"bn{l}.shift"],
            params.buffers[f"bn{l}.running_mean"], params.buffers[f"bn{l}.running_var"],
            train)
        cache.bn.append((xhat, inv_std))
        if new_running is not None:
            cache.running[f"bn{l}.running_mean"], cache.running[f"bn{l}.running_var"] = new_running
        mask = h > 0
        cache.relu_masks.append(mask)
        h = h * mask
    out = sigmoid(h[:, 0])
    cache.output = out
    return out, cache


def decoder_backward(cache: ForwardCache, grad_out: np.ndarray):
    """Exact gradients ``(grad_weights, grad_z)`` of ``sum(grad_out * images)``."""
    if cache.output is None:
        raise ContractViolation("cache does not come from a completed forward pass")
    grad_out = np.asarray(grad_out)
    if grad_out.shape != cache.output.shape:
        raise ContractViolation(
            f"gradient shape {grad_out.shape} does not match cached output "
            f"{cache.output.shape}")
    spec, w = cache.spec, cache.weights
    train = cache.mode == "train"
    grads: dict[str, np.ndarray] = {}
    s = cache.output
    g = (grad_out * s * (1.0 - s))[:, None]
    for l in reversed(range(spec.n_layers)):
        if l < spec.n_layers - 1:
            g = g * cache.relu_masks[l]
            xhat, inv_std = cache.bn[l]
            g, grads[f"bn{l}.scale"], grads[f"bn{l}.shift"] = batchnorm_backward(
                g, xhat, inv_std, w[f"bn{l}.scale"], train)
        g, grads[f"conv{l}.weight"], grads[f"conv{l}.bias"] = conv_transpose_backward(
            cache.layer_inputs[l], w[f"conv{l}.weight"], g)
    gh = g.reshape(len(g), -1)
    grads["linear.weight"] = cache.z.T @ gh
    grads["linear.bias"] = gh.sum(axis=0)
    grad_z = gh @ w["linear.weight"].T
    return {k: grads[k] for k in w}, grad_z


def commit_running_stats(params: DecoderParams, cache: ForwardCache) -> None:
    params.buffers.update(cache.running)


# --- latents ---------------------------------------------------------------


def project_to_sphere(z: np.ndarray) -> np.ndarray:
    """Rescale each latent (last axis) to unit L2 norm."""
    z = np.asarray(z, dtype=np.float64)
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise DegenerateInput("cannot project a zero or non-finite latent onto the sphere")
    return z / norm


def sample_latent(seed, dim: int, n: int | None = None) -> np.ndarray:
    """Gaussian draw projected to the unit sphere; ``(dim,)`` or ``(n, dim)``."""
    if dim < 2:
        raise InvalidArgument("latent dimension must be >= 2")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = (dim,) if n is None else (n, dim)
    return project_to_sphere(rng.standard_normal(shape))


# --- Adam ------------------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_moments(w, g, m, v, t, lr, beta1, beta2, eps):
    """One Adam update; ``t`` is the (1-based) step count, scalar or broadcastable."""
    m = beta1 * m + (1 - beta1) * g
    v = beta2 * v + (1 - beta2) * g * g
    mhat = m / (1 - beta1 ** t)
    vhat = v / (1 - beta2 ** t)
    return w - lr * mhat / (np.sqrt(vhat) + eps), m, v


def adam_step(state: AdamState, variables: dict, grads: dict, lr: float):
    """Bias-corrected Adam on a dict of arrays; returns ``(new_variables, new_state)``."""
    for k, g in grads.items():
        if k not in variables or np.shape(g) != np.shape(variables[k]):
            raise InvalidArgument(f"gradient {k!r} does not match its variable")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in variable group {k!r}")
    t = state.step + 1
    new_vars, new_m, new_v = dict(variables), {}, {}
    for k, g in grads.items():
        m = state.m.get(k, np.zeros_like(g))
        v = state.v.get(k, np.zeros_like(g))
        new_vars[k], new_m[k], new_v[k] = adam_moments(
            variables[k], g, m, v, t, lr, state.beta1, state.beta2, state.eps)
    return new_vars, AdamState(t, new_m, new_v, state.beta1, state.beta2, state.eps)


class LatentBank:
    """A matrix of unit latents with per-row Adam moments.

    Only the rows of a mini-batch are updated at each step, so every row keeps
    its own step count for bias correction.  Rows are re-projected to the unit
    sphere after each update.
    """

    def __init__(self, z: np.ndarray, beta1=0.9, beta2=0.999, eps=1e-8):
        self.z = project_to_sphere(z)
        self.m = np.zeros_like(self.z)
        self.v = np.zeros_like(self.z)
        self.t = np.zeros(len(self.z), dtype=np.int64)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def __len__(self):
        return len(self.z)

    def update(self, rows: np.ndarray, grad: np.ndarray, lr: float) -> None:
        rows = np.asarray(rows)
        if np.unique(rows).size != rows.size:
            raise InvalidArgument("latent rows in one update must be distinct")
        if not np.all(np.isfinite(grad)):
            raise NumericError("non-finite gradient in variable group 'latents'")
        self.t[rows] += 1
        z, self.m[rows], self.v[rows] = adam_moments(
            self.z[rows], grad, self.m[rows], self.v[rows], self.t[rows][:, None],
            lr, self.beta1, self.beta2, self.eps)
        self.z[rows] = project_to_sphere(z)


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"GLOC"


def save_checkpoint(path, params: DecoderParams, step: int = 0, extra: dict | None = None) -> Path:
    """``GLOC`` + u32 header length + JSON header + f32 arrays in declaration order."""
    names = list(params.weights) + list(params.buffers)
    arrays = {**params.weights, **params.buffers}
    header = {
        "spec": params.spec.to_dict(),
        "seed": params.seed,
        "step": step,
        "arrays": [[k, list(arrays[k].shape)] for k in names],
        "n_buffers": len(params.buffers),
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in names:
            fh.write(np.ascontiguousarray(arrays[k], dtype="<f4").tobytes())
    return path


def load_checkpoint(path):
    """Returns ``(params, header)``; arrays come back as float64."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise InvalidArgument(f"{path}: not a GLOC checkpoint")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8:8 + n])
    spec = DecoderSpec(**header["spec"])
    offset = 8 + n
    entries = header["arrays"]
    n_weights = len(entries) - header["n_buffers"]
    weights, buffers = {}, {}
    for i, (k, shape) in enumerate(entries):
        count = int(np.prod(shape))
        a = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape)
        offset += 4 * count
        (weights if i < n_weights else buffers)[k] = a.astype(np.float64)
    if offset != len(data):
        raise InvalidArgument(f"{path}: trailing or missing bytes")
    return DecoderParams(spec, weights, buffers, header["seed"]), header
