"""A small convolutional noise predictor with hand-written backpropagation.

Architecture (all convolutions 3x3, stride 1, zero padding 1)::

    x (3ch, HxW)
      conv1 3->C  + per-step bias  -> SiLU -> h1          (HxW)
      2x2 average pool                     -> p           (H/2 x W/2)
      conv2 C->C  + per-step bias  -> SiLU -> h2          (H/2 x W/2)
      conv3 C->C                   -> SiLU -> h3          (H/2 x W/2)
      nearest 2x upsample of h3, plus skip h1 -> u        (HxW)
      conv4 C->3                           -> eps_hat     (HxW)

SiLU(a) = a * sigmoid(a); its derivative is s * (1 + a * (1 - s)) with
s = sigmoid(a). The per-step bias is a fixed sinusoidal embedding of t
(dimension E) multiplied by a learned E x C matrix.

Internally activations are NHWC; the public functions take and return
NCHW (or CHW for a single image). Arithmetic runs in the parameter dtype:
float32 for training and sampling, float64 for gradient checks.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .diffusion import GaussianSource, NoiseSchedule, forward_sample, linear_schedule

__all__ = [
    "ArchSpec",
    "DenoiserParams",
    "AdamState",
    "TrainConfig",
    "TrainResult",
    "Checkpoint",
    "init_params",
    "zero_params",
    "predict_noise",
    "loss_terms",
    "loss_and_gradients",
    "adam_step",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

PARAM_NAMES = (
    "conv1.w", "conv1.b", "temb1.w",
    "conv2.w", "conv2.b", "temb2.w",
    "conv3.w", "conv3.b",
    "conv4.w", "conv4.b",
)


@dataclass(frozen=True)
class ArchSpec:
    in_channels: int = 3
    hidden: int = 32
    emb_dim: int = 32

    def shapes(self) -> dict[str, tuple[int, ...]]:
        c, h, e = self.in_channels, self.hidden, self.emb_dim
        return {
            "conv1.w": (3, 3, c, h), "conv1.b": (h,), "temb1.w": (e, h),
            "conv2.w": (3, 3, h, h), "conv2.b": (h,), "temb2.w": (e, h),
            "conv3.w": (3, 3, h, h), "conv3.b": (h,),
            "conv4.w": (3, 3, h, c), "conv4.b": (c,),
        }


@dataclass
class DenoiserParams:
    arch: ArchSpec
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        shapes = self.arch.shapes()
        if list(self.arrays) != list(PARAM_NAMES):
            self.arrays = {k: self.arrays[k] for k in PARAM_NAMES}
        for name, shape in shapes.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name} has shape {self.arrays[name].shape}, expected {shape}")

    @property
    def dtype(self):
        return self.arrays["conv1.w"].dtype

    def astype(self, dtype) -> "DenoiserParams":
        return DenoiserParams(self.arch, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.arch, {k: v.copy() for k, v in self.arrays.items()})

    def size(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.arrays.values())


def zero_params(arch: ArchSpec = ArchSpec(), dtype=np.float32) -> DenoiserParams:
    return DenoiserParams(arch, {k: np.zeros(s, dtype=dtype) for k, s in arch.shapes().items()})


def init_params(arch: ArchSpec = ArchSpec(), seed: int = 0, dtype=np.float32) -> DenoiserParams:
    """He-normal convolutions; the output layer starts at 1/10 of its He scale."""
    rng = np.random.default_rng([seed, 0xD1])
    arrays = {}
    for name, shape in arch.shapes().items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        elif name.startswith("temb"):
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), shape)
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            std = np.sqrt(2.0 / fan_in)
            if name == "conv4.w":
                std *= 0.1
            arrays[name] = rng.normal(0.0, std, shape)
    return DenoiserParams(arch, {k: v.astype(dtype) for k, v in arrays.items()})


# -- building blocks ---------------------------------------------------------

def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _im2col(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9 * c), dtype=x.dtype)
    k = 0
    for i in range(3):
        for j in range(3):
            cols[..., k * c:(k + 1) * c] = xp[:, i:i + h, j:j + w, :]
            k += 1
    return cols.reshape(n * h * w, 9 * c)


def _conv(x: np.ndarray, w: np.ndarray, cols=None):
    n, h, wd, _ = x.shape
    if cols is None:
        cols = _im2col(x)
    out = cols @ w.reshape(-1, w.shape[-1])
    return out.reshape(n, h, wd, w.shape[-1]), cols


def _conv_input_grad(d: np.ndarray, w: np.ndarray) -> np.ndarray:
    flipped = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
    return _conv(d, flipped)[0]


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _silu(a):
    s = _sigmoid(a)
    return a * s, s


def _silu_grad(a, s):
    return s * (1.0 + a * (1.0 - s))


def _avgpool(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))


def _upsample(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _blocksum(x):
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# -- forward / backward ------------------------------------------------------

def _as_batch(x_t, t):
    x = np.asarray(x_t)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (N, C, H, W) or (C, H, W), got shape {x.shape}")
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x.shape[0],))
    return x, t, single


def _forward(p: DenoiserParams, x: np.ndarray, t: np.ndarray):
    """x is NHWC in the parameter dtype."""
    a = p.arrays
    dtype = p.dtype
    n, h, w, c = x.shape
    if c != p.arch.in_channels:
        raise ValueError(f"expected {p.arch.in_channels} channels, got {c}")
    if h % 2 or w % 2:
        raise ValueError("height and width must be even")
    emb = timestep_embedding(t, p.arch.emb_dim).astype(dtype)

    a1, c1 = _conv(x, a["conv1.w"])
    a1 += a["conv1.b"] + (emb @ a["temb1.w"])[:, None, None, :]
    h1, s1 = _silu(a1)
    pooled = _avgpool(h1)
    a2, c2 = _conv(pooled, a["conv2.w"])
    a2 += a["conv2.b"] + (emb @ a["temb2.w"])[:, None, None, :]
    h2, s2 = _silu(a2)
    a3, c3 = _conv(h2, a["conv3.w"])
    a3 += a["conv3.b"]
    h3, s3 = _silu(a3)
    u = _upsample(h3) + h1
    out, c4 = _conv(u, a["conv4.w"])
    out += a["conv4.b"]
    cache = dict(emb=emb, a1=a1, s1=s1, c1=c1, a2=a2, s2=s2, c2=c2, a3=a3, s3=s3, c3=c3, c4=c4)
    return out, cache


def _backward(p: DenoiserParams, dout: np.ndarray, cache) -> dict[str, np.ndarray]:
    a = p.arrays
    g = {}

    def flat(d):
        return d.reshape(-1, d.shape[-1])

    g["conv4.w"] = (cache["c4"].T @ flat(dout)).reshape(a["conv4.w"].shape)
    g["conv4.b"] = flat(dout).sum(axis=0)
    du = _conv_input_grad(dout, a["conv4.w"])

    dh1 = du
    da3 = _blocksum(du) * _silu_grad(cache["a3"], cache["s3"])
    g["conv3.w"] = (cache["c3"].T @ flat(da3)).reshape(a["conv3.w"].shape)
    g["conv3.b"] = flat(da3).sum(axis=0)
    dh2 = _conv_input_grad(da3, a["conv3.w"])

    da2 = dh2 * _silu_grad(cache["a2"], cache["s2"])
    g["conv2.w"] = (cache["c2"].T @ flat(da2)).reshape(a["conv2.w"].shape)
    g["conv2.b"] = flat(da2).sum(axis=0)
    g["temb2.w"] = cache["emb"].T @ da2.sum(axis=(1, 2))
    dpooled = _conv_input_grad(da2, a["conv2.w"])

    dh1 = dh1 + _upsample(dpooled) * dh1.dtype.type(0.25)
    da1 = dh1 * _silu_grad(cache["a1"], cache["s1"])
    g["conv1.w"] = (cache["c1"].T @ flat(da1)).reshape(a["conv1.w"].shape)
    g["conv1.b"] = flat(da1).sum(axis=0)
    g["temb1.w"] = cache["emb"].T @ da1.sum(axis=(1, 2))
    return {k: g[k] for k in PARAM_NAMES}


def predict_noise(params: DenoiserParams, x_t, t) -> np.ndarray:
    """Predicted noise with the same shape as ``x_t`` ((C,H,W) or (N,C,H,W))."""
    x, t, single = _as_batch(x_t, t)
    nhwc = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=params.dtype)
    out, _ = _forward(params, nhwc, t)
    out = out.transpose(0, 3, 1, 2)
    return out[0] if single else out


def as_denoiser(params: DenoiserParams) -> Callable[[np.ndarray, int], np.ndarray]:
    return lambda x, t: predict_noise(params, x, t)


def loss_terms(params: DenoiserParams, x_t: np.ndarray, t, eps: np.ndarray):
    """Mean squared noise-prediction error and its gradient for fixed inputs."""
    x, t, _ = _as_batch(x_t, t)
    eps = np.asarray(eps).reshape(x.shape)
    nhwc = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=params.dtype)
    target = np.ascontiguousarray(eps.transpose(0, 2, 3, 1), dtype=params.dtype)
    out, cache = _forward(params, nhwc, t)
    diff = out - target
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    dout = diff * diff.dtype.type(2.0 / diff.size)
    return loss, _backward(params, dout, cache)


def loss_and_gradients(params: DenoiserParams, batch, sched: NoiseSchedule, source: GaussianSource):
    """Draw t ~ U{1..T} and eps ~ N(0, I) per image, then score the noise prediction."""
    x0 = np.asarray(batch, dtype=np.float64)
    if x0.ndim != 4 or x0.shape[0] == 0:
        raise ValueError("batch must be a non-empty (N, C, H, W) array")
    t = source.integers(1, sched.T, x0.shape[0])
    eps = source.normal(x0.shape)
    x_t = forward_sample(x0, t, eps, sched)
    return loss_terms(params, x_t, t, eps)


# -- optimizer ----------------------------------------------------------------

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: DenoiserParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


def adam_step(params: DenoiserParams, grads: dict, state: AdamState, lr: float):
    """One bias-corrected Adam update; returns new (params, state)."""
    step = state.step + 1
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, w in params.arrays.items():
        g = grads[k]
        if g.shape != w.shape or state.m[k].shape != w.shape:
            raise ValueError(f"shape mismatch for {k}")
        dt = w.dtype.type
        m = dt(ADAM_BETA1) * state.m[k] + dt(1.0 - ADAM_BETA1) * g
        v = dt(ADAM_BETA2) * state.v[k] + dt(1.0 - ADAM_BETA2) * g * g
        update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(ADAM_EPS))
        new_p[k] = (w - dt(lr) * update).astype(w.dtype)
        new_m[k], new_v[k] = m.astype(w.dtype), v.astype(w.dtype)
    return DenoiserParams(params.arch, new_p), AdamState(new_m, new_v, step)


# -- training -----------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 16
    epochs: int = 100
    image_size: int = 64
    seed: int = 0
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sigma_kind: str = "beta"
    third_channel_mode: str = "absdiff"
    checkpoint_epochs: tuple[int, ...] = (10, 20, 50, 70)

    def __post_init__(self):
        self.checkpoint_epochs = tuple(int(e) for e in self.checkpoint_epochs)
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")
        if self.image_size < 4 or self.image_size % 4:
            raise ValueError("image_size must be a positive multiple of 4")

    def schedule(self) -> NoiseSchedule:
        return linear_schedule(self.T, self.beta_start, self.beta_end, self.sigma_kind)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["checkpoint_epochs"] = list(self.checkpoint_epochs)
        return d


@dataclass
class TrainResult:
    params: DenoiserParams
    state: AdamState
    losses: list[float] = field(default_factory=list)


def train(dataset, cfg: TrainConfig, params: DenoiserParams | None = None,
          state: AdamState | None = None, start_epoch: int = 0,
          losses: list[float] | None = None, on_epoch_end=None) -> TrainResult:
    """Mini-batch Adam training of the noise predictor.

    Each epoch's shuffle and each step's (t, eps) draws are seeded from
    (seed, epoch[, step]) alone, so a run resumed from an epoch checkpoint
    replays the uninterrupted run exactly. ``on_epoch_end(epoch, result)``
    is called after every epoch with the 1-based epoch number.
    """
    data = np.stack([np.asarray(getattr(img, "data", img), dtype=np.float64) for img in dataset]) \
        if not isinstance(dataset, np.ndarray) else np.asarray(dataset, dtype=np.float64)
    if data.shape[0] == 0:
        raise ValueError("empty dataset")
    if data.shape[1:] != (3, cfg.image_size, cfg.image_size):
        raise ValueError(f"dataset images have shape {data.shape[1:]}, config expects "
                         f"(3, {cfg.image_size}, {cfg.image_size})")
    sched = cfg.schedule()
    if params is None:
        params = init_params(seed=cfg.seed)
    if state is None:
        state = AdamState.zeros_like(params)
    result = TrainResult(params, state, list(losses or []))
    n = data.shape[0]
    for epoch in range(start_epoch, cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            source = GaussianSource([cfg.seed, epoch, step])
            loss, grads = loss_and_gradients(result.params, data[idx], sched, source)
            result.params, result.state = adam_step(result.params, grads, result.state, cfg.learning_rate)
            total += loss * len(idx)
        result.losses.append(total / n)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, result)
    return result


# -- checkpoints --------------------------------------------------------------

MAGIC = b"MRGB"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: DenoiserParams
    schedule: dict
    train_config: dict
    epoch: int
    adam: AdamState | None = None
    losses: list[float] = field(default_factory=list)

    def noise_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return linear_schedule(s["T"], s["beta_start"], s["beta_end"], s.get("sigma_kind", "beta"))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Layout: b"MRGB", u32 version, u32 header length, JSON header, then
    little-endian float32 arrays (parameters, then Adam m and v when present)
    in declaration order."""
    arrays = [(k, ckpt.params.arrays[k]) for k in PARAM_NAMES]
    if ckpt.adam is not None:
        arrays += [(f"adam.m.{k}", ckpt.adam.m[k]) for k in PARAM_NAMES]
        arrays += [(f"adam.v.{k}", ckpt.adam.v[k]) for k in PARAM_NAMES]
    header = {
        "arch": dataclasses.asdict(ckpt.params.arch),
        "schedule": ckpt.schedule,
        "train_config": ckpt.train_config,
        "epoch": ckpt.epoch,
        "adam_step": None if ckpt.adam is None else ckpt.adam.step,
        "losses": [float(x) for x in ckpt.losses],
        "arrays": [{"name": k, "shape": list(a.shape)} for k, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(blob)) + blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(buf) < 12:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<II", buf[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(buf[12:12 + hlen])
    pos = 12 + hlen
    arrays = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + nbytes > len(buf):
            raise CheckpointError("truncated checkpoint payload")
        arrays[spec["name"]] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos) \
            .reshape(shape).astype(np.float32)
        pos += nbytes
    arch = ArchSpec(**header["arch"])
    params = DenoiserParams(arch, {k: arrays[k] for k in PARAM_NAMES})
    adam = None
    if header.get("adam_step") is not None:
        adam = AdamState({k: arrays[f"adam.m.{k}"] for k in PARAM_NAMES},
                         {k: arrays[f"adam.v.{k}"] for k in PARAM_NAMES},
                         header["adam_step"])
    return Checkpoint(params, header["schedule"], header["train_config"], header["epoch"],
                      adam, header.get("losses", []))
