"""Trainable velocity field: a small convolutional net with hand-rolled
gradients, momentum-SGD training, and a binary checkpoint format.

Input features per pixel are the grid channels, two normalized pixel-center
coordinates, a four-term time embedding, and the condition vector broadcast
per pixel.  The coordinate channels deliberately make the net position-aware,
so spatial selection operators do not commute with it — the regime the
sampler targets.  Everything computes in float64 internally; checkpoints
store float32.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import ToyDataset
from .errors import ContractError, GridError, TrainingError
from .fields import VelocityField
from .grid import LatentGrid, SeededRng, atomic_write_bytes

__all__ = [
    "ToyNetConfig",
    "ToyNetField",
    "TrainResult",
    "train_toy",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_FORMAT = "previewflow-checkpoint"
MAX_PARAMS = 500_000
_TIME_FEATURES = 4


@dataclass(frozen=True)
class ToyNetConfig:
    grid_channels: int = 3
    hidden: int = 32
    layers: int = 4            # conv layers including the linear output layer
    condition_arity: int = 4
    kernel_size: int = 3

    def feature_channels(self) -> int:
        return self.grid_channels + 2 + _TIME_FEATURES + self.condition_arity

    def layer_shapes(self) -> list[tuple[int, int]]:
        if self.layers < 1:
            raise ContractError(f"net needs at least one layer; got {self.layers}")
        if self.layers == 1:
            return [(self.feature_channels(), self.grid_channels)]
        shapes = [(self.feature_channels(), self.hidden)]
        shapes += [(self.hidden, self.hidden)] * (self.layers - 2)
        shapes += [(self.hidden, self.grid_channels)]
        return shapes


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # x: (h, w, c) -> (h*w, k*k*c), zero-padded 'same'
    h, w, c = x.shape
    p = k // 2
    xp = np.zeros((h + 2 * p, w + 2 * p, c), dtype=np.float64)
    xp[p:p + h, p:p + w, :] = x
    cols = np.empty((h * w, k * k * c), dtype=np.float64)
    i = 0
    for dy in range(k):
        for dx in range(k):
            cols[:, i * c:(i + 1) * c] = xp[dy:dy + h, dx:dx + w, :].reshape(h * w, c)
            i += 1
    return cols


def _col2im(dcols: np.ndarray, h: int, w: int, c: int, k: int) -> np.ndarray:
    p = k // 2
    acc = np.zeros((h + 2 * p, w + 2 * p, c), dtype=np.float64)
    i = 0
    for dy in range(k):
        for dx in range(k):
            acc[dy:dy + h, dx:dx + w, :] += dcols[:, i * c:(i + 1) * c].reshape(h, w, c)
            i += 1
    return acc[p:p + h, p:p + w, :]


class ToyNetField(VelocityField):
    kind = "toy-net"

    def __init__(self, config: ToyNetConfig, weights=None, rng: SeededRng | None = None):
        self.config = config
        shapes = config.layer_shapes()
        k = config.kernel_size
        if weights is not None:
            self.weights = [(np.array(wt, dtype=np.float64), np.array(b, dtype=np.float64)) for wt, b in weights]
            for (wt, b), (cin, cout) in zip(self.weights, shapes):
                if wt.shape != (k * k * cin, cout) or b.shape != (cout,):
                    raise ContractError("checkpoint weights do not match the architecture")
        else:
            if rng is None:
                raise ContractError("either weights or an init rng is required")
            self.weights = []
            for cin, cout in shapes:
                fan_in = k * k * cin
                wt = rng.normal((fan_in, cout)) / math.sqrt(fan_in)
                self.weights.append((wt, np.zeros(cout, dtype=np.float64)))
        if self.param_count > MAX_PARAMS:
            raise ContractError(f"{self.param_count} parameters exceeds the {MAX_PARAMS} cap")

    @property
    def condition_arity(self) -> int:
        return self.config.condition_arity

    @property
    def param_count(self) -> int:
        return sum(wt.size + b.size for wt, b in self.weights)

    # -- parameter vector -----------------------------------------------------

    def flat_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([wt.ravel(), b]) for wt, b in self.weights])

    def set_flat_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.param_count:
            raise ContractError(f"expected {self.param_count} parameters, got {flat.size}")
        i = 0
        out = []
        for wt, b in self.weights:
            nw, nb = wt.size, b.size
            out.append((flat[i:i + nw].reshape(wt.shape).copy(), flat[i + nw:i + nw + nb].copy()))
            i += nw + nb
        self.weights = out

    # -- forward / backward ---------------------------------------------------

    def _features(self, data: np.ndarray, t: float, cond) -> np.ndarray:
        h, w, _ = data.shape
        planes = [data.astype(np.float64, copy=False)]
        ych = np.broadcast_to(((np.arange(h) + 0.5) / h)[:, None, None], (h, w, 1))
        xch = np.broadcast_to(((np.arange(w) + 0.5) / w)[None, :, None], (h, w, 1))
        planes += [ych, xch]
        tfeat = (t, 1.0 - t, math.sin(math.pi * t), math.cos(math.pi * t))
        planes += [np.full((h, w, 1), v, dtype=np.float64) for v in tfeat]
        if self.config.condition_arity:
            planes += [np.full((h, w, 1), float(c), dtype=np.float64) for c in cond]
        return np.concatenate(planes, axis=2)

    def _forward(self, feats: np.ndarray, want_caches: bool = False):
        h, w, _ = feats.shape
        k = self.config.kernel_size
        act = feats
        caches = []
        last = len(self.weights) - 1
        for li, (wt, b) in enumerate(self.weights):
            cols = _im2col(act, k)
            z = cols @ wt + b
            if li == last:
                out = z
                if want_caches:
                    caches.append((cols, None))
            else:
                out = np.tanh(z)
                if want_caches:
                    caches.append((cols, out))
            act = out.reshape(h, w, wt.shape[1])
        return act, caches

    def _backward(self, caches, dout_flat: np.ndarray, h: int, w: int):
        k = self.config.kernel_size
        grads = [None] * len(self.weights)
        d_act = dout_flat  # gradient wrt layer output, flat (h*w, cout)
        for li in range(len(self.weights) - 1, -1, -1):
            cols, post = caches[li]
            dz = d_act if post is None else d_act * (1.0 - post * post)
            wt, _ = self.weights[li]
            grads[li] = (cols.T @ dz, dz.sum(axis=0))
            if li > 0:
                cin = self.weights[li - 1][0].shape[1]
                dcols = dz @ wt.T
                d_act = _col2im(dcols, h, w, cin, k).reshape(h * w, cin)
        return grads

    def _eval(self, x: LatentGrid, t: float, cond) -> LatentGrid:
        if x.d != self.config.grid_channels:
            raise ContractError(f"net is {self.config.grid_channels}-channel, grid has d={x.d}")
        feats = self._features(x.data, t, cond)
        out, _ = self._forward(feats)
        return LatentGrid(out.astype(np.float32), t=x.t)

    def loss_and_grads(self, xt: np.ndarray, t: float, cond, target: np.ndarray):
        """MSE to ``target`` plus parameter gradients, all in float64."""
        h, w, d = xt.shape
        feats = self._features(xt, t, self._check_cond(cond))
        out, caches = self._forward(feats, want_caches=True)
        diff = out - target
        loss = float((diff * diff).mean())
        dout = (2.0 / diff.size) * diff
        grads = self._backward(caches, dout.reshape(h * w, d), h, w)
        return loss, grads


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class TrainResult:
    field: ToyNetField
    losses: tuple[float, ...]       # per-step minibatch losses
    initial_loss: float             # probe-batch loss before training
    final_loss: float               # probe-batch loss after training

    def running(self, window: int = 100) -> tuple[float, float]:
        """Mean loss over the first and last ``window`` steps."""
        w = max(1, min(window, len(self.losses)))
        return float(np.mean(self.losses[:w])), float(np.mean(self.losses[-w:]))


def _probe_batch(dataset: ToyDataset, rng: SeededRng, size: int, hw: tuple[int, int]):
    batch = []
    for _ in range(size):
        x1, cond = dataset.sample(rng, *hw)
        x0 = rng.normal(x1.shape)
        t = float(rng.uniform())
        x1d = x1.data.astype(np.float64)
        batch.append(((1.0 - t) * x0 + t * x1d, t, cond, x1d - x0))
    return batch


def _probe_loss(field: ToyNetField, batch) -> float:
    total = 0.0
    for xt, t, cond, target in batch:
        loss, _ = field.loss_and_grads(xt, t, cond, target)
        total += loss
    return total / len(batch)


def train_toy(
    dataset: ToyDataset,
    steps: int,
    lr: float,
    rng: SeededRng,
    *,
    batch_size: int = 8,
    momentum: float = 0.9,
    clip_norm: float = 1.0,
    sizes: tuple[tuple[int, int], ...] | None = None,
    config: ToyNetConfig | None = None,
    probe_size: int = 16,
) -> TrainResult:
    """Momentum-SGD training against the constant conditional target.

    Each step draws ``batch_size`` scenes (cycling through ``sizes`` so one
    net learns every resolution it will be evaluated at), interpolates noise
    toward them at a uniform time, and regresses the velocity onto
    ``x1 - x0``.  Gradients are clipped to global norm ``clip_norm``.
    Raises :class:`TrainingError` at the first non-finite loss, preserving
    the partial trace.
    """
    steps = int(steps)
    if steps < 1:
        raise ContractError(f"training needs at least one step; got {steps}")
    if config is None:
        config = ToyNetConfig(grid_channels=dataset.d, condition_arity=dataset.condition_arity)
    if sizes is None:
        sizes = ((dataset.h, dataset.w),)
    sizes = tuple((int(h), int(w)) for h, w in sizes)

    field = ToyNetField(config, rng=rng.substream("init"))
    data_rng = rng.substream("data")
    noise_rng = rng.substream("noise")
    time_rng = rng.substream("time")
    probe = _probe_batch(dataset, rng.substream("probe"), probe_size, sizes[0])

    initial_loss = _probe_loss(field, probe)
    velocity = [(np.zeros_like(wt), np.zeros_like(b)) for wt, b in field.weights]
    losses: list[float] = []

    for step in range(steps):
        acc = [(np.zeros_like(wt), np.zeros_like(b)) for wt, b in field.weights]
        batch_loss = 0.0
        for j in range(batch_size):
            h, w = sizes[(step * batch_size + j) % len(sizes)]
            x1, cond = dataset.sample(data_rng, h, w)
            x0 = noise_rng.normal((h, w, dataset.d))
            t = float(time_rng.uniform())
            x1d = x1.data.astype(np.float64)
            xt = (1.0 - t) * x0 + t * x1d
            loss, grads = field.loss_and_grads(xt, t, cond, x1d - x0)
            batch_loss += loss
            acc = [(aw + gw, ab + gb) for (aw, ab), (gw, gb) in zip(acc, grads)]
        batch_loss /= batch_size
        losses.append(batch_loss)
        if not math.isfinite(batch_loss):
            raise TrainingError(f"loss diverged at step {step}", step=step, trace=losses)

        grad_sq = sum(float((gw * gw).sum() + (gb * gb).sum()) for gw, gb in acc)
        grad_norm = math.sqrt(grad_sq) / batch_size
        scale = 1.0 / batch_size
        if grad_norm > clip_norm:
            scale *= clip_norm / grad_norm
        velocity = [
            (momentum * vw + gw * scale, momentum * vb + gb * scale)
            for (vw, vb), (gw, gb) in zip(velocity, acc)
        ]
        field.weights = [
            (wt - lr * vw, b - lr * vb)
            for (wt, b), (vw, vb) in zip(field.weights, velocity)
        ]

    final_loss = _probe_loss(field, probe)
    return TrainResult(field=field, losses=tuple(losses), initial_loss=initial_loss, final_loss=final_loss)


# -- gradient verification -------------------------------------------------------

def grad_check(field: ToyNetField, probe_count: int, rng: SeededRng | None = None, fd_step: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    Probes ``probe_count`` parameters on a fixed synthetic batch; the
    relative error is ``|analytic - fd| / (|fd| + 1e-8)``.  Only trainable
    fields can be checked.
    """
    if not isinstance(field, ToyNetField):
        raise ContractError("grad_check requires a trainable toy-net field")
    rng = rng or SeededRng(0, "grad-check")
    cfg = field.config
    h = w = 8
    xt = rng.normal((h, w, cfg.grid_channels))
    target = rng.normal((h, w, cfg.grid_channels))
    cond = rng.uniform(size=cfg.condition_arity) if cfg.condition_arity else None
    t = 0.37

    _, grads = field.loss_and_grads(xt, t, cond, target)
    flat_grad = np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])
    theta = field.flat_params()
    total = theta.size
    idx = rng.choice(total, size=min(int(probe_count), total), replace=False)

    def loss_at(vec):
        field.set_flat_params(vec)
        loss, _ = field.loss_and_grads(xt, t, cond, target)
        return loss

    worst = 0.0
    try:
        for i in idx:
            bumped = theta.copy()
            bumped[i] = theta[i] + fd_step
            up = loss_at(bumped)
            bumped[i] = theta[i] - fd_step
            down = loss_at(bumped)
            fd = (up - down) / (2.0 * fd_step)
            rel = abs(flat_grad[i] - fd) / (abs(fd) + 1e-8)
            worst = max(worst, rel)
    finally:
        field.set_flat_params(theta)
    return worst


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(field: ToyNetField, path, extra: dict | None = None) -> Path:
    """One file: a JSON header line, then the raw little-endian float32
    parameter vector."""
    cfg = field.config
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "kind": field.kind,
        "grid_channels": cfg.grid_channels,
        "hidden": cfg.hidden,
        "layers": cfg.layers,
        "condition_arity": cfg.condition_arity,
        "kernel_size": cfg.kernel_size,
        "param_count": field.param_count,
        "extra": extra or {},
    }
    payload = field.flat_params().astype("<f4").tobytes()
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + payload
    path = Path(path)
    atomic_write_bytes(path, blob)
    return path


def load_checkpoint(path) -> ToyNetField:
    blob = Path(path).read_bytes()
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise GridError(f"not a {CHECKPOINT_FORMAT} file: {path}")
    cfg = ToyNetConfig(
        grid_channels=header["grid_channels"],
        hidden=header["hidden"],
        layers=header["layers"],
        condition_arity=header["condition_arity"],
        kernel_size=header["kernel_size"],
    )
    flat = np.frombuffer(blob[nl + 1:], dtype="<f4").astype(np.float64)
    if flat.size != header["param_count"]:
        raise GridError(f"checkpoint payload holds {flat.size} values, header promises {header['param_count']}")
    field = ToyNetField(cfg, rng=SeededRng(0, "checkpoint-scratch"))
    field.set_flat_params(flat)
    return field
