"""Latent grids, timestep schedules, seeded randomness, and grid file formats.

A :class:`LatentGrid` is the state of the flow ODE: an ``(h, w, d)`` float32
array tagged with its time ``t``.  Time runs from ``t=0`` (pure noise) to
``t=1`` (data), so Euler integration always advances with positive increments
``dt = t[i+1] - t[i]``.

Randomness is counter-based: a :class:`SeededRng` is fully determined by a
64-bit seed plus a named stream, so any draw can be reproduced in isolation
without replaying the draws that preceded it.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionError, GridError, ScheduleError

__all__ = [
    "LatentGrid",
    "TimestepSchedule",
    "SeededRng",
    "gaussian_noise",
    "linear_schedule",
    "grid_norm",
    "save_grid",
    "load_grid",
    "export_image",
    "atomic_write_bytes",
    "atomic_write_text",
]


class LatentGrid:
    """Immutable ``(h, w, d)`` float32 grid at time ``t`` in [0, 1].

    Data is row-major over ``(y, x, channel)``.  All entries must be finite;
    construction copies its input and freezes the copy, so grids can be shared
    freely across threads.
    """

    __slots__ = ("data", "t")

    def __init__(self, data, t: float = 0.0):
        arr = np.array(data, dtype=np.float32, order="C")
        if arr.ndim != 3:
            raise DimensionError(f"grid data must have shape (h, w, d); got {arr.shape}")
        if min(arr.shape) < 1:
            raise DimensionError(f"grid dims must all be >= 1; got {arr.shape}")
        if not np.isfinite(arr).all():
            raise GridError("grid contains NaN or Inf entries")
        t = float(t)
        if math.isnan(t) or not 0.0 <= t <= 1.0:
            raise GridError(f"grid time must lie in [0, 1]; got {t}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "t", t)

    def __setattr__(self, name, value):
        raise AttributeError("LatentGrid is immutable")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data, t: float | None = None) -> "LatentGrid":
        """New grid with replaced data (and optionally a new time)."""
        return LatentGrid(data, self.t if t is None else t)

    def with_t(self, t: float) -> "LatentGrid":
        return LatentGrid(self.data, t)

    def __repr__(self) -> str:
        return f"LatentGrid(h={self.h}, w={self.w}, d={self.d}, t={self.t:g})"


class TimestepSchedule:
    """Strictly increasing times ``t_0 = 0 < t_1 < ... < t_N = 1``."""

    __slots__ = ("ts",)

    def __init__(self, ts: Iterable[float]):
        ts = tuple(float(v) for v in ts)
        if len(ts) < 2:
            raise ScheduleError("schedule needs at least two timesteps")
        if ts[0] != 0.0:
            raise ScheduleError(f"schedule must start at 0; got {ts[0]}")
        if ts[-1] != 1.0:
            raise ScheduleError(f"schedule must end at 1; got {ts[-1]}")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ScheduleError("schedule must be strictly increasing")
        object.__setattr__(self, "ts", ts)

    def __setattr__(self, name, value):
        raise AttributeError("TimestepSchedule is immutable")

    @property
    def n_steps(self) -> int:
        return len(self.ts) - 1

    def deltas(self) -> tuple[float, ...]:
        return tuple(b - a for a, b in zip(self.ts, self.ts[1:]))

    def __len__(self) -> int:
        return len(self.ts)

    def __getitem__(self, i) -> float:
        return self.ts[i]

    def __iter__(self):
        return iter(self.ts)

    def __repr__(self) -> str:
        return f"TimestepSchedule(n_steps={self.n_steps})"


def linear_schedule(n: int) -> TimestepSchedule:
    """Uniform schedule ``t_i = i / n``.

    Raises :class:`ScheduleError` for ``n < 1``.
    """
    n = int(n)
    if n < 1:
        raise ScheduleError(f"schedule needs at least one step; got n={n}")
    return TimestepSchedule(i / n for i in range(n + 1))


def _stream_id(name: str) -> int:
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class SeededRng:
    """Counter-based random source keyed by ``(seed, stream name)``.

    Identical ``(seed, stream)`` pairs produce identical sample sequences on
    every platform.  Derive independent sources with :meth:`substream`; a
    substream never shares state with its parent, so the order in which
    streams are consumed does not matter.
    """

    def __init__(self, seed: int, stream: str = "root"):
        seed = int(seed)
        if not 0 <= seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer; got {seed}")
        self.seed = seed
        self.stream_name = str(stream)
        self.stream_id = _stream_id(self.stream_name)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def substream(self, name: str) -> "SeededRng":
        return SeededRng(self.seed, f"{self.stream_name}/{name}")

    def normal(self, shape, dtype=np.float64) -> np.ndarray:
        return self.generator.standard_normal(size=shape, dtype=dtype)

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None):
        return self.generator.uniform(low, high, size=size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self.generator.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.generator.choice(n, size=size, replace=replace)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream={self.stream_name!r})"


def gaussian_noise(h: int, w: int, d: int, rng: SeededRng) -> LatentGrid:
    """I.i.d. standard-normal grid at ``t = 0``.

    Deterministic for a fixed ``rng`` construction; dims must all be >= 1.
    """
    h, w, d = int(h), int(w), int(d)
    if h < 1 or w < 1 or d < 1:
        raise DimensionError(f"noise dims must all be >= 1; got ({h}, {w}, {d})")
    data = rng.generator.standard_normal(size=(h, w, d), dtype=np.float32)
    return LatentGrid(data, t=0.0)


def grid_norm(values) -> float:
    """Spatial mean of the per-position Euclidean norm over channels.

    Accepts a :class:`LatentGrid` or a bare ``(h, w, d)`` array.  This is the
    norm used for commutator magnitudes and compliance deviations.
    """
    arr = values.data if isinstance(values, LatentGrid) else np.asarray(values)
    arr = arr.astype(np.float64, copy=False)
    if arr.ndim != 3:
        raise DimensionError(f"expected (h, w, d) values; got shape {arr.shape}")
    return float(np.sqrt((arr * arr).sum(axis=2)).mean())


# -- file formats -------------------------------------------------------------

def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_grid(grid: LatentGrid, path) -> Path:
    """Write raw little-endian float32 payload plus a ``.json`` sidecar.

    ``path`` should carry the ``.f32`` suffix; the sidecar replaces it with
    ``.json`` and records ``{h, w, d, t}``.
    """
    path = Path(path)
    payload = np.asarray(grid.data, dtype="<f4").tobytes()
    sidecar = json.dumps({"d": grid.d, "h": grid.h, "t": grid.t, "w": grid.w}, sort_keys=True) + "\n"
    atomic_write_bytes(path, payload)
    atomic_write_text(path.with_suffix(".json"), sidecar)
    return path


def load_grid(path) -> LatentGrid:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    h, w, d = int(meta["h"]), int(meta["w"]), int(meta["d"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != h * w * d:
        raise GridError(f"payload holds {raw.size} values, sidecar promises {h * w * d}")
    return LatentGrid(raw.reshape(h, w, d), t=float(meta["t"]))


def _quantize(grid: LatentGrid) -> np.ndarray:
    # clamp to [0, 1], scale to [0, 255], round half away from zero
    v = np.clip(grid.data.astype(np.float64), 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def _write_ppm(pixels: np.ndarray, path: Path) -> None:
    h, w, d = pixels.shape
    magic = b"P6" if d == 3 else b"P5"
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + pixels.tobytes())


def export_image(grid: LatentGrid, path) -> Path:
    """Export a 1- or 3-channel grid as an 8-bit PNG (PPM when Pillow is
    unavailable or the path ends in ``.ppm``).  Returns the path written."""
    path = Path(path)
    if grid.d not in (1, 3):
        raise DimensionError(f"image export supports d in (1, 3); got d={grid.d}")
    pixels = _quantize(grid)
    if path.suffix.lower() == ".ppm":
        _write_ppm(pixels, path)
        return path
    try:
        from PIL import Image
    except ImportError:
        path = path.with_suffix(".ppm")
        _write_ppm(pixels, path)
        return path
    mode = "RGB" if grid.d == 3 else "L"
    img = Image.fromarray(pixels if grid.d == 3 else pixels[:, :, 0], mode=mode)
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path, format="PNG")
    return path
