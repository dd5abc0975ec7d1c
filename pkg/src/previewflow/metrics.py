"""Image similarity and quality measurements.

PSNR compares against a reference at the same size; low-resolution outputs
are scored against the full-resolution result reduced by s×s block
averaging (area resize).  PIQE is a no-reference score built from
mean-subtracted contrast-normalized (MSCN) coefficients: blocks are
classified as spatially active by MSCN variance, active blocks are checked
for flat edge segments (structural artifacts) and center-surround noise,
and the block scores aggregate as ``(sum + C1) / (n_active + C1)``.  Only
orderings of PIQE scores are contractual; the internal constants are
recorded in :data:`PIQE_CONSTANTS` so scores are comparable within this
artifact only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .grid import LatentGrid

__all__ = [
    "MetricReport",
    "psnr",
    "PSNR_CAP_DB",
    "piqe",
    "piqe_report",
    "PiqeReport",
    "PIQE_CONSTANTS",
    "block_average",
    "cosine",
    "cosine_trace",
]

PSNR_CAP_DB = 99.0

PIQE_CONSTANTS = {
    "block_size": 8,
    "activity_threshold": 0.1,   # MSCN block variance above this = spatially active
    "impaired_threshold": 0.1,   # edge segment std below this = flat (artifact)
    "segment_window": 6,
    "noise_weight": 2.0,         # noise sub-score = weight * block variance
    "stabilizer": 1.0,           # C1 in the aggregate
    "mscn_kernel": 7,
    "mscn_sigma": 7.0 / 6.0,
}


@dataclass(frozen=True)
class MetricReport:
    name: str
    value: float
    per_sample: tuple[float, ...] = ()
    tolerance: str = ""


def _as_array(img) -> np.ndarray:
    arr = img.data if isinstance(img, LatentGrid) else np.asarray(img)
    return arr.astype(np.float64, copy=False)


def psnr(a, b, i_max: float = 1.0) -> float:
    """``10 log10(i_max^2 / MSE)`` in dB; identical inputs return the
    99 dB cap."""
    x, y = _as_array(a), _as_array(b)
    if x.shape != y.shape:
        raise DimensionError(f"image shapes differ: {x.shape} vs {y.shape}")
    if not i_max > 0:
        raise ContractError(f"i_max must be positive; got {i_max}")
    mse = float(((x - y) ** 2).mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return 10.0 * math.log10(i_max * i_max / mse)


def block_average(grid, s: int):
    """Area resize: mean over non-overlapping s×s blocks."""
    arr = _as_array(grid)
    if arr.ndim != 3:
        raise DimensionError(f"expected (h, w, d) values; got shape {arr.shape}")
    h, w, d = arr.shape
    if h % s or w % s:
        raise DimensionError(f"block size {s} must divide dims ({h}, {w})")
    down = arr.reshape(h // s, s, w // s, s, d).mean(axis=(1, 3))
    if isinstance(grid, LatentGrid):
        return LatentGrid(down, t=grid.t)
    return down


# -- PIQE ---------------------------------------------------------------------

def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    half = size // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    k = np.outer(g1, g1)
    return k / k.sum()


def _correlate_replicate(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    k = kernel.shape[0]
    p = k // 2
    padded = np.pad(img, p, mode="edge")
    h, w = img.shape
    out = np.zeros_like(img)
    for dy in range(k):
        for dx in range(k):
            out += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def _to_gray255(img) -> np.ndarray:
    arr = _as_array(img)
    if arr.ndim == 2:
        gray = arr
    elif arr.ndim == 3 and arr.shape[2] == 1:
        gray = arr[:, :, 0]
    elif arr.ndim == 3 and arr.shape[2] == 3:
        gray = 0.2989 * arr[:, :, 0] + 0.5870 * arr[:, :, 1] + 0.1140 * arr[:, :, 2]
    else:
        raise DimensionError(f"PIQE expects 1- or 3-channel images; got shape {arr.shape}")
    # fixed scale: nominal [0, 1] input maps onto [0, 255]; no clamping, no
    # max-normalization (so constant shifts cancel in the MSCN transform)
    return gray * 255.0


def mscn_coefficients(gray255: np.ndarray) -> np.ndarray:
    kernel = _gauss_kernel(PIQE_CONSTANTS["mscn_kernel"], PIQE_CONSTANTS["mscn_sigma"])
    mu = _correlate_replicate(gray255, kernel)
    var = _correlate_replicate(gray255 * gray255, kernel) - mu * mu
    sigma = np.sqrt(np.maximum(var, 0.0))
    return (gray255 - mu) / (sigma + 1.0)


def _segment_flat(edge: np.ndarray, window: int, threshold: float) -> bool:
    n_seg = len(edge) - window + 1
    for i in range(max(1, n_seg)):
        seg = edge[i:i + window]
        if np.std(seg, ddof=1) < threshold:
            return True
    return False


def _block_impaired(block: np.ndarray, window: int, threshold: float) -> bool:
    edges = (block[0, :], block[-1, :], block[:, 0], block[:, -1])
    return any(_segment_flat(e, window, threshold) for e in edges)


def _block_noisy(block: np.ndarray, block_var: float) -> bool:
    sigma = math.sqrt(block_var)
    mid = block.shape[1] // 2
    center = np.concatenate([block[:, mid - 1], block[:, mid]])
    surround = np.delete(block, [mid - 1, mid], axis=1)
    c_std = float(np.std(center, ddof=1))
    s_std = float(np.std(surround, ddof=1))
    if s_std == 0.0:
        ratio = 0.0
    else:
        ratio = c_std / s_std
    denom = max(sigma, ratio)
    beta = abs(sigma - ratio) / denom if denom > 0 else 0.0
    return sigma > 2.0 * beta


@dataclass(frozen=True)
class PiqeReport:
    score: float
    n_blocks: int
    n_active: int
    n_impaired: int
    n_noisy: int
    constants: dict


def piqe_report(img, block: int = 8) -> PiqeReport:
    gray = _to_gray255(img)
    h, w = gray.shape
    if h < block or w < block:
        raise DimensionError(f"image {h}x{w} smaller than one {block}x{block} block")
    coeffs = mscn_coefficients(gray)
    coeffs = coeffs[: (h // block) * block, : (w // block) * block]

    activity = PIQE_CONSTANTS["activity_threshold"]
    impaired_thr = PIQE_CONSTANTS["impaired_threshold"]
    window = PIQE_CONSTANTS["segment_window"]
    noise_weight = PIQE_CONSTANTS["noise_weight"]
    c1 = PIQE_CONSTANTS["stabilizer"]

    n_blocks = n_active = n_impaired = n_noisy = 0
    dist_sum = 0.0
    for by in range(0, coeffs.shape[0], block):
        for bx in range(0, coeffs.shape[1], block):
            blk = coeffs[by:by + block, bx:bx + block]
            n_blocks += 1
            block_var = float(np.var(blk, ddof=1))
            if block_var <= activity:
                continue
            n_active += 1
            impaired = _block_impaired(blk, window, impaired_thr)
            noisy = _block_noisy(blk, block_var)
            n_impaired += int(impaired)
            n_noisy += int(noisy)
            if impaired:
                dist_sum += max(0.0, 1.0 - block_var)
            if noisy:
                dist_sum += noise_weight * block_var

    score = (dist_sum + c1) / (n_active + c1)
    return PiqeReport(
        score=float(score),
        n_blocks=n_blocks,
        n_active=n_active,
        n_impaired=n_impaired,
        n_noisy=n_noisy,
        constants=dict(PIQE_CONSTANTS, block_size=block),
    )


def piqe(img, block: int = 8) -> float:
    """No-reference quality score; a constant image scores exactly 1."""
    return piqe_report(img, block).score


# -- velocity consistency -------------------------------------------------------

def cosine(a, b) -> float:
    """Cosine similarity of flattened grids; identical objects are exactly 1."""
    if a is b:
        return 1.0
    x, y = _as_array(a).ravel(), _as_array(b).ravel()
    if x.shape != y.shape:
        raise DimensionError("cosine needs equally-shaped inputs")
    nx, ny = float(np.linalg.norm(x)), float(np.linalg.norm(y))
    if nx == 0.0 or ny == 0.0:
        return 0.0
    return float(np.dot(x, y) / (nx * ny))


def cosine_trace(hr_run, d_index: int, span: int) -> list[float]:
    """Cosine similarity between the velocity at step ``d_index`` and the
    velocities ``k`` steps later, for ``k = 0 .. span`` (entry 0 is 1).

    Requires a full-resolution run with retained velocities.
    """
    if hr_run.velocities is None:
        raise ContractError("cosine_trace needs a run with retained velocities")
    n_vel = len(hr_run.velocities)
    if d_index < 0 or d_index + span > n_vel - 1:
        raise ContractError(
            f"span {span} from step {d_index} runs past the {n_vel} retained velocities"
        )
    base = hr_run.velocities[d_index]
    out = [1.0]
    for k in range(1, span + 1):
        out.append(cosine(base, hr_run.velocities[d_index + k]))
    return out
