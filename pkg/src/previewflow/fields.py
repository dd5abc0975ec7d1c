"""Velocity fields: the shared evaluation contract plus closed-form fields.

Every field maps ``(grid, t, condition) -> velocity grid`` of identical shape.
The analytic fields here have known algebra (position-wise fields commute
exactly with any row-selection operator; a box blur does not), which makes
them the exact oracles for the sampler and commutator tests.  The trainable
field lives in :mod:`previewflow.toynet`.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, DimensionError
from .grid import LatentGrid

__all__ = [
    "VelocityField",
    "ChannelAffineField",
    "BlurField",
    "cfm_target",
    "cfm_loss",
    "interpolate",
]


class VelocityField:
    """Base class fixing the evaluation contract.

    Subclasses implement ``_eval(x, t, cond)`` where ``cond`` is either None
    (arity 0) or a float64 vector of length ``condition_arity``.
    """

    kind = "abstract"
    condition_arity = 0

    def _check_cond(self, cond):
        if self.condition_arity == 0:
            if cond is not None and len(cond) != 0:
                raise ContractError(f"{self.kind} field takes no condition; got {cond!r}")
            return None
        if cond is None:
            raise ContractError(f"{self.kind} field needs a condition of arity {self.condition_arity}")
        vec = np.asarray(cond, dtype=np.float64).reshape(-1)
        if vec.size != self.condition_arity:
            raise ContractError(
                f"condition arity mismatch: field wants {self.condition_arity}, got {vec.size}"
            )
        return vec

    def eval(self, x: LatentGrid, t: float, cond=None) -> LatentGrid:
        """Velocity at state ``x`` and time ``t``; same shape as ``x``."""
        t = float(t)
        if not 0.0 <= t <= 1.0:
            raise ContractError(f"evaluation time must lie in [0, 1]; got {t}")
        out = self._eval(x, t, self._check_cond(cond))
        if out.shape != x.shape:
            raise ContractError(f"field returned shape {out.shape} for input {x.shape}")
        return out

    def _eval(self, x: LatentGrid, t: float, cond) -> LatentGrid:
        raise NotImplementedError


class ChannelAffineField(VelocityField):
    """Position-wise affine field ``v(x)[y, x] = A @ x[y, x] + b``.

    Mixes channels only, so it commutes exactly with every selection
    operator; ``A = 2I`` gives the plain doubling field ``v(x) = 2x``.
    """

    kind = "channel-affine"

    def __init__(self, matrix, bias=None):
        a = np.asarray(matrix, dtype=np.float32)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ContractError(f"channel matrix must be square; got shape {a.shape}")
        self.matrix = a
        self.bias = np.zeros(a.shape[0], dtype=np.float32) if bias is None else np.asarray(bias, dtype=np.float32)
        if self.bias.shape != (a.shape[0],):
            raise ContractError("bias length must match the channel matrix")

    @classmethod
    def scaling(cls, d: int, factor: float) -> "ChannelAffineField":
        return cls(np.eye(d, dtype=np.float32) * np.float32(factor))

    @classmethod
    def constant(cls, d: int, value) -> "ChannelAffineField":
        bias = np.full(d, value, dtype=np.float32) if np.isscalar(value) else np.asarray(value, dtype=np.float32)
        return cls(np.zeros((d, d), dtype=np.float32), bias)

    def _eval(self, x, t, cond):
        if x.d != self.matrix.shape[0]:
            raise DimensionError(f"field is {self.matrix.shape[0]}-channel, grid has d={x.d}")
        out = x.data @ self.matrix.T + self.bias
        return LatentGrid(out, t=x.t)


class BlurField(VelocityField):
    """Box-blur field: ``v(x)`` averages each channel over a k×k window.

    Not position-wise, so selection operators do not commute with it.
    Padding is ``reflect`` (mirror without repeating the edge) or ``wrap``
    (cyclic; makes the field equivariant under cyclic translations).
    """

    kind = "blur"

    def __init__(self, kernel_size: int = 3, padding: str = "reflect"):
        k = int(kernel_size)
        if k < 1 or k % 2 == 0:
            raise ContractError(f"kernel size must be odd and >= 1; got {k}")
        if padding not in ("reflect", "wrap"):
            raise ContractError(f"padding must be 'reflect' or 'wrap'; got {padding!r}")
        self.kernel_size = k
        self.padding = padding

    def _eval(self, x, t, cond):
        k, p = self.kernel_size, self.kernel_size // 2
        if self.padding == "reflect" and (x.h <= p or x.w <= p):
            raise DimensionError(f"grid {x.h}x{x.w} too small for reflect padding of a {k}x{k} blur")
        padded = np.pad(x.data.astype(np.float64), ((p, p), (p, p), (0, 0)), mode=self.padding)
        acc = np.zeros((x.h, x.w, x.d), dtype=np.float64)
        for dy in range(k):
            for dx in range(k):
                acc += padded[dy:dy + x.h, dx:dx + x.w, :]
        return LatentGrid(acc / (k * k), t=x.t)


def cfm_target(x0: LatentGrid, x1: LatentGrid) -> LatentGrid:
    """Constant conditional target velocity ``x1 - x0`` (independent of t)."""
    if x0.shape != x1.shape:
        raise DimensionError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    return LatentGrid(x1.data.astype(np.float64) - x0.data.astype(np.float64), t=x0.t)


def interpolate(x0: LatentGrid, x1: LatentGrid, t: float) -> LatentGrid:
    """Linear path point ``(1 - t) x0 + t x1`` at time ``t``."""
    if x0.shape != x1.shape:
        raise DimensionError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    t = float(t)
    mix = (1.0 - t) * x0.data.astype(np.float64) + t * x1.data.astype(np.float64)
    return LatentGrid(mix, t=t)


def cfm_loss(field: VelocityField, x0: LatentGrid, x1: LatentGrid, t: float, cond=None) -> float:
    """Mean squared error between the field at the path point and ``x1 - x0``."""
    xt = interpolate(x0, x1, t)
    pred = field.eval(xt, t, cond).data.astype(np.float64)
    diff = pred - (x1.data.astype(np.float64) - x0.data.astype(np.float64))
    return float((diff * diff).mean())
