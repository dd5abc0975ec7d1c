"""Fixed-point latent correction against a stored-velocity target.

After downsampling at step ``D`` the sampler keeps ``g = op @ v(x_tD, t_D)``
and, for the next ``m + 1`` steps, nudges the low-resolution latent toward
states whose velocity matches that target::

    x <- x + alpha * (g - v(x, t))        (k inner iterations, default 1)

If the current velocity already equals ``g`` the update vanishes, so states
on a commuting trajectory are fixed points.  For the identity field
``v(x) = x`` one update contracts the residual ``g - v(x)`` by exactly
``(1 - alpha)``.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractError, DimensionError
from .fields import VelocityField
from .grid import LatentGrid
from .operators import SelectionOperator, apply

__all__ = ["GuidanceState", "guidance_target", "guidance_step"]


@dataclass(frozen=True, eq=False)
class GuidanceState:
    target: LatentGrid      # op @ v(x_tD, t_D), low-resolution shape
    t_d: float              # time of the stored velocity
    step_index: int         # schedule index D of the downsample step
    m: int                  # guided window covers steps D .. D+m inclusive
    alpha: float
    k: int = 1

    def __post_init__(self):
        if self.alpha < 0:
            raise ContractError(f"guidance step size must be >= 0; got {self.alpha}")
        if self.m < 0:
            raise ContractError(f"guided window length must be >= 0; got m={self.m}")
        if self.k < 1:
            raise ContractError(f"inner iteration count must be >= 1; got k={self.k}")


def guidance_target(op: SelectionOperator, v_stored: LatentGrid) -> LatentGrid:
    """Gather the stored full-resolution velocity through the operator."""
    return apply(op, v_stored)


def guidance_step(
    x_lr: LatentGrid,
    state: GuidanceState,
    field: VelocityField,
    t: float,
    cond=None,
) -> tuple[LatentGrid, int]:
    """Run ``state.k`` fixed-point updates on ``x_lr`` at time ``t``.

    Returns the updated grid and the number of field evaluations used
    (always exactly ``k``).  With ``alpha = 0`` the grid passes through
    bit-for-bit unchanged while the evaluations are still performed and
    counted.
    """
    if x_lr.shape != state.target.shape:
        raise DimensionError(
            f"latent shape {x_lr.shape} != guidance target shape {state.target.shape}"
        )
    if t < state.t_d - 1e-12:
        raise ContractError(f"guidance applies at t >= t_D={state.t_d}; got t={t}")
    x = x_lr
    evals = 0
    for _ in range(state.k):
        v = field.eval(x, t, cond)
        evals += 1
        if state.alpha != 0.0:
            x = LatentGrid(x.data + state.alpha * (state.target.data - v.data), t=x.t)
    return x, evals
