"""Commutator of a selection operator with a velocity field, and candidate
selection by minimum commutator norm.

The commutator ``op @ v(x, t) - v(op @ x, t)`` measures how far the field is
from commuting with the operator: it vanishes identically for position-wise
fields and is generically nonzero otherwise.  Selection reuses one stored
full-resolution velocity for all candidates, so scoring a family costs one
low-resolution evaluation per candidate and no extra full-resolution ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError
from .fields import VelocityField
from .grid import LatentGrid, grid_norm
from .operators import OperatorFamily, SelectionOperator, apply

__all__ = [
    "CommutatorReport",
    "commutator",
    "commutator_norm",
    "commutator_norm_rms",
    "select_operator",
]


@dataclass(frozen=True, eq=False)
class CommutatorReport:
    grid: LatentGrid
    norm: float
    candidate_index: int | None = None
    hr_eval_reused: bool = False


def commutator_norm(values) -> float:
    """Spatial mean of the per-position channel L2 norm."""
    return grid_norm(values)


def commutator_norm_rms(values) -> float:
    """Per-entry RMS alternative, exposed for sensitivity checks only; never
    used for candidate selection."""
    arr = values.data if isinstance(values, LatentGrid) else np.asarray(values)
    arr = arr.astype(np.float64, copy=False)
    return float(np.sqrt((arr * arr).mean()))


def commutator(
    field: VelocityField,
    op: SelectionOperator,
    x: LatentGrid,
    t: float,
    cond=None,
    v_hr: LatentGrid | None = None,
) -> CommutatorReport:
    """``op @ v(x) - v(op @ x)`` at time ``t``.

    Pass ``v_hr`` to reuse an already-computed full-resolution velocity; the
    report's ``hr_eval_reused`` flag records whether that happened.
    """
    if v_hr is not None and v_hr.shape != x.shape:
        raise DimensionError(f"stored velocity shape {v_hr.shape} != state shape {x.shape}")
    reused = v_hr is not None
    if v_hr is None:
        v_hr = field.eval(x, t, cond)
    lhs = apply(op, v_hr)
    rhs = field.eval(apply(op, x), t, cond)
    grid = LatentGrid(lhs.data.astype(np.float64) - rhs.data.astype(np.float64), t=x.t)
    return CommutatorReport(grid=grid, norm=commutator_norm(grid), hr_eval_reused=reused)


def select_operator(
    field: VelocityField,
    family: OperatorFamily,
    x: LatentGrid,
    t: float,
    cond=None,
    v_hr: LatentGrid | None = None,
    *,
    maximize: bool = False,
) -> tuple[SelectionOperator, list[float]]:
    """Candidate with the lowest mean commutator norm, plus all norms.

    The caller must supply ``v_hr = field.eval(x, t, cond)``: the stored
    full-resolution velocity is reused for every candidate, so this performs
    exactly ``len(family)`` low-resolution evaluations and zero
    full-resolution ones.  Ties break toward the lowest candidate index.
    ``maximize=True`` flips the objective (ablation variant).
    """
    if len(family) == 0:
        raise ContractError("candidate family is empty")
    if v_hr is None:
        raise ContractError("select_operator requires the stored velocity v_hr")
    norms = [
        commutator(field, cand, x, t, cond, v_hr=v_hr).norm for cand in family.candidates
    ]
    pick = int(np.argmax(norms) if maximize else np.argmin(norms))
    return family.candidates[pick], norms
