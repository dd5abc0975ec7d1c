"""Euler integration of the flow ODE, preview generation, and baselines.

The preview pipeline integrates at full resolution up to step ``D``, stores
the velocity there, picks the downsampling candidate with the smallest
commutator, replaces the state by its gathered low-resolution version, and
continues at low resolution — applying the fixed-point correction for steps
``D .. D+m`` inclusive.

Cost accounting charges one unit per full-resolution evaluation and scales
other sizes by pixel count (``linear``) or its square (``quadratic``).  At
step ``D`` both the stored full-resolution evaluation and the ``s**2``
candidate evaluations are charged; every guided step costs ``k`` correction
evaluations plus the Euler evaluation on the corrected latent.  Measurement
work (the paired full-resolution trajectory used for commutator tracking and
compliance) is counted separately and never enters the cost.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field as dataclass_field, replace
from typing import Iterable

import numpy as np

from .commutator import commutator_norm, select_operator
from .errors import ContractError, DimensionError, IntegrationError
from .fields import VelocityField
from .grid import LatentGrid, SeededRng, TimestepSchedule, gaussian_noise, grid_norm, linear_schedule
from .guidance import GuidanceState, guidance_step, guidance_target
from .operators import (
    SelectionOperator,
    apply,
    build_family,
    nearest_operator,
    refresh_duplicates,
)

__all__ = [
    "PreviewConfig",
    "RunReport",
    "HRRun",
    "EvalMeter",
    "sample_hr",
    "sample_preview",
    "sample_baseline",
    "sample_manipulated",
    "modeled_cost",
    "modeled_speedup",
    "BASELINE_KINDS",
    "SELECTION_MODES",
]

SELECTION_MODES = ("argmin", "argmax", "random", "nearest")
BASELINE_KINDS = ("reduced-nfe", "direct-lr", "naive-down")
COST_MODELS = ("linear", "quadratic")


@dataclass(frozen=True)
class PreviewConfig:
    """Knobs of one preview run; defaults follow the reference setting
    N=30, D=10, m=5, alpha=0.04, s=2."""

    h: int = 16
    w: int = 16
    d: int = 3
    n_steps: int = 30
    downsample_step: int = 10
    scale: int = 2
    m: int = 5
    alpha: float = 0.04
    k: int = 1
    seed: int = 0
    selection: str = "argmin"
    family_mode: str = "per-block"
    cg: bool = True
    condition: tuple[float, ...] | None = None
    cost_model: str = "linear"
    schedule: TimestepSchedule | None = None
    reduced_nfe: int = 20

    def __post_init__(self):
        if self.schedule is None:
            object.__setattr__(self, "schedule", linear_schedule(self.n_steps))
        if self.schedule.n_steps != self.n_steps:
            raise ContractError(
                f"schedule has {self.schedule.n_steps} steps, config says {self.n_steps}"
            )
        if not 0 < self.downsample_step < self.n_steps:
            raise ContractError(
                f"downsample step must satisfy 0 < D < N; got D={self.downsample_step}, N={self.n_steps}"
            )
        if self.downsample_step + self.m + 1 > self.n_steps:
            raise ContractError(
                f"guided window needs D + m + 1 <= N; got D={self.downsample_step}, m={self.m}, N={self.n_steps}"
            )
        if self.scale < 2:
            raise ContractError(f"scale must be >= 2; got {self.scale}")
        if self.h % self.scale or self.w % self.scale:
            raise ContractError(
                f"scale {self.scale} must divide grid dims ({self.h}, {self.w})"
            )
        if self.m < 0 or self.k < 1 or self.alpha < 0:
            raise ContractError("need m >= 0, k >= 1, alpha >= 0")
        if self.selection not in SELECTION_MODES:
            raise ContractError(f"selection must be one of {SELECTION_MODES}; got {self.selection!r}")
        if self.family_mode not in ("per-block", "shared"):
            raise ContractError(f"family mode must be 'per-block' or 'shared'; got {self.family_mode!r}")
        if self.cost_model not in COST_MODELS:
            raise ContractError(f"cost model must be one of {COST_MODELS}; got {self.cost_model!r}")
        if not 0 <= self.downsample_step + self.m <= self.n_steps - 1:
            raise ContractError("guided window runs past the schedule")
        if self.condition is not None:
            object.__setattr__(self, "condition", tuple(float(c) for c in self.condition))


class EvalMeter:
    """Counts charged field evaluations per grid size and converts them to
    cost units relative to the reference (full) resolution."""

    def __init__(self, ref_hw: tuple[int, int], cost_model: str = "linear"):
        self.ref_hw = (int(ref_hw[0]), int(ref_hw[1]))
        self.cost_model = cost_model
        self.counts: dict[tuple[int, int], int] = {}
        self.measure_evals = 0

    def charged_eval(self, field: VelocityField, x: LatentGrid, t: float, cond) -> LatentGrid:
        key = (x.h, x.w)
        self.counts[key] = self.counts.get(key, 0) + 1
        return field.eval(x, t, cond)

    def charge(self, hw: tuple[int, int], n: int = 1) -> None:
        self.counts[hw] = self.counts.get(hw, 0) + n

    def measured_eval(self, field: VelocityField, x: LatentGrid, t: float, cond) -> LatentGrid:
        self.measure_evals += 1
        return field.eval(x, t, cond)

    def _ratio(self, hw: tuple[int, int]) -> float:
        r = (hw[0] * hw[1]) / (self.ref_hw[0] * self.ref_hw[1])
        return r if self.cost_model == "linear" else r * r

    @property
    def full_evals(self) -> int:
        return self.counts.get(self.ref_hw, 0)

    @property
    def reduced_evals(self) -> int:
        return sum(n for hw, n in self.counts.items() if hw != self.ref_hw)

    def cost_units(self) -> float:
        return float(sum(n * self._ratio(hw) for hw, n in sorted(self.counts.items())))


@dataclass(eq=False)
class RunReport:
    method: str
    seed: int
    final: LatentGrid
    h: int
    w: int
    d: int
    n_steps: int
    cost_model: str
    hr_evals: int
    lr_evals: int
    cost_units: float
    speedup_vs_full: float
    measure_evals: int = 0
    downsample_step: int | None = None
    scale: int | None = None
    m: int | None = None
    alpha: float | None = None
    k: int | None = None
    cg: bool | None = None
    selection: str | None = None
    family_mode: str | None = None
    selected_candidate: int | None = None
    candidate_norms: tuple[float, ...] | None = None
    commutator_norm_at_td: float | None = None
    commutator_norm_at_tdm: float | None = None
    guided_updates: int = 0           # literal window: steps D .. D+m
    guided_updates_after_td: int = 0  # prose count: steps strictly after t_D
    compliance_deviation: float | None = None
    compliance_relative: float | None = None
    stream_ids: dict = dataclass_field(default_factory=dict)
    wall_time_s: float = 0.0

    def to_json_dict(self, deterministic: bool = False) -> dict:
        doc = {
            "method": self.method,
            "seed": self.seed,
            "grid": {"h": self.h, "w": self.w, "d": self.d},
            "n_steps": self.n_steps,
            "cost_model": self.cost_model,
            "hr_evals": self.hr_evals,
            "lr_evals": self.lr_evals,
            "measure_evals": self.measure_evals,
            "cost_units": self.cost_units,
            "speedup_vs_full": self.speedup_vs_full,
            "downsample_step": self.downsample_step,
            "scale": self.scale,
            "m": self.m,
            "alpha": self.alpha,
            "k": self.k,
            "cg": self.cg,
            "selection": self.selection,
            "family_mode": self.family_mode,
            "selected_candidate": self.selected_candidate,
            "candidate_norms": list(self.candidate_norms) if self.candidate_norms is not None else None,
            "commutator_norm_at_td": self.commutator_norm_at_td,
            "commutator_norm_at_tdm": self.commutator_norm_at_tdm,
            "guided_updates": self.guided_updates,
            "guided_updates_after_td": self.guided_updates_after_td,
            "compliance_deviation": self.compliance_deviation,
            "compliance_relative": self.compliance_relative,
            "stream_ids": dict(sorted(self.stream_ids.items())),
            "wall_time_s": 0.0 if deterministic else self.wall_time_s,
        }
        return doc


@dataclass(eq=False)
class HRRun:
    """Full-resolution run with retained states (and velocities when kept)."""
    final: LatentGrid
    states: tuple[LatentGrid, ...]
    velocities: tuple[LatentGrid, ...] | None
    report: RunReport


def _noise_for(config: PreviewConfig) -> tuple[LatentGrid, dict]:
    rng = SeededRng(config.seed, "noise/x0")
    return gaussian_noise(config.h, config.w, config.d, rng), {"noise/x0": rng.stream_id}


def _euler_advance(x: LatentGrid, v: LatentGrid, t_next: float, step: int) -> LatentGrid:
    data = x.data + np.float32(t_next - x.t) * v.data
    if not np.isfinite(data).all():
        raise IntegrationError(f"state became non-finite at step {step}", step=step)
    return LatentGrid(data, t=t_next)


def sample_hr(
    field: VelocityField,
    config: PreviewConfig,
    x0: LatentGrid | None = None,
    *,
    n_steps: int | None = None,
    retain_trajectory: bool = True,
    method: str = "hr",
) -> HRRun:
    """Plain Euler integration from noise to data at the grid's own size.

    ``n_steps`` overrides the config's schedule with a uniform one (the
    reduced-evaluation baseline).  Charges one evaluation per step.
    """
    started = time.perf_counter()
    streams: dict = {}
    if x0 is None:
        x0, streams = _noise_for(config)
    if x0.t != 0.0:
        raise ContractError(f"integration starts from noise at t=0; got t={x0.t}")
    sched = config.schedule if n_steps is None else linear_schedule(n_steps)
    n = sched.n_steps
    meter = EvalMeter((config.h, config.w), config.cost_model)
    cond = config.condition

    x = x0
    states = [x]
    velocities = []
    for i in range(n):
        v = meter.charged_eval(field, x, sched[i], cond)
        x = _euler_advance(x, v, sched[i + 1], i)
        if retain_trajectory:
            states.append(x)
            velocities.append(v)
    cost = meter.cost_units()
    report = RunReport(
        method=method,
        seed=config.seed,
        final=x,
        h=x.h, w=x.w, d=x.d,
        n_steps=n,
        cost_model=config.cost_model,
        hr_evals=meter.full_evals,
        lr_evals=meter.reduced_evals,
        cost_units=cost,
        speedup_vs_full=config.n_steps / cost,
        stream_ids=streams,
        wall_time_s=time.perf_counter() - started,
    )
    return HRRun(
        final=x,
        states=tuple(states) if retain_trajectory else (x0, x),
        velocities=tuple(velocities) if retain_trajectory else None,
        report=report,
    )


def _hr_states_and_velocity(field, config, x0, hr_run, meter, step):
    """State (and velocity) of the paired full-resolution trajectory at
    ``step``; uses the supplied run or integrates on the measurement budget."""
    if hr_run is not None:
        if hr_run.states[0].data.tobytes() != x0.data.tobytes():
            raise ContractError("paired full-resolution run starts from different noise")
        state = hr_run.states[step]
        if hr_run.velocities is not None and step < len(hr_run.velocities):
            return state, hr_run.velocities[step]
        return state, None
    sched = config.schedule
    x = x0
    for i in range(step):
        v = meter.measured_eval(field, x, sched[i], config.condition)
        x = _euler_advance(x, v, sched[i + 1], i)
    return x, None


def sample_preview(
    field: VelocityField,
    config: PreviewConfig,
    x0: LatentGrid | None = None,
    *,
    hr_run: HRRun | None = None,
    measure: bool = True,
    method: str = "preview",
) -> RunReport:
    """Preview generation: full-resolution prefix, candidate selection and
    downsampling at step ``D``, guided low-resolution continuation.

    With ``measure=True`` the report also carries the commutator norms at
    ``t_D`` and ``t_{D+m}`` and the final compliance deviation, computed
    against the paired full-resolution trajectory (``hr_run`` when given,
    otherwise integrated on the separate measurement budget).
    """
    return _preview_core(field, config, x0, hr_run=hr_run, measure=measure, method=method)


def _preview_core(
    field,
    config,
    x0,
    *,
    hr_run=None,
    measure=True,
    method="preview",
    operator: SelectionOperator | None = None,
    apply_step: int | None = None,
):
    started = time.perf_counter()
    streams: dict = {}
    if x0 is None:
        x0, streams = _noise_for(config)
    if x0.t != 0.0:
        raise ContractError(f"preview starts from noise at t=0; got t={x0.t}")
    if (x0.h, x0.w, x0.d) != (config.h, config.w, config.d):
        raise DimensionError(
            f"noise shape {x0.shape} does not match config grid ({config.h}, {config.w}, {config.d})"
        )

    manipulated = operator is not None
    if manipulated and (operator.out_h, operator.out_w) != (operator.in_h, operator.in_w):
        raise ContractError("manipulation operators must preserve the grid size")
    d_step = config.downsample_step if apply_step is None else int(apply_step)
    if not 0 < d_step < config.n_steps or d_step + config.m + 1 > config.n_steps:
        raise ContractError(f"operator step {d_step} violates the window constraints")

    sched = config.schedule
    n = config.n_steps
    cond = config.condition
    meter = EvalMeter((config.h, config.w), config.cost_model)
    base_rng = SeededRng(config.seed, "sampler")

    needs_vhr = config.cg or (not manipulated and config.selection in ("argmin", "argmax"))
    needs_vhr = needs_vhr or (manipulated and operator.needs_noise_refresh)

    x = x0
    v_hr = None
    dstar = operator
    norms = None
    sel_index = None
    gstate = None
    td_norm = None
    tdm_norm = None
    x_at_tdm = None
    guided = 0

    for i in range(n):
        t_i = sched[i]
        if i == d_step:
            if needs_vhr:
                v_hr = meter.charged_eval(field, x, t_i, cond)
            if not manipulated:
                if config.selection in ("argmin", "argmax", "random"):
                    fam_rng = base_rng.substream("family")
                    streams["sampler/family"] = fam_rng.stream_id
                    family = build_family(config.h, config.w, config.scale, fam_rng, mode=config.family_mode)
                    if config.selection == "random":
                        pick_rng = base_rng.substream("selection")
                        streams["sampler/selection"] = pick_rng.stream_id
                        sel_index = int(pick_rng.integers(len(family)))
                        dstar = family.candidates[sel_index]
                    else:
                        dstar, norms = select_operator(
                            field, family, x, t_i, cond, v_hr,
                            maximize=config.selection == "argmax",
                        )
                        meter.charge((config.h // config.scale, config.w // config.scale), len(family))
                        sel_index = family.candidates.index(dstar)
                        td_norm = norms[sel_index]
                else:
                    dstar = nearest_operator(config.h, config.w, config.scale)
            if measure and td_norm is None:
                vh = v_hr if v_hr is not None else meter.measured_eval(field, x, t_i, cond)
                v_lr = meter.measured_eval(field, apply(dstar, x), t_i, cond)
                td_norm = commutator_norm(apply(dstar, vh).data.astype(np.float64) - v_lr.data.astype(np.float64))
            if manipulated and dstar.needs_noise_refresh:
                warp_rng = base_rng.substream("warp-refresh")
                streams["sampler/warp-refresh"] = warp_rng.stream_id
                x = refresh_duplicates(dstar, x, v_hr, warp_rng)
            else:
                x = apply(dstar, x)
            if config.cg:
                gstate = GuidanceState(
                    target=guidance_target(dstar, v_hr),
                    t_d=t_i,
                    step_index=d_step,
                    m=config.m,
                    alpha=config.alpha,
                    k=config.k,
                )
        if i == d_step + config.m:
            x_at_tdm = x
        if gstate is not None and d_step <= i <= d_step + config.m:
            x, used = guidance_step(x, gstate, field, t_i, cond)
            meter.charge((x.h, x.w), used)
            guided += 1
        v = meter.charged_eval(field, x, t_i, cond)
        x = _euler_advance(x, v, sched[i + 1], i)

    # measurement against the paired full-resolution trajectory
    compliance = compliance_rel = None
    if measure:
        hr_state_tdm, hr_v_tdm = _hr_states_and_velocity(
            field, config, x0, hr_run, meter, d_step + config.m
        )
        if hr_run is None:
            # finish the measurement trajectory to the endpoint
            xm = hr_state_tdm
            for i in range(d_step + config.m, n):
                vm = meter.measured_eval(field, xm, sched[i], cond)
                xm = _euler_advance(xm, vm, sched[i + 1], i)
            hr_final = xm
        else:
            hr_final = hr_run.final
        if hr_v_tdm is None:
            hr_v_tdm = meter.measured_eval(field, hr_state_tdm, sched[d_step + config.m], cond)
        v_lr_tdm = meter.measured_eval(field, x_at_tdm, sched[d_step + config.m], cond)
        tdm_norm = commutator_norm(
            apply(dstar, hr_v_tdm).data.astype(np.float64) - v_lr_tdm.data.astype(np.float64)
        )
        gathered_final = apply(dstar, hr_final)
        compliance = grid_norm(x.data.astype(np.float64) - gathered_final.data.astype(np.float64))
        ref_norm = grid_norm(hr_final)
        compliance_rel = compliance / ref_norm if ref_norm > 0 else float("inf") if compliance > 0 else 0.0

    cost = meter.cost_units()
    return RunReport(
        method=method,
        seed=config.seed,
        final=x,
        h=x.h, w=x.w, d=x.d,
        n_steps=n,
        cost_model=config.cost_model,
        hr_evals=meter.full_evals,
        lr_evals=meter.reduced_evals,
        measure_evals=meter.measure_evals,
        cost_units=cost,
        speedup_vs_full=n / cost,
        downsample_step=d_step,
        scale=None if manipulated else config.scale,
        m=config.m,
        alpha=config.alpha,
        k=config.k,
        cg=config.cg,
        selection=None if manipulated else config.selection,
        family_mode=None if manipulated else config.family_mode,
        selected_candidate=sel_index,
        candidate_norms=tuple(norms) if norms is not None else None,
        commutator_norm_at_td=td_norm,
        commutator_norm_at_tdm=tdm_norm,
        guided_updates=guided,
        guided_updates_after_td=max(0, guided - 1),
        compliance_deviation=compliance,
        compliance_relative=compliance_rel,
        stream_ids=streams,
        wall_time_s=time.perf_counter() - started,
    )


def sample_baseline(
    kind: str,
    field: VelocityField,
    config: PreviewConfig,
    x0: LatentGrid | None = None,
    *,
    hr_run: HRRun | None = None,
    measure: bool = True,
    n_reduced: int | None = None,
) -> RunReport:
    """The three reference baselines.

    ``reduced-nfe``: full-resolution run on a shorter uniform schedule.
    ``direct-lr``: full run at low resolution, seeded with the strided
    (top-left) subsample of the full-resolution noise.
    ``naive-down``: the preview pipeline with the nearest operator, no
    selection and no correction.
    """
    if kind not in BASELINE_KINDS:
        raise ContractError(f"baseline kind must be one of {BASELINE_KINDS}; got {kind!r}")
    if x0 is None:
        x0, _ = _noise_for(config)
    if kind == "reduced-nfe":
        n = config.reduced_nfe if n_reduced is None else int(n_reduced)
        if not 0 < n < config.n_steps:
            raise ContractError(f"reduced step count must satisfy 0 < N' < N; got {n}")
        run = sample_hr(field, config, x0, n_steps=n, retain_trajectory=False, method="reduced-nfe")
        return run.report
    if kind == "direct-lr":
        strided = nearest_operator(config.h, config.w, config.scale)
        x0_lr = apply(strided, x0)
        run = sample_hr(field, config, x0_lr, retain_trajectory=False, method="direct-lr")
        return run.report
    naive = replace(config, selection="nearest", cg=False)
    return _preview_core(
        field, naive, x0, hr_run=hr_run, measure=measure, method="naive-down"
    )


def sample_manipulated(
    field: VelocityField,
    config: PreviewConfig,
    op: SelectionOperator,
    t_m_index: int,
    x0: LatentGrid | None = None,
    *,
    hr_run: HRRun | None = None,
    measure: bool = True,
) -> RunReport:
    """Sampling with a same-size manipulation (translate or warp) applied at
    step ``t_m_index``; the correction target becomes ``op @ v_stored`` and
    duplicating warps get fresh decorrelation noise at application time."""
    if op.kind not in ("translate", "warp"):
        raise ContractError(f"manipulation requires a translate or warp operator; got {op.kind!r}")
    if (op.in_h, op.in_w) != (config.h, config.w):
        raise DimensionError("operator size does not match the configured grid")
    return _preview_core(
        field, config, x0,
        hr_run=hr_run, measure=measure, method=f"manipulated-{op.kind}",
        operator=op, apply_step=t_m_index,
    )


def modeled_cost(
    n_steps: int,
    downsample_step: int,
    m: int,
    scale: int,
    *,
    k: int = 1,
    cg: bool = True,
    selection: str = "argmin",
    cost_model: str = "linear",
) -> float:
    """Closed-form cost (full-resolution evaluation units) of a preview run.

    Mirrors the meter exactly: ``D`` prefix evaluations, one stored
    evaluation when the method needs it, ``s**2`` selection evaluations for
    the scored variants, ``(m+1)k`` correction evaluations when enabled, and
    ``N - D`` low-resolution Euler evaluations.
    """
    ratio = 1.0 / (scale * scale)
    if cost_model == "quadratic":
        ratio = ratio * ratio
    needs_vhr = cg or selection in ("argmin", "argmax")
    full = downsample_step + (1 if needs_vhr else 0)
    reduced = (n_steps - downsample_step) + ((m + 1) * k if cg else 0)
    if selection in ("argmin", "argmax"):
        reduced += scale * scale
    return full + reduced * ratio


def modeled_speedup(n_steps: int, downsample_step: int, m: int, scale: int, **kwargs) -> float:
    return n_steps / modeled_cost(n_steps, downsample_step, m, scale, **kwargs)
