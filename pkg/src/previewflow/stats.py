"""Paired statistics: Wilcoxon signed-rank test and the sampler studies.

The test statistic ``W`` is the sum of the ranks of the positive
differences (``after - before``), with average ranks for ties and zero
differences dropped.  For up to 25 usable pairs the p-value is exact: the
null distribution of ``W`` is enumerated over all sign assignments via a
subset-sum convolution on doubled ranks.  Larger samples use the normal
approximation with tie and continuity corrections.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError, DegenerateDataError
from .grid import atomic_write_text
from .metrics import cosine_trace
from .sampler import PreviewConfig, sample_hr, sample_preview

__all__ = [
    "PairedSample",
    "wilcoxon_signed_rank",
    "EXACT_LIMIT",
    "CgStudy",
    "cg_effect_study",
    "CosineStudy",
    "cosine_consistency_study",
]

EXACT_LIMIT = 25
ALTERNATIVES = ("less", "greater", "two-sided")


@dataclass(frozen=True)
class PairedSample:
    before: float
    after: float


def _differences(pairs) -> np.ndarray:
    diffs = []
    for p in pairs:
        if isinstance(p, PairedSample):
            before, after = p.before, p.after
        else:
            before, after = p
        diffs.append(float(after) - float(before))
    d = np.asarray(diffs, dtype=np.float64)
    if d.size == 0:
        raise DegenerateDataError("no paired samples given")
    if not np.isfinite(d).all():
        raise ContractError("paired differences must be finite")
    return d


def _average_ranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_counts(doubled_ranks: np.ndarray) -> np.ndarray:
    # counts[s] = number of sign assignments with doubled W == s
    total = int(doubled_ranks.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted if r else counts * 2.0
    return counts


def _norm_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(pairs, alternative: str = "two-sided", method: str = "auto") -> tuple[float, float]:
    """Signed-rank test on ``after - before`` differences.

    ``alternative="greater"`` tests for systematically positive differences
    (after above before), ``"less"`` the reverse.  Returns ``(W, p)`` where
    ``W`` is the positive-rank sum.  Raises :class:`DegenerateDataError`
    when every difference is zero.
    """
    if alternative not in ALTERNATIVES:
        raise ContractError(f"alternative must be one of {ALTERNATIVES}; got {alternative!r}")
    if method not in ("auto", "exact", "approx"):
        raise ContractError(f"method must be auto, exact, or approx; got {method!r}")
    d = _differences(pairs)
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise DegenerateDataError("all paired differences are zero")
    ranks = _average_ranks(np.abs(d))
    w_pos = float(ranks[d > 0].sum())

    if method == "auto":
        method = "exact" if n <= EXACT_LIMIT else "approx"

    if method == "exact":
        if n > 31:
            raise ContractError(f"exact enumeration supports n <= 31; got n={n}")
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        counts = _exact_counts(doubled)
        total = 2.0 ** n
        w2 = int(round(2.0 * w_pos))
        p_greater = float(counts[w2:].sum()) / total
        p_less = float(counts[:w2 + 1].sum()) / total
    else:
        mu = n * (n + 1) / 4.0
        var = n * (n + 1) * (2 * n + 1) / 24.0
        _, tie_counts = np.unique(np.abs(d), return_counts=True)
        var -= float(((tie_counts ** 3) - tie_counts).sum()) / 48.0
        sigma = math.sqrt(var)
        p_greater = _norm_sf((w_pos - mu - 0.5) / sigma)
        p_less = 1.0 - _norm_sf((w_pos - mu + 0.5) / sigma)

    if alternative == "greater":
        p = p_greater
    elif alternative == "less":
        p = p_less
    else:
        p = min(1.0, 2.0 * min(p_greater, p_less))
    return w_pos, min(1.0, max(0.0, p))


def _safe_test(pairs, alternative) -> tuple[float | None, float, bool]:
    """Wilcoxon with the no-evidence convention: a degenerate comparison
    (all differences zero) reports p = 1 and a flag instead of raising."""
    try:
        w, p = wilcoxon_signed_rank(pairs, alternative)
        return w, p, False
    except DegenerateDataError:
        return None, 1.0, True


# -- correction-effect study -----------------------------------------------------

@dataclass(frozen=True)
class CgStudy:
    rows: tuple[dict, ...]  # per-seed: seed, norm_td, norm_tdm_cg, norm_tdm_nocg
    summary: dict

    def write_csv(self, path) -> None:
        lines = ["seed,norm_td,norm_tdm_cg,norm_tdm_nocg"]
        for r in self.rows:
            lines.append(f"{r['seed']},{r['norm_td']!r},{r['norm_tdm_cg']!r},{r['norm_tdm_nocg']!r}")
        atomic_write_text(path, "\n".join(lines) + "\n")

    def write_json(self, path) -> None:
        atomic_write_text(path, json.dumps(self.summary, sort_keys=True, indent=2) + "\n")


def cg_effect_study(field, config: PreviewConfig, n_seeds: int, *, base_seed: int | None = None) -> CgStudy:
    """Paired commutator norms at t_D vs t_{D+m}, with and without the
    correction, over ``n_seeds`` runs.

    Both arms share the seed, noise, and selected candidate, so the t_D norm
    is common; the study reports signed-rank p-values for the decrease and
    increase hypotheses in each arm plus a two-sided cross-arm comparison.
    """
    if n_seeds < 30:
        raise ContractError(f"the study needs at least 30 seeds; got {n_seeds}")
    base = config.seed if base_seed is None else int(base_seed)
    rows = []
    for i in range(int(n_seeds)):
        cfg_on = replace(config, seed=base + i, cg=True)
        cfg_off = replace(cfg_on, cg=False)
        hr = sample_hr(field, cfg_on)
        on = sample_preview(field, cfg_on, hr.states[0], hr_run=hr)
        off = sample_preview(field, cfg_off, hr.states[0], hr_run=hr)
        rows.append({
            "seed": cfg_on.seed,
            "norm_td": on.commutator_norm_at_td,
            "norm_tdm_cg": on.commutator_norm_at_tdm,
            "norm_tdm_nocg": off.commutator_norm_at_tdm,
        })

    td = [r["norm_td"] for r in rows]
    cg = [r["norm_tdm_cg"] for r in rows]
    nocg = [r["norm_tdm_nocg"] for r in rows]

    tests = {}
    degenerate = {}
    for name, pairs, alt in (
        ("cg_decrease", list(zip(td, cg)), "less"),
        ("cg_increase", list(zip(td, cg)), "greater"),
        ("nocg_decrease", list(zip(td, nocg)), "less"),
        ("nocg_increase", list(zip(td, nocg)), "greater"),
        ("arms_two_sided", list(zip(nocg, cg)), "two-sided"),
    ):
        w, p, degen = _safe_test(pairs, alt)
        tests[f"w_{name}"] = w
        tests[f"p_{name}"] = p
        degenerate[name] = degen

    summary = {
        "metric": "commutator_norm",
        "n": len(rows),
        "mean_td": float(np.mean(td)),
        "mean_tdm_cg": float(np.mean(cg)),
        "mean_tdm_nocg": float(np.mean(nocg)),
        "std_td": float(np.std(td)),
        "std_tdm_cg": float(np.std(cg)),
        "std_tdm_nocg": float(np.std(nocg)),
        "degenerate": degenerate,
        **tests,
    }
    return CgStudy(rows=tuple(rows), summary=summary)


# -- velocity-consistency study ----------------------------------------------------

@dataclass(frozen=True)
class CosineStudy:
    traces: tuple[tuple[float, ...], ...]   # per-seed, index k = 0..span
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def write_csv(self, path) -> None:
        span = len(self.mean) - 1
        lines = ["k,mean_cosine,std_cosine"]
        for k in range(span + 1):
            lines.append(f"{k},{self.mean[k]!r},{self.std[k]!r}")
        atomic_write_text(path, "\n".join(lines) + "\n")


def cosine_consistency_study(field, config: PreviewConfig, n_seeds: int, span: int, *, base_seed: int | None = None) -> CosineStudy:
    """Mean and spread of the velocity cosine similarity between step D and
    the ``span`` following steps, across seeds."""
    base = config.seed if base_seed is None else int(base_seed)
    traces = []
    for i in range(int(n_seeds)):
        cfg = replace(config, seed=base + i)
        run = sample_hr(field, cfg)
        traces.append(tuple(cosine_trace(run, config.downsample_step, span)))
    arr = np.asarray(traces, dtype=np.float64)
    return CosineStudy(
        traces=tuple(traces),
        mean=tuple(float(v) for v in arr.mean(axis=0)),
        std=tuple(float(v) for v in arr.std(axis=0)),
    )
