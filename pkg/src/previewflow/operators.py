"""Row-selection operators: downsampling candidates, nearest, translate, warp.

Every operator assigns exactly one source position to each output position,
so in matrix view each row holds a single 1.  Application is therefore a pure
gather; the dense 0/1 matrix is materialized only by :func:`dense_matrix`
for oracle tests.

A scale-``s`` downsampling family holds ``s**2`` mutually exclusive
candidates: within every ``s x s`` block the candidates' source positions
form a permutation of the block, so no two candidates ever share a source.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError, DivisibilityError
from .grid import LatentGrid, SeededRng

__all__ = [
    "SelectionOperator",
    "OperatorFamily",
    "build_family",
    "family_from_permutations",
    "apply",
    "nearest_operator",
    "translate_operator",
    "warp_operator",
    "refresh_duplicates",
    "dense_matrix",
    "operator_to_json",
    "operator_from_json",
]

KINDS = ("downsample", "nearest-down", "translate", "warp")


@dataclass(frozen=True, eq=False)
class SelectionOperator:
    kind: str
    in_h: int
    in_w: int
    out_h: int
    out_w: int
    scale: int
    source_y: np.ndarray  # (out_h, out_w) int64
    source_x: np.ndarray
    # groups of output positions sharing one source; members row-major,
    # first member is the canonical representative (warp only)
    duplication_map: tuple[tuple[tuple[int, int], ...], ...] = ()
    stream_id: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown operator kind {self.kind!r}")
        sy = np.ascontiguousarray(np.asarray(self.source_y, dtype=np.int64))
        sx = np.ascontiguousarray(np.asarray(self.source_x, dtype=np.int64))
        if sy.shape != (self.out_h, self.out_w) or sx.shape != (self.out_h, self.out_w):
            raise DimensionError("source index maps must have the output shape")
        if sy.min() < 0 or sy.max() >= self.in_h or sx.min() < 0 or sx.max() >= self.in_w:
            raise ContractError("source index out of input bounds")
        sy.flags.writeable = False
        sx.flags.writeable = False
        object.__setattr__(self, "source_y", sy)
        object.__setattr__(self, "source_x", sx)

    @property
    def needs_noise_refresh(self) -> bool:
        """True when some outputs duplicate a source and must be decorrelated."""
        return len(self.duplication_map) > 0

    def duplicate_outputs(self) -> tuple[tuple[int, int], ...]:
        """Non-canonical duplicated output positions, in refresh order."""
        out = []
        for group in self.duplication_map:
            out.extend(group[1:])
        return tuple(out)


@dataclass(frozen=True, eq=False)
class OperatorFamily:
    scale: int
    candidates: tuple[SelectionOperator, ...]
    permutations: np.ndarray  # (h/s, w/s, s*s) int64
    mode: str = "per-block"

    def __len__(self) -> int:
        return len(self.candidates)


def _check_divisible(h: int, w: int, s: int) -> None:
    if s < 2:
        raise ContractError(f"downsampling scale must be >= 2; got {s}")
    if h % s or w % s:
        raise DivisibilityError(f"scale {s} must divide grid dims ({h}, {w})")


def _candidate_from_offsets(h, w, s, offsets, k, stream_id=None) -> SelectionOperator:
    bh, bw = h // s, w // s
    by = np.arange(bh)[:, None] * s
    bx = np.arange(bw)[None, :] * s
    return SelectionOperator(
        kind="downsample",
        in_h=h, in_w=w, out_h=bh, out_w=bw, scale=s,
        source_y=by + offsets // s,
        source_x=bx + offsets % s,
        stream_id=stream_id,
    )


def family_from_permutations(h: int, w: int, s: int, perms, mode: str = "per-block") -> OperatorFamily:
    """Family from explicit per-block permutations ``perms[(i, j)] in S(s*s)``.

    ``perms`` has shape ``(h/s, w/s, s*s)``; candidate ``k`` sources block
    ``(i, j)`` at flat in-block position ``perms[i, j, k]``.  Identity
    permutations make candidate 0 the plain top-left strided subsampling.
    """
    _check_divisible(h, w, s)
    bh, bw = h // s, w // s
    perms = np.ascontiguousarray(np.asarray(perms, dtype=np.int64))
    if perms.shape != (bh, bw, s * s):
        raise DimensionError(f"permutations must have shape {(bh, bw, s * s)}; got {perms.shape}")
    if not (np.sort(perms, axis=2) == np.arange(s * s)).all():
        raise ContractError("each block entry must be a permutation of 0..s*s-1")
    perms.flags.writeable = False
    candidates = tuple(
        _candidate_from_offsets(h, w, s, perms[:, :, k], k) for k in range(s * s)
    )
    return OperatorFamily(scale=s, candidates=candidates, permutations=perms, mode=mode)


def build_family(h: int, w: int, s: int, rng: SeededRng, mode: str = "per-block") -> OperatorFamily:
    """Random candidate family: one uniform permutation per block.

    ``mode="per-block"`` draws an independent permutation for every block;
    ``mode="shared"`` draws a single permutation used by all blocks.
    Deterministic for a fixed rng.
    """
    _check_divisible(h, w, s)
    if mode not in ("per-block", "shared"):
        raise ContractError(f"family mode must be 'per-block' or 'shared'; got {mode!r}")
    bh, bw = h // s, w // s
    if mode == "shared":
        perm = rng.permutation(s * s)
        perms = np.broadcast_to(perm, (bh, bw, s * s)).copy()
    else:
        perms = np.stack(
            [rng.permutation(s * s) for _ in range(bh * bw)]
        ).reshape(bh, bw, s * s)
    family = family_from_permutations(h, w, s, perms, mode=mode)
    for cand in family.candidates:
        object.__setattr__(cand, "stream_id", rng.stream_id)
    return family


def nearest_operator(h: int, w: int, s: int) -> SelectionOperator:
    """Top-left strided subsampling: output ``(i, j)`` sources ``(i*s, j*s)``."""
    _check_divisible(h, w, s)
    bh, bw = h // s, w // s
    return SelectionOperator(
        kind="nearest-down",
        in_h=h, in_w=w, out_h=bh, out_w=bw, scale=s,
        source_y=np.arange(bh)[:, None].repeat(bw, axis=1) * s,
        source_x=np.arange(bw)[None, :].repeat(bh, axis=0) * s,
    )


def translate_operator(h: int, w: int, dy: int, dx: int) -> SelectionOperator:
    """Cyclic shift: output ``(y, x)`` sources ``((y - dy) % h, (x - dx) % w)``.

    Bijective, so it never correlates noise.
    """
    ys = (np.arange(h)[:, None] - int(dy)) % h
    xs = (np.arange(w)[None, :] - int(dx)) % w
    return SelectionOperator(
        kind="translate",
        in_h=h, in_w=w, out_h=h, out_w=w, scale=1,
        source_y=np.broadcast_to(ys, (h, w)).copy(),
        source_x=np.broadcast_to(xs, (h, w)).copy(),
    )


def warp_operator(h: int, w: int, index_map) -> SelectionOperator:
    """Arbitrary same-size gather from an ``(h, w, 2)`` map of (y, x) sources.

    Outputs that share a source are recorded in the duplication map; such
    operators require noise decorrelation when applied to a latent state
    (see :func:`refresh_duplicates`).
    """
    idx = np.asarray(index_map, dtype=np.int64)
    if idx.shape != (h, w, 2):
        raise DimensionError(f"index map must have shape {(h, w, 2)}; got {idx.shape}")
    sy, sx = idx[:, :, 0], idx[:, :, 1]
    if sy.min() < 0 or sy.max() >= h or sx.min() < 0 or sx.max() >= w:
        raise ContractError("warp source index out of bounds")
    flat = sy * w + sx
    groups = []
    order = np.argsort(flat.ravel(), kind="stable")
    sources = flat.ravel()[order]
    start = 0
    for i in range(1, len(order) + 1):
        if i == len(order) or sources[i] != sources[start]:
            if i - start > 1:
                members = sorted(
                    (int(o // w), int(o % w)) for o in order[start:i]
                )
                groups.append(tuple(members))
            start = i
    groups.sort(key=lambda g: (idx[g[0][0], g[0][1], 0], idx[g[0][0], g[0][1], 1]))
    return SelectionOperator(
        kind="warp",
        in_h=h, in_w=w, out_h=h, out_w=w, scale=1,
        source_y=sy, source_x=sx,
        duplication_map=tuple(groups),
    )


def apply(op: SelectionOperator, x: LatentGrid) -> LatentGrid:
    """Gather ``x`` through the operator; channels and time carry over."""
    if (op.in_h, op.in_w) != (x.h, x.w):
        raise DimensionError(
            f"operator expects input {op.in_h}x{op.in_w}, grid is {x.h}x{x.w}"
        )
    return LatentGrid(x.data[op.source_y, op.source_x, :], t=x.t)


def refresh_duplicates(op: SelectionOperator, x: LatentGrid, velocity: LatentGrid, rng: SeededRng) -> LatentGrid:
    """Apply a duplicating operator to a latent state with noise decorrelation.

    Each non-canonical duplicate keeps the source's denoised estimate
    ``x + (1 - t) v`` but replaces its noise component with a fresh draw at
    the interpolant's magnitude::

        dup = t * (x_src + (1 - t) * v_src) + (1 - t) * g,   g ~ N(0, I)

    The canonical representative of every group keeps the exact source value.
    Velocities must come from the same state (they supply the denoised
    estimate); plain gathers of velocities never need refreshing.
    """
    if velocity.shape != x.shape:
        raise DimensionError("velocity and state shapes must match for refresh")
    gathered = apply(op, x)
    if not op.needs_noise_refresh:
        return gathered
    t = x.t
    out = gathered.data.astype(np.float64)
    v = apply(op, velocity).data.astype(np.float64)
    for (y, xcol) in op.duplicate_outputs():
        g = rng.normal(x.d)
        denoised = out[y, xcol] + (1.0 - t) * v[y, xcol]
        out[y, xcol] = t * denoised + (1.0 - t) * g
    return LatentGrid(out, t=x.t)


def dense_matrix(op: SelectionOperator) -> np.ndarray:
    """Explicit ``(out_h*out_w, in_h*in_w)`` 0/1 matrix (oracle view only)."""
    rows = op.out_h * op.out_w
    mat = np.zeros((rows, op.in_h * op.in_w), dtype=np.float64)
    flat_src = (op.source_y * op.in_w + op.source_x).ravel()
    mat[np.arange(rows), flat_src] = 1.0
    return mat


def operator_to_json(op: SelectionOperator) -> str:
    doc = {
        "kind": op.kind,
        "scale": op.scale,
        "in": [op.in_h, op.in_w],
        "out": [op.out_h, op.out_w],
        "source_y": op.source_y.ravel().tolist(),
        "source_x": op.source_x.ravel().tolist(),
        "duplication_map": [[list(p) for p in group] for group in op.duplication_map],
        "stream_id": op.stream_id,
    }
    return json.dumps(doc, sort_keys=True)


def operator_from_json(text: str) -> SelectionOperator:
    doc = json.loads(text)
    out_h, out_w = doc["out"]
    return SelectionOperator(
        kind=doc["kind"],
        in_h=doc["in"][0], in_w=doc["in"][1],
        out_h=out_h, out_w=out_w,
        scale=doc["scale"],
        source_y=np.asarray(doc["source_y"], dtype=np.int64).reshape(out_h, out_w),
        source_x=np.asarray(doc["source_x"], dtype=np.int64).reshape(out_h, out_w),
        duplication_map=tuple(
            tuple((int(y), int(x)) for y, x in group) for group in doc["duplication_map"]
        ),
        stream_id=doc["stream_id"],
    )
