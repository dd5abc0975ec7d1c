"""Experiment configuration: a versioned JSON document with strict schema
validation.  Unknown keys are rejected anywhere in the document, and every
defaulted field is echoed back into the snapshot written next to the run
outputs, so a snapshot alone reproduces the run.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .dataset import ToyDataset
from .errors import SchemaError
from .fields import BlurField, ChannelAffineField
from .sampler import BASELINE_KINDS, PreviewConfig, SELECTION_MODES
from .toynet import load_checkpoint

__all__ = [
    "SCHEMA_VERSION",
    "load_config",
    "validate_config",
    "build_field",
    "build_dataset",
    "build_preview_config",
]

SCHEMA_VERSION = 1


def _expect(cond: bool, message: str):
    if not cond:
        raise SchemaError(message)


def _check_keys(doc: dict, allowed: set[str], where: str):
    _expect(isinstance(doc, dict), f"{where} must be an object")
    unknown = set(doc) - allowed
    _expect(not unknown, f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")


def _number(doc, key, default, where, *, kind=float, low=None, high=None):
    v = doc.get(key, default)
    _expect(isinstance(v, (int, float)) and not isinstance(v, bool), f"{where}.{key} must be a number")
    v = kind(v)
    _expect(low is None or v >= low, f"{where}.{key} must be >= {low}")
    _expect(high is None or v <= high, f"{where}.{key} must be <= {high}")
    return v


def _choice(doc, key, default, options, where):
    v = doc.get(key, default)
    _expect(v in options, f"{where}.{key} must be one of {sorted(options)}; got {v!r}")
    return v


def _bool(doc, key, default, where):
    v = doc.get(key, default)
    _expect(isinstance(v, bool), f"{where}.{key} must be a boolean")
    return v


def _validate_field_section(doc: dict) -> dict:
    _check_keys(doc, {"kind", "checkpoint", "matrix", "bias", "kernel_size", "padding"}, "field")
    kind = _choice(doc, "kind", "toy-net", {"toy-net", "channel-affine", "blur"}, "field")
    out = {"kind": kind}
    if kind == "toy-net":
        ckpt = doc.get("checkpoint")
        _expect(ckpt is None or isinstance(ckpt, str), "field.checkpoint must be a path string")
        out["checkpoint"] = ckpt
    elif kind == "channel-affine":
        matrix = doc.get("matrix")
        _expect(isinstance(matrix, list) and matrix, "field.matrix must be a non-empty nested list")
        d = len(matrix)
        _expect(all(isinstance(r, list) and len(r) == d for r in matrix), "field.matrix must be square")
        bias = doc.get("bias", [0.0] * d)
        _expect(isinstance(bias, list) and len(bias) == d, "field.bias length must match the matrix")
        out["matrix"] = [[float(v) for v in row] for row in matrix]
        out["bias"] = [float(v) for v in bias]
    else:
        out["kernel_size"] = int(_number(doc, "kernel_size", 3, "field", kind=int, low=1))
        out["padding"] = _choice(doc, "padding", "reflect", {"reflect", "wrap"}, "field")
    return out


def _validate_preview_section(doc: dict, grid: dict) -> dict:
    where = "preview"
    allowed = {
        "n_steps", "downsample_step", "scale", "m", "alpha", "k",
        "selection", "family_mode", "cg", "condition",
    }
    _check_keys(doc, allowed, where)
    out = {
        "n_steps": int(_number(doc, "n_steps", 30, where, kind=int, low=2)),
        "downsample_step": int(_number(doc, "downsample_step", 10, where, kind=int, low=1)),
        "scale": int(_number(doc, "scale", 2, where, kind=int, low=2)),
        "m": int(_number(doc, "m", 5, where, kind=int, low=0)),
        "alpha": _number(doc, "alpha", 0.04, where, low=0.0),
        "k": int(_number(doc, "k", 1, where, kind=int, low=1)),
        "selection": _choice(doc, "selection", "argmin", set(SELECTION_MODES), where),
        "family_mode": _choice(doc, "family_mode", "per-block", {"per-block", "shared"}, where),
        "cg": _bool(doc, "cg", True, where),
    }
    cond = doc.get("condition", "sample")
    if cond == "sample" or cond is None:
        out["condition"] = cond
    else:
        _expect(isinstance(cond, list), "preview.condition must be 'sample', null, or a list of numbers")
        out["condition"] = [float(v) for v in cond]
    _expect(out["downsample_step"] < out["n_steps"], "preview needs downsample_step < n_steps")
    _expect(
        out["downsample_step"] + out["m"] + 1 <= out["n_steps"],
        "preview needs downsample_step + m + 1 <= n_steps",
    )
    _expect(grid["h"] % out["scale"] == 0 and grid["w"] % out["scale"] == 0,
            "preview.scale must divide the grid dims")
    return out


def _validate_train_section(doc: dict) -> dict:
    where = "train"
    allowed = {
        "steps", "lr", "momentum", "clip_norm", "batch_size", "hidden",
        "layers", "seed", "sizes", "max_blobs", "checkpoint",
    }
    _check_keys(doc, allowed, where)
    sizes = doc.get("sizes", [[16, 16], [8, 8]])
    _expect(
        isinstance(sizes, list) and sizes
        and all(isinstance(s, list) and len(s) == 2 for s in sizes),
        "train.sizes must be a list of [h, w] pairs",
    )
    ckpt = doc.get("checkpoint", "model.ckpt")
    _expect(isinstance(ckpt, str) and ckpt, "train.checkpoint must be a non-empty path string")
    return {
        "steps": int(_number(doc, "steps", 5000, where, kind=int, low=1)),
        "lr": _number(doc, "lr", 0.02, where, low=0.0),
        "momentum": _number(doc, "momentum", 0.9, where, low=0.0, high=1.0),
        "clip_norm": _number(doc, "clip_norm", 1.0, where, low=0.0),
        "batch_size": int(_number(doc, "batch_size", 8, where, kind=int, low=1)),
        "hidden": int(_number(doc, "hidden", 32, where, kind=int, low=1)),
        "layers": int(_number(doc, "layers", 4, where, kind=int, low=1)),
        "seed": int(_number(doc, "seed", 0, where, kind=int, low=0)),
        "sizes": [[int(h), int(w)] for h, w in sizes],
        "max_blobs": int(_number(doc, "max_blobs", 3, where, kind=int, low=1)),
        "checkpoint": ckpt,
    }


def validate_config(doc: dict) -> dict:
    """Validate a raw config document; returns the defaults-filled snapshot."""
    top_allowed = {
        "schema_version", "field", "grid", "preview", "baselines",
        "reduced_nfe", "seeds", "cost_model", "export_images", "train",
        "study", "ablate",
    }
    _check_keys(doc, top_allowed, "config")
    version = doc.get("schema_version", SCHEMA_VERSION)
    _expect(version == SCHEMA_VERSION, f"unsupported schema_version {version!r}")

    grid_doc = doc.get("grid", {})
    _check_keys(grid_doc, {"h", "w", "d"}, "grid")
    grid = {
        "h": int(_number(grid_doc, "h", 16, "grid", kind=int, low=1)),
        "w": int(_number(grid_doc, "w", 16, "grid", kind=int, low=1)),
        "d": int(_number(grid_doc, "d", 3, "grid", kind=int, low=1)),
    }

    baselines = doc.get("baselines", list(BASELINE_KINDS))
    _expect(isinstance(baselines, list), "baselines must be a list")
    for b in baselines:
        _expect(b in BASELINE_KINDS, f"unknown baseline {b!r}")

    seeds = doc.get("seeds", [0])
    _expect(
        isinstance(seeds, list) and seeds and all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds),
        "seeds must be a non-empty list of non-negative integers",
    )

    study_doc = doc.get("study", {})
    _check_keys(study_doc, {"seeds", "span"}, "study")
    study = {
        "seeds": int(_number(study_doc, "seeds", 100, "study", kind=int, low=1)),
        "span": int(_number(study_doc, "span", 5, "study", kind=int, low=1)),
    }

    ablate_doc = doc.get("ablate", {})
    _check_keys(ablate_doc, {"seeds"}, "ablate")
    ablate = {"seeds": int(_number(ablate_doc, "seeds", 20, "ablate", kind=int, low=1))}

    snapshot = {
        "schema_version": SCHEMA_VERSION,
        "field": _validate_field_section(doc.get("field", {})),
        "grid": grid,
        "preview": _validate_preview_section(doc.get("preview", {}), grid),
        "baselines": list(baselines),
        "reduced_nfe": int(_number(doc, "reduced_nfe", 20, "config", kind=int, low=1)),
        "seeds": [int(s) for s in seeds],
        "cost_model": _choice(doc, "cost_model", "linear", {"linear", "quadratic"}, "config"),
        "export_images": _bool(doc, "export_images", False, "config"),
        "train": _validate_train_section(doc.get("train", {})),
        "study": study,
        "ablate": ablate,
    }
    _expect(snapshot["reduced_nfe"] < snapshot["preview"]["n_steps"],
            "reduced_nfe must be below preview.n_steps")
    return snapshot


def load_config(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"config is not valid JSON: {exc}") from exc
    _expect(isinstance(doc, dict), "config root must be a JSON object")
    return validate_config(doc)


def build_field(snapshot: dict, config_dir: Path | None = None):
    spec = snapshot["field"]
    if spec["kind"] == "channel-affine":
        return ChannelAffineField(np.asarray(spec["matrix"]), np.asarray(spec["bias"]))
    if spec["kind"] == "blur":
        return BlurField(kernel_size=spec["kernel_size"], padding=spec["padding"])
    ckpt = spec.get("checkpoint")
    if not ckpt:
        raise SchemaError("field.kind is toy-net but no checkpoint path is configured")
    path = Path(ckpt)
    if not path.is_absolute() and config_dir is not None:
        path = Path(config_dir) / path
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def build_dataset(snapshot: dict) -> ToyDataset:
    grid = snapshot["grid"]
    return ToyDataset(h=grid["h"], w=grid["w"], max_blobs=snapshot["train"]["max_blobs"])


def build_preview_config(snapshot: dict, seed: int, condition) -> PreviewConfig:
    grid, prev = snapshot["grid"], snapshot["preview"]
    return PreviewConfig(
        h=grid["h"], w=grid["w"], d=grid["d"],
        n_steps=prev["n_steps"],
        downsample_step=prev["downsample_step"],
        scale=prev["scale"],
        m=prev["m"],
        alpha=prev["alpha"],
        k=prev["k"],
        seed=seed,
        selection=prev["selection"],
        family_mode=prev["family_mode"],
        cg=prev["cg"],
        condition=condition,
        cost_model=snapshot["cost_model"],
        reduced_nfe=snapshot["reduced_nfe"],
    )
