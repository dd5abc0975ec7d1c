"""Command-line harness: train, preview, compare, ablate, stats.

Every run directory receives a defaults-filled config snapshot sufficient to
reproduce it byte-for-byte.  Exit codes: 0 success, 1 usage or schema
errors, 2 runtime failures (divergence, non-finite states), 3 I/O problems.
Setting ``PREVIEWFLOW_DETERMINISTIC=1`` forces single-process execution and
zeroes wall-time fields so reruns produce byte-identical CSV/JSON outputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import (
    build_dataset,
    build_field,
    build_preview_config,
    load_config,
    validate_config,
)
from .errors import (
    IntegrationError,
    PreviewflowError,
    SchemaError,
    TrainingError,
    UnpairedRunError,
)
from .grid import (
    LatentGrid,
    SeededRng,
    atomic_write_text,
    export_image,
    gaussian_noise,
    load_grid,
    save_grid,
)
from .metrics import block_average, piqe, psnr
from .sampler import sample_baseline, sample_hr, sample_preview
from .dataset import ToyDataset
from .stats import cg_effect_study, cosine_consistency_study
from .toynet import save_checkpoint, train_toy

AGGREGATE_COLUMNS = [
    "seed", "method", "psnr_db", "piqe", "cost_units", "speedup_vs_full",
    "hr_evals", "lr_evals", "selected_candidate", "commutator_norm_at_td",
    "commutator_norm_at_tdm", "compliance_deviation",
]


def _deterministic() -> bool:
    return os.environ.get("PREVIEWFLOW_DETERMINISTIC") == "1"


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, columns, rows) -> None:
    lines = [",".join(columns)]
    for row in rows:
        lines.append(",".join(_fmt(row.get(c)) for c in columns))
    atomic_write_text(path, "\n".join(lines) + "\n")


def _write_json(path, doc) -> None:
    atomic_write_text(path, json.dumps(doc, sort_keys=True, indent=2) + "\n")


def _resolve_condition(field, snapshot, seed, dataset):
    spec = snapshot["preview"]["condition"]
    if field.condition_arity == 0:
        return None
    if spec == "sample":
        rng = SeededRng(seed, "condition")
        scene = dataset.sample_scene(rng)
        return tuple(float(v) for v in dataset.condition(scene))
    if spec is None:
        return tuple([0.0] * field.condition_arity)
    return tuple(spec)


def _reference_for(hr_final: LatentGrid, grid: LatentGrid) -> LatentGrid:
    if grid.shape == hr_final.shape:
        return hr_final
    fy, fx = hr_final.h // grid.h, hr_final.w // grid.w
    if fy == fx and fy * grid.h == hr_final.h and fx * grid.w == hr_final.w:
        return block_average(hr_final, fy)
    raise UnpairedRunError(
        f"cannot pair grids of shape {grid.shape} and {hr_final.shape}"
    )


def _piqe_or_none(grid: LatentGrid):
    if grid.h < 8 or grid.w < 8:
        return None
    return piqe(grid)


def _seed_dir(out: Path, seed: int) -> Path:
    return out / f"seed_{seed:06d}"


def _run_seed(snapshot, seed, out_dir, config_dir, field=None, dataset=None):
    """All methods for one seed; writes per-seed artifacts, returns rows."""
    if field is None:
        field = build_field(snapshot, config_dir)
    if dataset is None:
        dataset = build_dataset(snapshot)
    det = _deterministic()
    cond = _resolve_condition(field, snapshot, seed, dataset)
    cfg = build_preview_config(snapshot, seed, cond)
    noise_rng = SeededRng(seed, "noise/x0")
    x0 = gaussian_noise(cfg.h, cfg.w, cfg.d, noise_rng)

    hr = sample_hr(field, cfg, x0)
    reports = {"hr": hr.report}
    reports["preview"] = sample_preview(field, cfg, x0, hr_run=hr)
    for kind in snapshot["baselines"]:
        reports[kind] = sample_baseline(kind, field, cfg, x0, hr_run=hr)

    sdir = _seed_dir(out_dir, seed)
    sdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for method, report in reports.items():
        report.stream_ids.setdefault("noise/x0", noise_rng.stream_id)
        doc = report.to_json_dict(deterministic=det)
        doc["grid_file"] = f"grid_{method}.f32"
        _write_json(sdir / f"report_{method}.json", doc)
        save_grid(report.final, sdir / f"grid_{method}.f32")
        if snapshot["export_images"] and report.final.d in (1, 3):
            export_image(report.final, sdir / f"img_{method}.png")
        if method == "hr":
            continue
        rows.append({
            "seed": seed,
            "method": method,
            "psnr_db": psnr(report.final, _reference_for(hr.final, report.final)),
            "piqe": _piqe_or_none(report.final),
            "cost_units": report.cost_units,
            "speedup_vs_full": report.speedup_vs_full,
            "hr_evals": report.hr_evals,
            "lr_evals": report.lr_evals,
            "selected_candidate": report.selected_candidate,
            "commutator_norm_at_td": report.commutator_norm_at_td,
            "commutator_norm_at_tdm": report.commutator_norm_at_tdm,
            "compliance_deviation": report.compliance_deviation,
        })
    return rows


def _run_seed_task(payload):
    snapshot, seed, out_dir, config_dir = payload
    return _run_seed(snapshot, seed, Path(out_dir), Path(config_dir) if config_dir else None)


# -- commands -------------------------------------------------------------------

def cmd_train(snapshot, out_dir: Path, config_dir) -> int:
    train = snapshot["train"]
    grid = snapshot["grid"]
    dataset = ToyDataset(h=grid["h"], w=grid["w"], max_blobs=train["max_blobs"])
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config_snapshot.json", snapshot)
    rng = SeededRng(train["seed"], "train")
    trace_path = out_dir / "loss_trace.csv"
    try:
        result = train_toy(
            dataset,
            steps=train["steps"],
            lr=train["lr"],
            rng=rng,
            batch_size=train["batch_size"],
            momentum=train["momentum"],
            clip_norm=train["clip_norm"],
            sizes=tuple((h, w) for h, w in train["sizes"]),
        )
    except TrainingError as exc:
        rows = [{"step": i, "loss": v} for i, v in enumerate(exc.trace)]
        _write_csv(trace_path, ["step", "loss"], rows)
        raise
    rows = [{"step": i, "loss": v} for i, v in enumerate(result.losses)]
    _write_csv(trace_path, ["step", "loss"], rows)
    ckpt_path = Path(train["checkpoint"])
    if not ckpt_path.is_absolute():
        ckpt_path = out_dir / ckpt_path
    save_checkpoint(
        result.field,
        ckpt_path,
        extra={
            "seed": train["seed"],
            "steps": train["steps"],
            "lr": train["lr"],
            "momentum": train["momentum"],
            "clip_norm": train["clip_norm"],
            "batch_size": train["batch_size"],
            "sizes": train["sizes"],
            "initial_loss": result.initial_loss,
            "final_loss": result.final_loss,
        },
    )
    print(f"checkpoint: {ckpt_path}")
    print(f"initial probe loss {result.initial_loss:.6f} -> final {result.final_loss:.6f}")
    return 0


def cmd_preview(snapshot, out_dir: Path, config_dir, jobs: int = 1) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config_snapshot.json", snapshot)
    seeds = snapshot["seeds"]
    if _deterministic():
        jobs = 1
    rows = []
    if jobs > 1:
        payloads = [(snapshot, s, str(out_dir), str(config_dir) if config_dir else "") for s in seeds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for seed_rows in pool.map(_run_seed_task, payloads):
                rows.extend(seed_rows)
    else:
        field = build_field(snapshot, config_dir)
        dataset = build_dataset(snapshot)
        for seed in seeds:
            rows.extend(_run_seed(snapshot, seed, out_dir, config_dir, field, dataset))
    _write_csv(out_dir / "aggregate.csv", AGGREGATE_COLUMNS, rows)
    print(f"{len(seeds)} seed(s), {len(rows)} method rows -> {out_dir / 'aggregate.csv'}")
    return 0


def _discover_runs(run_dir: Path):
    seeds = {}
    for sdir in sorted(run_dir.glob("seed_*")):
        seed = int(sdir.name.split("_", 1)[1])
        methods = {}
        for rep in sorted(sdir.glob("report_*.json")):
            method = rep.stem.split("_", 1)[1]
            methods[method] = rep
        seeds[seed] = methods
    if not seeds:
        raise UnpairedRunError(f"no seed directories found under {run_dir}")
    return seeds


def _load_method_grid(sdir: Path, method: str) -> LatentGrid:
    path = sdir / f"grid_{method}.f32"
    if not path.exists():
        raise UnpairedRunError(f"missing grid for method {method!r}: {path}")
    return load_grid(path)


def _mean_std(values):
    arr = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if arr.size == 0:
        return None, None
    return float(arr.mean()), float(arr.std())


def cmd_compare(run_dirs, metrics, out_path: Path) -> int:
    metrics = list(metrics)
    known = {"psnr", "piqe", "cost", "speedup"}
    unknown = set(metrics) - known
    if unknown:
        raise SchemaError(f"unknown metric(s): {', '.join(sorted(unknown))}")
    if len(run_dirs) == 1:
        rows = _compare_within(Path(run_dirs[0]), metrics)
    elif len(run_dirs) == 2:
        rows = _compare_across(Path(run_dirs[0]), Path(run_dirs[1]), metrics)
    else:
        raise SchemaError("compare takes one run directory or two")
    columns = ["method"]
    for m in metrics:
        columns += [f"{m}_mean", f"{m}_std"]
    _write_csv(out_path, columns, rows)
    print(f"comparison -> {out_path}")
    return 0


def _compare_within(run_dir: Path, metrics) -> list[dict]:
    seeds = _discover_runs(run_dir)
    per_method: dict[str, dict[str, list]] = {}
    for seed, methods in sorted(seeds.items()):
        sdir = _seed_dir(run_dir, seed)
        if "hr" not in methods:
            raise UnpairedRunError(f"seed {seed} has no full-resolution reference run")
        hr_final = _load_method_grid(sdir, "hr")
        for method in sorted(methods):
            grid = _load_method_grid(sdir, method)
            report = json.loads((sdir / f"report_{method}.json").read_text())
            bucket = per_method.setdefault(method, {"psnr": [], "piqe": [], "cost": [], "speedup": []})
            try:
                reference = _reference_for(hr_final, grid)
            except UnpairedRunError as exc:
                raise UnpairedRunError(f"seed {seed}: {exc}") from exc
            bucket["psnr"].append(psnr(grid, reference))
            bucket["piqe"].append(_piqe_or_none(grid))
            bucket["cost"].append(report["cost_units"])
            bucket["speedup"].append(report["speedup_vs_full"])
    rows = []
    for method in sorted(per_method):
        row = {"method": method}
        for m in metrics:
            mean, std = _mean_std(per_method[method][m])
            row[f"{m}_mean"], row[f"{m}_std"] = mean, std
        rows.append(row)
    return rows


def _compare_across(dir_a: Path, dir_b: Path, metrics) -> list[dict]:
    seeds_a, seeds_b = _discover_runs(dir_a), _discover_runs(dir_b)
    if set(seeds_a) != set(seeds_b):
        missing = set(seeds_a).symmetric_difference(seeds_b)
        raise UnpairedRunError(f"seed sets differ between runs: {sorted(missing)}")
    per_method: dict[str, dict[str, list]] = {}
    for seed in sorted(seeds_a):
        methods_a, methods_b = seeds_a[seed], seeds_b[seed]
        if set(methods_a) != set(methods_b):
            missing = set(methods_a).symmetric_difference(methods_b)
            raise UnpairedRunError(f"seed {seed}: method sets differ ({sorted(missing)})")
        for method in sorted(methods_a):
            ga = _load_method_grid(_seed_dir(dir_a, seed), method)
            gb = _load_method_grid(_seed_dir(dir_b, seed), method)
            if ga.shape != gb.shape:
                raise UnpairedRunError(f"seed {seed}, method {method}: grid shapes differ")
            bucket = per_method.setdefault(method, {"psnr": [], "piqe": [], "cost": [], "speedup": []})
            bucket["psnr"].append(psnr(ga, gb))
            bucket["piqe"].append(_piqe_or_none(ga))
            ra = json.loads((_seed_dir(dir_a, seed) / f"report_{method}.json").read_text())
            bucket["cost"].append(ra["cost_units"])
            bucket["speedup"].append(ra["speedup_vs_full"])
    rows = []
    for method in sorted(per_method):
        row = {"method": method}
        for m in metrics:
            mean, std = _mean_std(per_method[method][m])
            row[f"{m}_mean"], row[f"{m}_std"] = mean, std
        rows.append(row)
    return rows


_ABLATE_AXES = ("selection", "cg", "m-alpha", "k")


def cmd_ablate(snapshot, axis: str, out_dir: Path, config_dir) -> int:
    if axis not in _ABLATE_AXES:
        raise SchemaError(f"axis must be one of {_ABLATE_AXES}; got {axis!r}")
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config_snapshot.json", snapshot)
    field = build_field(snapshot, config_dir)
    dataset = build_dataset(snapshot)
    n_seeds = snapshot["ablate"]["seeds"]
    base = snapshot["seeds"][0]

    if axis == "selection":
        variants = [("selection", {"selection": v}) for v in ("nearest", "random", "argmax", "argmin")]
    elif axis == "cg":
        variants = [("cg", {"cg": v}) for v in (False, True)]
    elif axis == "k":
        variants = [("k", {"k": v}) for v in (1, 2, 3)]
    else:
        variants = [
            ("m-alpha", {"m": m, "alpha": round(a, 2)})
            for m in range(3, 8)
            for a in (0.01, 0.02, 0.03, 0.04, 0.05, 0.06)
        ]

    results = {name_kv(kv): {"psnr": [], "piqe": [], "norm_td": [], "cost": []} for _, kv in variants}
    for i in range(n_seeds):
        seed = base + i
        cond = _resolve_condition(field, snapshot, seed, dataset)
        cfg = build_preview_config(snapshot, seed, cond)
        rng = SeededRng(seed, "noise/x0")
        x0 = gaussian_noise(cfg.h, cfg.w, cfg.d, rng)
        hr = sample_hr(field, cfg, x0)
        reference = block_average(hr.final, cfg.scale)
        for _, kv in variants:
            vcfg = replace(cfg, **kv)
            rep = sample_preview(field, vcfg, x0, hr_run=hr)
            bucket = results[name_kv(kv)]
            bucket["psnr"].append(psnr(rep.final, reference))
            bucket["piqe"].append(_piqe_or_none(rep.final))
            bucket["norm_td"].append(rep.commutator_norm_at_td)
            bucket["cost"].append(rep.cost_units)

    rows = []
    for _, kv in variants:
        bucket = results[name_kv(kv)]
        row = dict(kv)
        row["psnr_mean"], row["psnr_std"] = _mean_std(bucket["psnr"])
        row["piqe_mean"], _ = _mean_std(bucket["piqe"])
        row["commutator_td_mean"], _ = _mean_std(bucket["norm_td"])
        row["cost_units"], _ = _mean_std(bucket["cost"])
        rows.append(row)
    columns = list(variants[0][1].keys()) + ["psnr_mean", "psnr_std", "piqe_mean", "commutator_td_mean", "cost_units"]
    _write_csv(out_dir / f"ablate_{axis.replace('-', '_')}.csv", columns, rows)
    print(f"{len(rows)} variant rows -> {out_dir}")
    return 0


def name_kv(kv: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in sorted(kv.items()))


def cmd_stats(snapshot, study: str, out_dir: Path, config_dir) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_json(out_dir / "config_snapshot.json", snapshot)
    field = build_field(snapshot, config_dir)
    dataset = build_dataset(snapshot)
    cond = _resolve_condition(field, snapshot, snapshot["seeds"][0], dataset)
    cfg = build_preview_config(snapshot, snapshot["seeds"][0], cond)
    n = snapshot["study"]["seeds"]
    if study == "cg":
        result = cg_effect_study(field, cfg, n)
        result.write_csv(out_dir / "cg_study.csv")
        result.write_json(out_dir / "cg_summary.json")
        print(
            "cg study: p(decrease with correction) = "
            f"{result.summary['p_cg_decrease']:.3g}, "
            f"p(increase without) = {result.summary['p_nocg_increase']:.3g}"
        )
    elif study == "cosine":
        span = snapshot["study"]["span"]
        result = cosine_consistency_study(field, cfg, n, span)
        result.write_csv(out_dir / "cosine_trace.csv")
        print(f"cosine study: mean at k={span} is {result.mean[span]:.4f}")
    else:
        raise SchemaError(f"study must be 'cg' or 'cosine'; got {study!r}")
    return 0


# -- entry point ------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="previewflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seeds", help="comma-separated seed list overriding the config")
        p.add_argument("--jobs", type=int, default=1, help="seed-level parallelism")
        p.add_argument("--cost-model", choices=["linear", "quadratic"], help="override cost model")
        p.add_argument("--export-images", action="store_true", help="also write PNGs")

    common(sub.add_parser("train", help="train the toy velocity net"))
    common(sub.add_parser("preview", help="run preview + baselines over seeds"))
    ablate = sub.add_parser("ablate", help="sweep one knob")
    common(ablate)
    ablate.add_argument("--axis", required=True, choices=list(_ABLATE_AXES))
    stats = sub.add_parser("stats", help="correction-effect / velocity-consistency studies")
    common(stats)
    stats.add_argument("--study", required=True, choices=["cg", "cosine"])
    compare = sub.add_parser("compare", help="score run directories")
    compare.add_argument("run_dirs", nargs="+", help="one or two run directories")
    compare.add_argument("--out", required=True, help="output CSV path")
    compare.add_argument("--metrics", default="psnr,piqe,cost,speedup",
                         help="comma-separated subset of psnr,piqe,cost,speedup")
    return parser


def _apply_overrides(snapshot, args):
    if getattr(args, "seeds", None):
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
        except ValueError as exc:
            raise SchemaError(f"--seeds must be a comma-separated integer list: {exc}") from exc
        if not seeds:
            raise SchemaError("--seeds must name at least one seed")
        snapshot = dict(snapshot, seeds=seeds)
    if getattr(args, "cost_model", None):
        snapshot = dict(snapshot, cost_model=args.cost_model)
    if getattr(args, "export_images", False):
        snapshot = dict(snapshot, export_images=True)
    return validate_config(snapshot)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "compare":
            metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
            return cmd_compare(args.run_dirs, metrics, Path(args.out))
        snapshot = load_config(args.config)
        snapshot = _apply_overrides(snapshot, args)
        config_dir = Path(args.config).resolve().parent
        out_dir = Path(args.out)
        if args.command == "train":
            return cmd_train(snapshot, out_dir, config_dir)
        if args.command == "preview":
            return cmd_preview(snapshot, out_dir, config_dir, jobs=max(1, args.jobs))
        if args.command == "ablate":
            return cmd_ablate(snapshot, args.axis, out_dir, config_dir)
        if args.command == "stats":
            return cmd_stats(snapshot, args.study, out_dir, config_dir)
        raise SchemaError(f"unknown command {args.command!r}")
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, IntegrationError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    except (UnpairedRunError, FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except PreviewflowError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
