"""Command-line entry point: ``taskmerge --config run.yaml``.

Exit codes: 0 success, 1 usage/configuration error, 2 merge or runtime
error, 3 theory-invariant failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import theory
from .checkpoint import LoraAdapter, materialize_lora, read_checkpoint, validate_compat, write_checkpoint
from .config import RunConfig, load_config
from .errors import ConfigError, MergeError, UnsoundRadiusError
from .merging import apply_merged, merge, weight_average
from .recipe import Method
from .task_vectors import (
    compute_task_vectors,
    magnitude_histogram,
    normalized_fro_by_layer,
    write_histogram_csv,
    write_norms_csv,
)
from .wudi import write_report_csv

log = logging.getLogger("taskmerge")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_THEORY = 0, 1, 2, 3


class TheoryInvariantError(MergeError):
    pass


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _safe_name(key: str) -> str:
    return key.replace(os.sep, "_").replace("/", "_")


def write_manifest(cfg: RunConfig, outputs) -> Path:
    """Config echo plus content hashes of every input and output."""
    manifest = {
        "command": cfg.command,
        "config": cfg.raw,
        "recipe": cfg.recipe.to_dict(),
        "seed": cfg.seed,
        "inputs": {str(p): sha256(p) for p in cfg.inputs()},
        "outputs": {str(p): sha256(p) for p in sorted(outputs)},
    }
    path = cfg.report_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def load_experts(cfg: RunConfig):
    base = read_checkpoint(cfg.base_path)
    experts = [read_checkpoint(p) for p in cfg.expert_paths]
    for p in cfg.lora_paths:
        experts.append(materialize_lora(base, LoraAdapter.from_checkpoint(read_checkpoint(p))))
    return base, experts


def run_merge(cfg: RunConfig, threads: int = 1, out=sys.stdout) -> int:
    start = time.perf_counter()
    base, experts = load_experts(cfg)
    recipe = cfg.recipe
    tv = compute_task_vectors(base, experts, cfg.key_overrides, cfg.key_filter)
    reports = {}
    if recipe.method is Method.WEIGHT_AVERAGE:
        avg = weight_average(experts)
        merged = base.replace({k: avg[k] for k in tv.keys})
    else:
        result = merge(tv, recipe, threads)
        reports = result.reports
        merged = apply_merged(base, result.merged, recipe.lam)
    merged = merged.replace({}, metadata={**base.metadata, "merge_method": recipe.method.value, "merge_lambda": repr(recipe.lam)})

    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    cfg.output_path.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(merged, cfg.output_path)
    outputs = [cfg.output_path]

    summary = cfg.report_dir / "summary.csv"
    with open(summary, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["key", "kind", "initial_loss", "final_loss", "initial_norm", "peak_norm", "ranks"])
        for key in tv.keys:
            r = reports.get(key)
            if r is None:
                w.writerow([key, tv.partition[key].value, "", "", "", "", ""])
            else:
                w.writerow([key, tv.partition[key].value, repr(r.initial_loss), repr(r.final_loss),
                            repr(r.initial_norm), repr(r.peak_norm), " ".join(map(str, r.ranks))])
    outputs.append(summary)
    if reports:
        layer_dir = cfg.report_dir / "layers"
        layer_dir.mkdir(exist_ok=True)
        for key, r in reports.items():
            path = layer_dir / f"{_safe_name(key)}.csv"
            write_report_csv(r, path)
            outputs.append(path)
    write_manifest(cfg, outputs)

    skipped = len(set(base.keys()) - set(tv.keys))
    print(f"method      {recipe.method.value}", file=out)
    print(f"lambda      {recipe.lam}", file=out)
    print(f"keys merged {len(tv.keys)}", file=out)
    print(f"keys skipped {skipped}", file=out)
    if reports:
        init = sum(r.initial_loss for r in reports.values())
        final = sum(r.final_loss for r in reports.values())
        print(f"loss        {init:.6g} -> {final:.6g} (reduction {init - final:.6g})", file=out)
    print(f"wall time   {time.perf_counter() - start:.2f}s", file=out)
    print(f"wrote       {cfg.output_path}", file=out)
    return EXIT_OK


def run_inspect(cfg: RunConfig, out=sys.stdout) -> int:
    base, experts = load_experts(cfg)
    tv = compute_task_vectors(base, experts, cfg.key_overrides, cfg.key_filter)
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i in range(tv.n_tasks):
        hist_path = cfg.report_dir / f"histogram_task{i}.csv"
        norms_path = cfg.report_dir / f"norms_task{i}.csv"
        write_histogram_csv(magnitude_histogram(tv, i, cfg.bins), hist_path)
        write_norms_csv(normalized_fro_by_layer(tv, i), norms_path)
        outputs += [hist_path, norms_path]
    write_manifest(cfg, outputs)
    print(f"inspected {tv.n_tasks} task vector(s) over {len(tv.keys)} keys -> {cfg.report_dir}", file=out)
    return EXIT_OK


def run_diff(cfg: RunConfig, out=sys.stdout) -> int:
    """Per-key differences between the base and each expert."""
    base, experts = load_experts(cfg)
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for i, expert in enumerate(experts):
        report = validate_compat([base, expert])
        path = cfg.report_dir / f"diff_expert{i}.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["key", "status", "base_shape", "expert_shape", "max_abs_diff", "fro_diff"])
            for key in sorted(set(base.keys()) | set(expert.keys())):
                if key not in base or key not in expert:
                    w.writerow([key, "missing_in_expert" if key in base else "missing_in_base", "", "", "", ""])
                    continue
                a, b = base[key], expert[key]
                if a.shape != b.shape:
                    w.writerow([key, "shape_mismatch", "x".join(map(str, a.shape)), "x".join(map(str, b.shape)), "", ""])
                    continue
                d = b.astype(np.float64) - a.astype(np.float64)
                status = "equal" if not np.any(d) else "changed"
                w.writerow([key, status, "x".join(map(str, a.shape)), "x".join(map(str, b.shape)),
                            repr(float(np.max(np.abs(d))) if d.size else 0.0), repr(float(np.linalg.norm(d)))])
        outputs.append(path)
        n_missing = sum(len(v) for v in report.missing.values())
        print(f"expert {i}: {len(report.shared_keys)} shared keys, {n_missing} missing, "
              f"{len(report.shape_mismatches)} shape mismatches", file=out)
    write_manifest(cfg, outputs)
    return EXIT_OK


def run_theory(cfg: RunConfig, out=sys.stdout) -> int:
    tcfg = cfg.theory
    cells = theory.run_bound_grid(tcfg)
    rows = theory.steps_sweep(tcfg)
    cfg.report_dir.mkdir(parents=True, exist_ok=True)
    bound_path = cfg.report_dir / "bound_report.csv"
    sweep_path = cfg.report_dir / "steps_sweep.csv"
    theory.write_bound_csv(cells, bound_path)
    theory.write_sweep_csv(rows, sweep_path)
    write_manifest(cfg, [bound_path, sweep_path])

    lemma_ok = sum(bool(np.all(c.report.lemma_pass)) for c in cells)
    thm_ok = sum(bool(np.all(c.report.theorem_pass)) for c in cells)
    scaling_ok = sum(c.scaling_ok for c in cells)
    print(f"cells {len(cells)}: lemma bound {lemma_ok} pass, theorem bound {thm_ok} pass, "
          f"||tau|| <= eta*T*G {scaling_ok} pass", file=out)
    for lam in sorted({r[1] for r in rows}):
        curve = [(T, loss) for T, l, loss in rows if l == lam]
        best = min(range(len(curve)), key=lambda j: curve[j][1])
        where = "interior" if 0 < best < len(curve) - 1 else "endpoint"
        print(f"steps sweep lambda={lam:.4g}: best T={curve[best][0]} ({where})", file=out)
    if lemma_ok < len(cells) or thm_ok < len(cells) or scaling_ok < len(cells):
        raise TheoryInvariantError("a soundness invariant failed; see bound_report.csv")
    return EXIT_OK


RUNNERS = {"merge": run_merge, "inspect": run_inspect, "diff": run_diff, "theory": run_theory}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="taskmerge", description="Data-free model merging toolkit.")
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="per-layer worker threads")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="set a dot-path config value (repeatable)")
    p.add_argument("--quiet", action="store_true", help="suppress the summary")
    return p


def _error_record(exc, code) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code})


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    out = open(os.devnull, "w") if args.quiet else sys.stdout
    try:
        cfg = load_config(args.config, args.override)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        runner = RUNNERS[cfg.command]
        if cfg.command == "merge":
            return runner(cfg, args.threads, out=out)
        return runner(cfg, out=out)
    except ConfigError as exc:
        print(_error_record(exc, EXIT_USAGE), file=sys.stderr)
        return EXIT_USAGE
    except (UnsoundRadiusError, TheoryInvariantError) as exc:
        print(_error_record(exc, EXIT_THEORY), file=sys.stderr)
        return EXIT_THEORY
    except (MergeError, OSError, ValueError) as exc:
        print(_error_record(exc, EXIT_RUNTIME), file=sys.stderr)
        return EXIT_RUNTIME
    finally:
        if out is not sys.stdout:
            out.close()


if __name__ == "__main__":
    sys.exit(main())
