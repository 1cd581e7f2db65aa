"""Turn the CSVs of a run directory into report tables (and optional plots).

Every table is a pure function of the metric CSVs and ``run.json`` files, so
running the report twice on the same directory gives identical bytes.
"""

import csv
import json
import logging
from pathlib import Path

from ..adapt import read_adapt_csv
from ..training import read_metrics_csv

log = logging.getLogger(__name__)

REPORT_DIR = "report"
LAMBDA_COLUMNS = ("lambda_s", "best_step", "best_val_primary_loss", "val_secondary_loss", "status")
EXP13_COLUMNS = ("run", "step", "secondary_accuracy", "secondary_loss")
STEP_COLUMNS = ("shift", "step_size", "accuracy", "loss")
BASELINE_COLUMNS = ("shift", "accuracy", "loss")


def _fmt(v):
    if v is None:
        return ""
    return repr(float(v)) if isinstance(v, float) else str(v)


def _write_table(path, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])
    return path


def best_val_point(records):
    """(step, val primary loss, val secondary loss) at the first minimum of val primary loss."""
    val = {}
    for r in records:
        if r.split == "val" and r.metric == "loss":
            val.setdefault(r.step, {})[r.task] = r.value
    best = None
    for step in sorted(val):
        p = val[step].get("primary")
        if p is not None and (best is None or p < best[1]):
            best = (step, p, val[step].get("secondary"))
    return best


def lambda_table(run_dir):
    rows = []
    for d in sorted((Path(run_dir) / "lambda_runs").glob("lambda_*")):
        info = json.loads((d / "run.json").read_text())
        row = {"lambda_s": float(info["lambda_s"]), "status": info["status"], "best_step": None,
               "best_val_primary_loss": None, "val_secondary_loss": None}
        metrics = d / "metrics.csv"
        if metrics.exists():
            best = best_val_point(read_metrics_csv(metrics))
            if best is not None:
                row["best_step"], row["best_val_primary_loss"], row["val_secondary_loss"] = best
        rows.append(row)
    return sorted(rows, key=lambda r: r["lambda_s"])


def exp13_table(run_dir):
    rows = []
    for name in ("pretrained_finetune", "random_finetune"):
        metrics = Path(run_dir) / "exp13" / name / "metrics.csv"
        if not metrics.exists():
            continue
        per_step = {}
        for r in read_metrics_csv(metrics):
            if r.split == "val" and r.task == "secondary":
                per_step.setdefault(r.step, {})[r.metric] = r.value
        for step in sorted(per_step):
            rows.append({"run": name, "step": step,
                         "secondary_accuracy": per_step[step].get("accuracy"),
                         "secondary_loss": per_step[step].get("loss")})
    return rows


def step_size_tables(run_dir):
    records = read_adapt_csv(Path(run_dir) / "adapt_metrics.csv")
    sweep, baseline = {}, {}
    for r in records:
        if r.task != "primary":
            continue
        if r.method == "none":
            baseline.setdefault(r.shift, {})[r.metric] = r.value
        else:
            sweep.setdefault((r.shift, r.step_size), {})[r.metric] = r.value
    shift_order = list(dict.fromkeys(r.shift for r in records))
    sweep_rows = [
        {"shift": s, "step_size": eta, "accuracy": m.get("accuracy"), "loss": m.get("loss")}
        for (s, eta), m in sorted(sweep.items(), key=lambda kv: (shift_order.index(kv[0][0]), kv[0][1]))
    ]
    base_rows = [{"shift": s, "accuracy": baseline[s].get("accuracy"), "loss": baseline[s].get("loss")}
                 for s in shift_order if s in baseline]
    return sweep_rows, base_rows


def emit_report(run_dir, plots=False):
    """Write every table the run directory supports; returns the written paths."""
    run_dir = Path(run_dir)
    out = run_dir / REPORT_DIR
    written = {}
    if (run_dir / "lambda_runs").is_dir():
        written["lambda_sweep"] = _write_table(out / "lambda_sweep.csv", LAMBDA_COLUMNS, lambda_table(run_dir))
    if (run_dir / "exp13").is_dir():
        written["exp13"] = _write_table(out / "exp13_secondary_accuracy.csv", EXP13_COLUMNS, exp13_table(run_dir))
    if (run_dir / "adapt_metrics.csv").exists():
        sweep, base = step_size_tables(run_dir)
        written["step_size_sweep"] = _write_table(out / "step_size_sweep.csv", STEP_COLUMNS, sweep)
        written["unadapted_baseline"] = _write_table(out / "unadapted_baseline.csv", BASELINE_COLUMNS, base)
    if not written:
        raise FileNotFoundError(f"{run_dir} has no metric CSVs to report on")
    if plots:
        try:
            written.update(_plot(out, written))
        except Exception as e:  # tables are already on disk; a plot is a bonus
            log.warning("plotting failed: %s", e)
    return written


def _read_rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def _plot(out, written):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    images = {}
    if "step_size_sweep" in written:
        rows = _read_rows(written["step_size_sweep"])
        fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
        for shift in dict.fromkeys(r["shift"] for r in rows):
            pts = [r for r in rows if r["shift"] == shift]
            # step size 0 has no place on a log axis; plot it at the left edge
            xs = [float(r["step_size"]) or 1e-5 for r in pts]
            for ax, key in zip(axes, ("accuracy", "loss")):
                ax.semilogx(xs, [float(r[key]) for r in pts], marker="o", label=shift)
        for ax, key in zip(axes, ("accuracy", "loss")):
            ax.set_xlabel("step size")
            ax.set_ylabel(f"test {key}")
        axes[0].legend()
        fig.tight_layout()
        images["step_size_plot"] = out / "step_size_sweep.png"
        fig.savefig(images["step_size_plot"])
        plt.close(fig)
    if "exp13" in written:
        rows = _read_rows(written["exp13"])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for run in dict.fromkeys(r["run"] for r in rows):
            pts = [r for r in rows if r["run"] == run]
            ax.plot([int(r["step"]) for r in pts], [float(r["secondary_accuracy"]) for r in pts], label=run)
        ax.axhline(1 / 6, color="grey", linestyle=":")
        ax.set_xlabel("step")
        ax.set_ylabel("val secondary accuracy")
        ax.legend()
        fig.tight_layout()
        images["exp13_plot"] = out / "exp13_secondary_accuracy.png"
        fig.savefig(images["exp13_plot"])
        plt.close(fig)
    return images
