"""Runners for the lambda sweep (with the pretrain/finetune probe) and the step-size sweep."""

import copy
import datetime as dt
import json
import logging
import traceback
from dataclasses import replace
from pathlib import Path

import torch

from ..adapt import evaluate_with_adaptation, write_adapt_csv, write_audit_jsonl
from ..data import build_splits, generate_synthetic_dataset, load_corpus
from ..model import build_model, load_checkpoint, save_checkpoint
from ..training import (
    TrainingDiverged,
    finetune_primary,
    pretrain_secondary,
    train_joint,
    write_metrics_csv,
)

log = logging.getLogger(__name__)

EXP13_RUNS = ("pretrained_finetune", "random_finetune")


def make_run_dir(base, name, cfg=None, now=None):
    """Create ``base/<name>-<UTC timestamp>`` holding the config in use."""
    stamp = (now or dt.datetime.now(dt.timezone.utc)).strftime("%Y%m%d-%H%M%S")
    base = Path(base)
    run_dir = base / f"{name}-{stamp}"
    k = 1
    while run_dir.exists():
        run_dir = base / f"{name}-{stamp}-{k}"
        k += 1
    run_dir.mkdir(parents=True)
    if cfg is not None:
        write_config(cfg, run_dir)
    return run_dir


def write_config(cfg, run_dir):
    run_dir = Path(run_dir)
    cfg.save(run_dir / "config.json")
    _write_json(run_dir / "seeds.json", cfg.seeds())


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def lambda_dirname(lam):
    return f"lambda_{lam:g}"


def load_splits(cfg, corpus=None):
    slides = load_corpus(corpus) if corpus else generate_synthetic_dataset(cfg.data)
    return build_splits(cfg.data, slides=slides)


def _guarded(out_dir, info, job):
    """Run ``job`` and write ``run.json``; a failure is recorded, not raised."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        info = {**info, **job(), "status": "ok"}
    except Exception as e:  # one failed grid point must not end the sweep
        log.error("run in %s failed: %s", out_dir, e)
        if isinstance(e, TrainingDiverged):
            write_metrics_csv(e.records, out_dir / "metrics.csv")
        info = {**info, "status": "failed", "error": f"{type(e).__name__}: {e}"}
        (out_dir / "error.txt").write_text(traceback.format_exc())
    _write_json(out_dir / "run.json", info)
    return info


def _train_job(model, splits, tcfg, out_dir, seeds, trainer=None):
    def job():
        res = (trainer or train_joint)(model, splits, tcfg)
        write_metrics_csv(res.records, out_dir / "metrics.csv")
        save_checkpoint(model, out_dir / "checkpoint", step=res.best_step, seeds=seeds)
        return {
            "best_step": res.best_step,
            "best_val_primary_loss": _num(res.best_val_primary_loss),
            "best_val_secondary_loss": _num(res.best_val_secondary_loss),
        }

    return job


def _num(v):
    v = float(v)
    return v if v == v else None


def train_single(cfg, run_dir, splits=None, task=None, lambda_s=None):
    """Train one model with ``cfg.training`` and write metrics + checkpoint."""
    splits = splits or load_splits(cfg)
    task = task or cfg.model.task
    lam = cfg.training.lambda_s if lambda_s is None else lambda_s
    model = build_model(cfg.model, task=task)
    tcfg = replace(cfg.training, task=task, lambda_s=lam)
    run_dir = Path(run_dir)
    return _guarded(run_dir, {"task": task, "lambda_s": lam},
                    _train_job(model, splits, tcfg, run_dir, cfg.seeds()))


def run_experiment1(cfg, run_dir, splits=None):
    """Sweep lambda_s over the grid, then run the pretrain-then-finetune probe.

    Layout: ``lambda_runs/lambda_<v>/`` per grid point and
    ``exp13/{pretrain,pretrained_finetune,random_finetune}/``.
    """
    run_dir = Path(run_dir)
    splits = splits or load_splits(cfg)
    e = cfg.experiment1
    seeds = cfg.seeds()
    summary = {"lambda_runs": [], "exp13": {}}
    for lam in e.lambda_grid:
        out = run_dir / "lambda_runs" / lambda_dirname(lam)
        log.info("experiment 1: lambda_s=%g", lam)
        model = build_model(cfg.model, task=e.task)
        tcfg = replace(cfg.training, task=e.task, lambda_s=lam, mode="joint")
        summary["lambda_runs"].append(
            _guarded(out, {"lambda_s": lam, "task": e.task}, _train_job(model, splits, tcfg, out, seeds)))

    pre_steps = cfg.training.steps if e.pretrain_steps is None else e.pretrain_steps
    ft_steps = cfg.training.steps if e.finetune_steps is None else e.finetune_steps
    base = replace(cfg.training, task=e.task)
    pretrained = build_model(cfg.model, task=e.task)
    out = run_dir / "exp13" / "pretrain"
    log.info("experiment 1.3: pretraining the secondary task")
    summary["exp13"]["pretrain"] = _guarded(
        out, {"task": e.task, "steps": pre_steps},
        _train_job(pretrained, splits, replace(base, steps=pre_steps), out, seeds, pretrain_secondary))

    for name in EXP13_RUNS:
        out = run_dir / "exp13" / name
        if name == "pretrained_finetune":
            if summary["exp13"]["pretrain"]["status"] != "ok":
                summary["exp13"][name] = _guarded(out, {"init": "pretrained"}, _fail("pretraining failed"))
                continue
            model, init = copy.deepcopy(pretrained), "pretrained"
        else:
            model, init = build_model(cfg.model, task=e.task), "random"
        log.info("experiment 1.3: fine-tuning from %s init", init)
        summary["exp13"][name] = _guarded(
            out, {"task": e.task, "init": init, "steps": ft_steps},
            _train_job(model, splits, replace(base, steps=ft_steps), out, seeds, finetune_primary))
    _write_json(run_dir / "experiment1.json", summary)
    return summary


def _fail(msg):
    def job():
        raise RuntimeError(msg)

    return job


def run_experiment2(cfg, run_dir, splits=None, checkpoint=None, method="ttt"):
    """Evaluate adaptation over every (shift, step size) pair plus unadapted baselines.

    Without ``checkpoint`` a model is first trained with the experiment's
    task and lambda_s under ``run_dir/model``.
    """
    run_dir = Path(run_dir)
    splits = splits or load_splits(cfg)
    e = cfg.experiment2
    if checkpoint is None:
        log.info("experiment 2: training a %s model at lambda_s=%g", e.task, e.lambda_s)
        info = train_single(cfg, run_dir / "model", splits, task=e.task, lambda_s=e.lambda_s)
        if info["status"] != "ok":
            raise RuntimeError(f"training the experiment 2 model failed: {info['error']}")
        checkpoint = run_dir / "model" / "checkpoint"
    model, _ = load_checkpoint(checkpoint)
    if model.task != e.task:
        raise ValueError(f"checkpoint task {model.task!r} does not match experiment task {e.task!r}")

    test = splits[e.split]
    shift_seed = cfg.seeds()["shift"]
    audit_path = run_dir / "audit.jsonl"
    audit_path.unlink(missing_ok=True)
    records, failures, eta0 = [], [], {}
    for name in e.shifts:
        spec = cfg.shift(name)
        base_cfg = replace(cfg.adapt, method="none")
        try:
            base = evaluate_with_adaptation(model, test, spec, base_cfg, e.split, shift_seed)
        except Exception as err:
            failures.append({"shift": name, "step_size": None, "error": str(err)})
            continue
        records.extend(base.records)
        for eta in e.step_sizes:
            log.info("experiment 2: shift=%s step_size=%g", name, eta)
            acfg = replace(cfg.adapt, method=method, step_size=eta)
            try:
                ev = evaluate_with_adaptation(model, test, spec, acfg, e.split, shift_seed)
            except Exception as err:
                failures.append({"shift": name, "step_size": eta, "error": str(err)})
                continue
            records.extend(ev.records)
            write_audit_jsonl(ev.audit, audit_path)
            if eta == 0:
                eta0[name] = bool(torch.equal(ev.logits, base.logits))
    write_adapt_csv(records, run_dir / "adapt_metrics.csv")
    summary = {"checkpoint": str(checkpoint), "method": method, "split": e.split,
               "eta0_matches_baseline": eta0, "failures": failures}
    _write_json(run_dir / "experiment2.json", summary)
    return summary


def adapt_eval(cfg, run_dir, checkpoint, splits=None, shifts=None, split="testA"):
    """One adaptation setting (``cfg.adapt``) over the named shifts."""
    run_dir = Path(run_dir)
    splits = splits or load_splits(cfg)
    model, _ = load_checkpoint(checkpoint)
    audit_path = run_dir / "audit.jsonl"
    audit_path.unlink(missing_ok=True)
    records = []
    for name in shifts or [s.name for s in cfg.shifts]:
        ev = evaluate_with_adaptation(model, splits[split], cfg.shift(name), cfg.adapt, split,
                                      cfg.seeds()["shift"])
        records.extend(ev.records)
        write_audit_jsonl(ev.audit, audit_path)
    write_adapt_csv(records, run_dir / "adapt_metrics.csv")
    return records
