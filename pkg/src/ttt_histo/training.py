"""Joint training of the primary and secondary tasks, plus pretrain/finetune modes."""

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ._seeding import keyed_rng
from .data import stratified_batches
from .model import frozen_bn_stats, partition_params, restore, snapshot
from .tasks import (
    AugmentationConfig,
    augment_primary,
    make_simclr_views,
    nt_xent,
    permute_pyramids,
    retrieval_accuracy,
    rsp_loss,
)

MODES = ("joint", "vanilla", "pretrain-secondary", "finetune-primary")
SPLITS = ("train", "val", "testA", "testB")
METRIC_FIELDS = ("step", "split", "task", "metric", "value")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, records, detail):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step
        self.records = records


@dataclass
class TrainingConfig:
    lambda_s: float = 0.01
    steps: int = 2000
    batch_size: int = 24
    lr: float = 1e-3
    lr_gamma: float = 0.5
    lr_period: int = 5000
    log_period: int = 250
    val_steps: int = 120
    mode: str = "joint"
    task: str = None
    temperature: float = 0.5
    validate_at_start: bool = False
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentationConfig(**self.augment)
        if not 0.0 <= self.lambda_s <= 1.0:
            raise ValueError(f"lambda_s must be in [0, 1], got {self.lambda_s}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if min(self.lr_period, self.log_period, self.batch_size) <= 0 or self.steps < 0:
            raise ValueError("periods and batch size must be positive")
        if self.val_steps < 0:
            raise ValueError("val_steps must be non-negative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.task not in (None, "rsp", "simclr"):
            raise ValueError(f"unknown task {self.task!r}")

    def to_dict(self):
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d


@dataclass(frozen=True)
class MetricRecord:
    step: int
    split: str
    task: str
    metric: str
    value: float

    def __post_init__(self):
        object.__setattr__(self, "value", float(self.value))
        object.__setattr__(self, "step", int(self.step))
        if not math.isfinite(self.value):
            raise ValueError(f"non-finite metric value in {self}")


def joint_loss(primary_loss, secondary_loss, lambda_s):
    """``(1 - lambda_s) * primary_loss + lambda_s * secondary_loss``."""
    if not 0.0 <= lambda_s <= 1.0:
        raise ValueError(f"lambda_s must be in [0, 1], got {lambda_s}")
    return (1 - lambda_s) * primary_loss + lambda_s * secondary_loss


def lr_at(step, cfg=None):
    cfg = cfg or TrainingConfig()
    if step < 0:
        raise ValueError("step must be non-negative")
    return cfg.lr * cfg.lr_gamma ** (step // cfg.lr_period)


# -- metric CSV -----------------------------------------------------------------


def write_metrics_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in records:
            w.writerow([r.step, r.split, r.task, r.metric, repr(float(r.value))])
    return path


def read_metrics_csv(path):
    records = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != METRIC_FIELDS:
            raise ValueError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(METRIC_FIELDS):
                    raise ValueError(f"expected {len(METRIC_FIELDS)} fields")
                records.append(MetricRecord(int(row[0]), row[1], row[2], row[3], float(row[4])))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r} ({e})") from None
    return records


# -- batches and objective ------------------------------------------------------


@dataclass
class TrainBatch:
    images: torch.Tensor  # (B, 3, S, S) primary input (0.25 mpp, augmented)
    labels: torch.Tensor
    secondary: torch.Tensor = None  # RSP: (B, 3, 3, S, S); SimCLR: (2B, 3, S, S)
    secondary_labels: torch.Tensor = None


def make_batch(patches, idx, task, aug, aug_rng, sec_rng=None, log=None):
    """Primary augmentation first, then the secondary-task construction on the same base images."""
    labels = torch.as_tensor(patches.labels[idx])
    if task == "rsp":
        pyr = augment_primary(patches.tensor(idx), aug, aug_rng, log)
        batch = TrainBatch(pyr[:, 0].contiguous(), labels)
        if sec_rng is not None:
            batch.secondary, batch.secondary_labels = permute_pyramids(pyr, sec_rng)
            if log is not None:
                log.append({"stage": "rsp", "op": "permute", "labels": batch.secondary_labels.tolist()})
    else:
        x = augment_primary(patches.tensor(idx, level=0), aug, aug_rng, log)
        batch = TrainBatch(x, labels)
        if sec_rng is not None:
            a, b = make_simclr_views(x, aug, sec_rng, log)
            batch.secondary = torch.cat([a, b])
    return batch


def primary_loss(model, batch):
    logits = model(batch.images)
    return F.cross_entropy(logits, batch.labels), logits


def secondary_loss(model, batch, temperature=0.5, track_bn=False):
    # BN running statistics track the primary input distribution, unless
    # there is no primary forward at all (secondary pretraining)
    with frozen_bn_stats(model, model.training and not track_bn):
        out = model.secondary_forward(batch.secondary)
    if model.task == "rsp":
        return rsp_loss(out, batch.secondary_labels), out
    return nt_xent(out, temperature), out


def secondary_accuracy(model, batch, out):
    if model.task == "rsp":
        return (out.argmax(1) == batch.secondary_labels).float().mean().item()
    return retrieval_accuracy(out)


def joint_objective(model, batch, lambda_s, temperature=0.5):
    lp, _ = primary_loss(model, batch)
    ls, _ = secondary_loss(model, batch, temperature)
    return joint_loss(lp, ls, lambda_s)


# -- loop -------------------------------------------------------------------------


@dataclass
class TrainResult:
    model: torch.nn.Module
    records: list
    best_step: int
    best_val_primary_loss: float = float("nan")
    best_val_secondary_loss: float = float("nan")
    final_snapshot: object = None


def _trainable_roles(mode):
    return {
        "joint": {"encoder", "primary", "secondary"},
        "vanilla": {"encoder", "primary", "secondary"},
        "pretrain-secondary": {"encoder", "secondary"},
        "finetune-primary": {"encoder", "primary"},
    }[mode]


@torch.no_grad()
def validate(model, patches, cfg, n_batches=None):
    """Mean primary/secondary loss and accuracy over a fixed set of stratified batches."""
    n_batches = cfg.val_steps if n_batches is None else n_batches
    was_training = model.training
    model.eval()
    batches = stratified_batches(patches, cfg.batch_size, keyed_rng(cfg.seed, "val-batches"))
    aug_rng = keyed_rng(cfg.seed, "val-aug")
    sec_rng = keyed_rng(cfg.seed, "val-secondary")
    identity = AugmentationConfig.identity()
    sums = np.zeros(4)
    for _ in range(n_batches):
        # validation sees un-augmented primary inputs; SimCLR still needs its views
        batch = make_batch(patches, next(batches), model.task,
                           AugmentationConfig(identity.primary, cfg.augment.simclr), aug_rng, sec_rng)
        lp, logits = primary_loss(model, batch)
        ls, out = secondary_loss(model, batch, cfg.temperature)
        sums += [lp.item(), (logits.argmax(1) == batch.labels).float().mean().item(),
                 ls.item(), secondary_accuracy(model, batch, out)]
    model.train(was_training)
    return dict(zip(("primary_loss", "primary_accuracy", "secondary_loss", "secondary_accuracy"),
                    sums / max(n_batches, 1)))


def _val_records(step, metrics):
    return [
        MetricRecord(step, "val", "primary", "loss", metrics["primary_loss"]),
        MetricRecord(step, "val", "primary", "accuracy", metrics["primary_accuracy"]),
        MetricRecord(step, "val", "secondary", "loss", metrics["secondary_loss"]),
        MetricRecord(step, "val", "secondary", "accuracy", metrics["secondary_accuracy"]),
    ]


def train_joint(model, data, cfg, secondary_enabled=True, on_step=None, log=None):
    """Train ``model`` in place according to ``cfg.mode``.

    ``data`` maps split names to :class:`PatchSet`; ``train`` is required and
    ``val`` enables validation and best-checkpoint selection.  The returned
    model holds the best-validation-primary-loss state (final state for
    ``pretrain-secondary`` or when nothing was validated).
    """
    if cfg.task is not None and cfg.task != model.task:
        raise ValueError(f"training config is for {cfg.task!r} but the model is built for {model.task!r}")
    mode = cfg.mode
    lam = 0.0 if mode == "vanilla" else cfg.lambda_s
    use_primary = mode != "pretrain-secondary"
    use_secondary = secondary_enabled and mode != "finetune-primary"
    params = partition_params(model, _trainable_roles(mode))
    opt = torch.optim.Adam(params, lr=lr_at(0, cfg))

    train = data["train"]
    val = data.get("val")
    batches = stratified_batches(train, cfg.batch_size, keyed_rng(cfg.seed, "batches"))
    aug_rng = keyed_rng(cfg.seed, "augment")
    sec_rng = keyed_rng(cfg.seed, "secondary")

    records = []
    best = None
    best_metrics = None
    best_step = 0

    def maybe_validate(step):
        nonlocal best, best_metrics, best_step
        if val is None or cfg.val_steps == 0:
            return
        m = validate(model, val, cfg)
        records.extend(_val_records(step, m))
        if use_primary and (best_metrics is None or m["primary_loss"] < best_metrics["primary_loss"]):
            best, best_metrics, best_step = snapshot(model), m, step

    model.train()
    if cfg.validate_at_start:
        maybe_validate(0)
    for k in range(cfg.steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(k, cfg)
        batch = make_batch(train, next(batches), model.task, cfg.augment, aug_rng,
                           sec_rng if use_secondary else None, log)
        opt.zero_grad(set_to_none=True)
        lp = ls = None
        if use_primary:
            lp, logits = primary_loss(model, batch)
        if use_secondary:
            ls, out = secondary_loss(model, batch, cfg.temperature, track_bn=not use_primary)
        if mode == "pretrain-secondary":
            loss = ls
        elif mode == "finetune-primary" or ls is None:
            loss = lp
        else:
            loss = joint_loss(lp, ls, lam)
        if not torch.isfinite(loss):
            raise TrainingDiverged(k + 1, records, f"loss={loss.item()}")
        loss.backward()
        opt.step()
        step = k + 1
        if on_step is not None:
            on_step(step, model)
        if step % cfg.log_period == 0:
            if lp is not None:
                records.append(MetricRecord(step, "train", "primary", "loss", lp.item()))
                records.append(MetricRecord(step, "train", "primary", "accuracy",
                                            (logits.argmax(1) == batch.labels).float().mean().item()))
            if ls is not None:
                records.append(MetricRecord(step, "train", "secondary", "loss", ls.item()))
                records.append(MetricRecord(step, "train", "secondary", "accuracy",
                                            secondary_accuracy(model, batch, out.detach())))
            maybe_validate(step)
    model.eval()
    final = snapshot(model)
    result = TrainResult(model, records, cfg.steps, final_snapshot=final)
    if best is not None and mode != "pretrain-secondary":
        restore(model, best)
        result.best_step = best_step
        result.best_val_primary_loss = best_metrics["primary_loss"]
        result.best_val_secondary_loss = best_metrics["secondary_loss"]
    return result


def pretrain_secondary(model, data, cfg):
    """Optimize the secondary loss alone over encoder + secondary head."""
    return train_joint(model, data, _with(cfg, mode="pretrain-secondary"))


def finetune_primary(model, data, cfg):
    """Optimize the primary loss over encoder + primary head; the secondary head stays frozen.

    Secondary validation metrics are still logged, starting at step 0.
    """
    return train_joint(model, data, _with(cfg, mode="finetune-primary", lambda_s=0.0, validate_at_start=True))


def _with(cfg, **changes):
    d = {**cfg.__dict__, **changes}
    return TrainingConfig(**d)


@torch.no_grad()
def predict_logits(model, images, batch_size=1):
    """Eval-mode primary logits for an NCHW tensor.

    Test-time inference runs one sample per forward by default: CPU conv
    kernels round differently for different batch sizes (~1e-8), and
    per-sample forwards make every prediction independent of how the test
    set was batched.
    """
    model.eval()
    return torch.cat([model(images[i : i + batch_size]) for i in range(0, len(images), batch_size)])


def evaluate_primary(model, patches, batch_size=1):
    logits = predict_logits(model, patches.tensor(level=0), batch_size)
    labels = torch.as_tensor(patches.labels)
    return {
        "loss": F.cross_entropy(logits, labels).item(),
        "accuracy": (logits.argmax(1) == labels).float().mean().item(),
        "logits": logits,
    }
