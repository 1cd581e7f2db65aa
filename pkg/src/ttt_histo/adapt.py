"""Episodic test-time adaptation: TTT, AdaBN, Tent and MEMO.

Every episode follows snapshot -> adapt -> predict -> restore, so the model
that enters an episode is bit-identical to the one that leaves it and
predictions never depend on which episodes ran before.  Updates use plain
gradient descent with step size ``step_size``.
"""

import copy
import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from ._seeding import keyed_rng
from .model import bn_layers, frozen_bn_stats, partition_params, restore, snapshot, state_digest
from .shifts import ShiftSpec, shift_dataset
from .tasks import AugmentationConfig, augment_simclr, make_simclr_views, nt_xent, permute_pyramids, rsp_loss
from .training import predict_logits

METHODS = ("none", "ttt", "adabn", "tent", "memo")
ADAPT_FIELDS = ("method", "step_size", "n_steps", "shift", "split", "task", "metric", "value")


@dataclass
class AdaptConfig:
    method: str = "ttt"
    step_size: float = 1e-3
    n_steps: int = 1
    granularity: str = "batch"
    episode_size: int = 32
    memo_k: int = 8
    tent_allow_single: bool = False
    tent_batch_stats: bool = False
    update_bn_stats: bool = False
    temperature: float = 0.5
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentationConfig(**self.augment)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.step_size < 0:
            raise ValueError(f"step_size must be non-negative, got {self.step_size}")
        if self.n_steps < 0:
            raise ValueError("n_steps must be non-negative")
        if self.granularity not in ("batch", "single"):
            raise ValueError(f"granularity must be 'batch' or 'single', got {self.granularity!r}")
        if self.episode_size < 1 or self.memo_k < 1:
            raise ValueError("episode_size and memo_k must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["augment"] = self.augment.to_dict()
        return d


@dataclass
class EpisodeOutcome:
    logits: torch.Tensor
    pre_loss: float = float("nan")
    post_loss: float = float("nan")
    flags: list = field(default_factory=list)


def entropy(probs):
    """Mean Shannon entropy (nats) of the rows of ``probs``."""
    p = torch.as_tensor(probs, dtype=torch.float64)
    if p.ndim == 1:
        p = p[None]
    if (p < 0).any() or (p > 1).any() or ((p.sum(1) - 1).abs() > 1e-5).any():
        raise ValueError("rows must be probability distributions")
    return -(torch.where(p > 0, p * torch.log(p), torch.zeros_like(p))).sum(1).mean().item()


def entropy_from_logits(logits):
    logp = F.log_softmax(logits, dim=1)
    return -(logp.exp() * logp).sum(1).mean()


def marginal_probs(logits):
    return F.softmax(logits, dim=1).mean(0)


def marginal_entropy(logits):
    """Entropy of the mean softmax over the rows (MEMO objective)."""
    p = marginal_probs(logits)
    return -(p * torch.log(p.clamp_min(1e-30))).sum()


def per_sample_logits(model, images):
    """Primary logits with one forward per image (differentiable).

    Copies of the same image then get bit-identical logits, which a batched
    forward does not guarantee on CPU.
    """
    return torch.cat([model(images[i : i + 1]) for i in range(len(images))])


# -- helpers ------------------------------------------------------------------------


def _gd_step(params, loss, step_size):
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    if step_size == 0:
        return
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is not None:
                p.sub_(step_size * g)


def _eval_logits(model, images):
    return predict_logits(model, images)


def _secondary_inputs(model, unit, cfg, rng):
    if model.task == "rsp":
        return permute_pyramids(unit, rng)
    a, b = make_simclr_views(unit[:, 0], cfg.augment, rng)
    return torch.cat([a, b]), None


def _secondary_loss(model, inputs, labels, cfg):
    out = model.secondary_forward(inputs)
    return rsp_loss(out, labels) if model.task == "rsp" else nt_xent(out, cfg.temperature)


# -- methods ------------------------------------------------------------------------


def ttt_adapt(model, unit, cfg, rng, task=None):
    """Test-time training on one unit of ``(n, 3, 3, S, S)`` pyramids.

    Runs ``cfg.n_steps`` gradient-descent steps of the secondary loss over the
    encoder and secondary head, predicts the primary task on the 0.25 mpp
    level, then restores the model.  A non-finite secondary loss aborts the
    episode with unadapted predictions and a ``nonfinite_loss`` flag.
    """
    if task is not None and task != model.task:
        raise ValueError(f"model was joint-trained for {model.task!r}, not {task!r}")
    snap = snapshot(model)
    params = partition_params(model, {"encoder", "secondary"})
    inputs, labels = _secondary_inputs(model, unit, cfg, rng)
    out = EpisodeOutcome(None)
    try:
        model.train()
        for s in range(cfg.n_steps):
            with frozen_bn_stats(model, not cfg.update_bn_stats):
                loss = _secondary_loss(model, inputs, labels, cfg)
            if s == 0:
                out.pre_loss = loss.item()
            if not torch.isfinite(loss):
                raise FloatingPointError
            _gd_step(params, loss, cfg.step_size)
        with torch.no_grad(), frozen_bn_stats(model, not cfg.update_bn_stats):
            post = _secondary_loss(model, inputs, labels, cfg).item()
        out.post_loss = post
        if cfg.n_steps == 0:
            out.pre_loss = post
        if not math.isfinite(post):
            raise FloatingPointError
        out.logits = _eval_logits(model, unit[:, 0])
    except FloatingPointError:
        restore(model, snap)
        out.flags.append("nonfinite_loss")
        out.logits = _eval_logits(model, unit[:, 0])
    finally:
        restore(model, snap)
    return out


def _tent_forward(model, images, batch_stats, predict=False):
    if predict and not batch_stats:
        return _eval_logits(model, images)
    model.train(batch_stats)
    return model(images)


def tent_adapt(model, unit, cfg, rng=None):
    """Entropy minimisation over the batch-norm affine parameters only."""
    images = unit[:, 0] if unit.ndim == 5 else unit
    if images.shape[0] < 2:
        if not cfg.tent_allow_single:
            raise ValueError("tent needs at least two samples per episode (set tent_allow_single to override)")
        warnings.warn("tent on a single sample: the entropy objective is poorly conditioned", stacklevel=2)
    snap = snapshot(model)
    params = partition_params(model, {"affine"})
    out = EpisodeOutcome(None)
    try:
        for s in range(cfg.n_steps):
            with frozen_bn_stats(model):
                loss = entropy_from_logits(_tent_forward(model, images, cfg.tent_batch_stats))
            if s == 0:
                out.pre_loss = loss.item()
            if not torch.isfinite(loss):
                raise FloatingPointError
            _gd_step(params, loss, cfg.step_size)
        with torch.no_grad(), frozen_bn_stats(model):
            logits = _tent_forward(model, images, cfg.tent_batch_stats, predict=True)
        out.post_loss = entropy_from_logits(logits).item()
        if cfg.n_steps == 0:
            out.pre_loss = out.post_loss
        out.logits = logits
    except FloatingPointError:
        restore(model, snap)
        out.flags.append("nonfinite_loss")
        with torch.no_grad(), frozen_bn_stats(model):
            out.logits = _tent_forward(model, images, cfg.tent_batch_stats, predict=True)
    finally:
        restore(model, snap)
        model.eval()
    return out


def memo_copies(sample, cfg, rng):
    """``cfg.memo_k`` augmented copies of one ``(3, S, S)`` image."""
    batch = sample.unsqueeze(0).expand(cfg.memo_k, *sample.shape).contiguous()
    return augment_simclr(batch, cfg.augment, rng)


def memo_adapt(model, sample, cfg, rng):
    """Marginal entropy minimisation over all parameters for a single sample."""
    if sample.ndim == 4 and sample.shape[0] == 3:
        sample = sample[0]  # pyramid -> 0.25 mpp level
    if sample.ndim != 3:
        raise ValueError("memo adapts on exactly one sample: a (3, 3, S, S) pyramid or a (3, S, S) image")
    image = sample
    snap = snapshot(model)
    params = partition_params(model, {"encoder", "primary", "secondary"})
    copies = memo_copies(image, cfg, rng)
    out = EpisodeOutcome(None)
    model.eval()
    try:
        for s in range(cfg.n_steps):
            loss = marginal_entropy(per_sample_logits(model, copies))
            if s == 0:
                out.pre_loss = loss.item()
            if not torch.isfinite(loss):
                raise FloatingPointError
            _gd_step(params, loss, cfg.step_size)
        with torch.no_grad():
            out.post_loss = marginal_entropy(per_sample_logits(model, copies)).item()
        if cfg.n_steps == 0:
            out.pre_loss = out.post_loss
        out.logits = _eval_logits(model, image[None])
    except FloatingPointError:
        restore(model, snap)
        out.flags.append("nonfinite_loss")
        out.logits = _eval_logits(model, image[None])
    finally:
        restore(model, snap)
    return out


@torch.no_grad()
def _set_bn_stats_from(model, images, batch_size=256):
    """Replace every BN layer's running statistics with exact test-data statistics.

    Layers are processed in order, each seeing inputs produced by the already
    adapted layers before it.
    """
    model.eval()
    for bn in bn_layers(model):
        acc = {"n": 0, "s": 0.0, "ss": 0.0}

        def hook(_, inp, __, acc=acc):
            x = inp[0].transpose(0, 1).reshape(inp[0].shape[1], -1).double()
            acc["n"] += x.shape[1]
            acc["s"] = acc["s"] + x.sum(1)
            acc["ss"] = acc["ss"] + (x * x).sum(1)

        handle = bn.register_forward_hook(hook)
        try:
            for i in range(0, len(images), batch_size):
                model(images[i : i + batch_size])
        finally:
            handle.remove()
        mean = acc["s"] / acc["n"]
        var = (acc["ss"] / acc["n"] - mean * mean).clamp_min(0.0)
        bn.running_mean.copy_(mean.to(bn.running_mean.dtype))
        bn.running_var.copy_(var.to(bn.running_var.dtype))


def adabn_adapt(model, images):
    """Copy of ``model`` whose BN running statistics come from ``images``."""
    images = images[:, 0] if images.ndim == 5 else images
    if len(images) == 0:
        raise ValueError("AdaBN needs at least one test image")
    adapted = copy.deepcopy(model)
    _set_bn_stats_from(adapted, images)
    return adapted


def _adabn_episode(model, unit):
    images = unit[:, 0]
    if len(images) == 0:
        raise ValueError("AdaBN needs at least one test image")
    snap = snapshot(model)
    try:
        _set_bn_stats_from(model, images)
        logits = _eval_logits(model, images)
    finally:
        restore(model, snap)
    return EpisodeOutcome(logits)


def run_episode(model, unit, cfg, rng):
    """Dispatch one episode to the configured method."""
    if cfg.method == "none":
        return EpisodeOutcome(_eval_logits(model, unit[:, 0]))
    if cfg.method == "ttt":
        return ttt_adapt(model, unit, cfg, rng)
    if cfg.method == "adabn":
        return _adabn_episode(model, unit)
    if cfg.method == "tent":
        return tent_adapt(model, unit, cfg, rng)
    outs = [memo_adapt(model, unit[i], cfg, rng) for i in range(len(unit))]
    return EpisodeOutcome(
        torch.cat([o.logits for o in outs]),
        float(np.mean([o.pre_loss for o in outs])),
        float(np.mean([o.post_loss for o in outs])),
        sorted({f for o in outs for f in o.flags}),
    )


# -- evaluation ---------------------------------------------------------------------


@dataclass(frozen=True)
class AdaptMetric:
    method: str
    step_size: float
    n_steps: int
    shift: str
    split: str
    task: str
    metric: str
    value: float


@dataclass
class AdaptEvaluation:
    logits: torch.Tensor  # in the input order of the test set
    records: list
    audit: list

    @property
    def predictions(self):
        return self.logits.argmax(1)


def episodes(record_ids, cfg):
    """Episode index lists in a canonical (record-id sorted) order."""
    order = sorted(range(len(record_ids)), key=lambda i: record_ids[i])
    size = 1 if cfg.granularity == "single" else cfg.episode_size
    return [order[i : i + size] for i in range(0, len(order), size)]


def adaptive_logits(model, patches, cfg, shift_id="none"):
    """Per-record primary logits (input order) under ``cfg``, plus the episode audit.

    Episodes are formed from record ids, never from input order, and each
    episode's randomness is keyed by its record ids, so permuting the set
    permutes the logits and nothing else.  Labels are not used.
    """
    model.eval()
    if cfg.method == "none":
        return predict_logits(model, patches.tensor(level=0)), []
    logits = torch.empty(len(patches), 3)
    audit = []
    for k, idx in enumerate(episodes(patches.record_ids, cfg)):
        ids = [patches.record_ids[i] for i in idx]
        rng = keyed_rng(cfg.seed, "episode", *ids)
        before = state_digest(model)
        outcome = run_episode(model, patches.tensor(idx), cfg, rng)
        after = state_digest(model)
        flags = list(outcome.flags)
        if after != before:
            flags.append("reset_mismatch")
        logits[idx] = outcome.logits.detach()
        audit.append({
            "episode": k, "records": ids, "method": cfg.method, "step_size": cfg.step_size,
            "n_steps": cfg.n_steps, "shift": shift_id, "pre_digest": before,
            "post_digest": after, "pre_secondary_loss": _json_float(outcome.pre_loss),
            "post_secondary_loss": _json_float(outcome.post_loss), "flags": flags,
        })
    return logits, audit


def evaluate_with_adaptation(model, patches, shift=None, cfg=None, split="testA", seed=0):
    """Shift ``patches``, adapt episode by episode, and aggregate primary metrics."""
    cfg = cfg or AdaptConfig()
    shift = shift or ShiftSpec.identity()
    shifted = shift_dataset(patches, shift, seed)
    logits, audit = adaptive_logits(model, shifted, cfg, shift.spec_id)
    labels = torch.as_tensor(shifted.labels)
    loss = F.cross_entropy(logits, labels).item()
    acc = (logits.argmax(1) == labels).float().mean().item()
    key = (cfg.method, cfg.step_size, cfg.n_steps, shift.spec_id, split, "primary")
    records = [AdaptMetric(*key, "loss", loss), AdaptMetric(*key, "accuracy", acc)]
    return AdaptEvaluation(logits, records, audit)


def _json_float(v):
    return None if v is None or not math.isfinite(v) else float(v)


def write_adapt_csv(records, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(ADAPT_FIELDS)
        for r in records:
            w.writerow([r.method, repr(float(r.step_size)), r.n_steps, r.shift, r.split, r.task,
                        r.metric, repr(float(r.value))])
    return path


def read_adapt_csv(path):
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if tuple(header or ()) != ADAPT_FIELDS:
            raise ValueError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            try:
                if len(row) != len(ADAPT_FIELDS):
                    raise ValueError(f"expected {len(ADAPT_FIELDS)} fields")
                out.append(AdaptMetric(row[0], float(row[1]), int(row[2]), row[3], row[4], row[5],
                                       row[6], float(row[7])))
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: malformed row {row!r} ({e})") from None
    return out


def write_audit_jsonl(audit, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a") as f:
        for entry in audit:
            f.write(json.dumps(entry, sort_keys=True) + "\n")
    return path
