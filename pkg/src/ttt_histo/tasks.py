"""Secondary tasks (resolution sequence prediction, SimCLR) and augmentations.

All augmentation functions take NCHW float tensors in [0, 1].  A leading
pyramid axis is allowed, ``(N, L, 3, H, W)``; the same randomly drawn
transform is then applied to every level of an item.  Random parameters come
from an explicit ``numpy.random.Generator``.
"""

import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

MPP_LEVELS = (0.25, 0.5, 1.0)

# label k <-> k-th permutation of the level indices in lexicographic order,
# which is also lexicographic order of the displayed mpp sequence
PERMUTATIONS = tuple(itertools.permutations(range(3)))


def order_of(label):
    """Displayed mpp sequence for a permutation label."""
    if not 0 <= int(label) < len(PERMUTATIONS):
        raise ValueError(f"permutation label must be in [0, 5], got {label}")
    return tuple(MPP_LEVELS[i] for i in PERMUTATIONS[int(label)])


def label_of(mpp_order):
    """Permutation label for a displayed mpp sequence."""
    idx = tuple(MPP_LEVELS.index(float(m)) for m in mpp_order)
    try:
        return PERMUTATIONS.index(idx)
    except ValueError:
        raise ValueError(f"not a permutation of {MPP_LEVELS}: {mpp_order}") from None


def make_rsp_example(patches, rng):
    """Reorder the three pyramid levels by a uniformly drawn permutation.

    Returns the reordered patches and the permutation label.
    """
    label = int(rng.integers(len(PERMUTATIONS)))
    return patches[list(PERMUTATIONS[label])], label


def permute_pyramids(pyramids, rng):
    """Batched :func:`make_rsp_example` over a ``(B, 3, ...)`` tensor."""
    labels = rng.integers(len(PERMUTATIONS), size=pyramids.shape[0])
    index = torch.as_tensor(np.array([PERMUTATIONS[k] for k in labels]), dtype=torch.long)
    gather = index.view(-1, 3, *([1] * (pyramids.ndim - 2))).expand_as(pyramids)
    return torch.gather(pyramids, 1, gather), torch.as_tensor(labels, dtype=torch.long)


def rsp_loss(logits, labels):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (labels.min() < 0 or labels.max() >= len(PERMUTATIONS)):
        raise ValueError("RSP labels must lie in [0, 5]")
    if not torch.isfinite(logits).all():
        raise ValueError("non-finite RSP logits")
    return F.cross_entropy(logits, labels)


def nt_xent(projections, temperature=0.5):
    """Normalized temperature-scaled cross entropy.

    ``projections`` holds 2N rows ordered ``a_1..a_N, b_1..b_N``; the positive
    for ``a_i`` is ``b_i`` and vice versa.  Every anchor's denominator runs
    over the other 2N - 1 rows.  The loss is the mean over all 2N anchors.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    n2 = projections.shape[0]
    if n2 < 2 or n2 % 2:
        raise ValueError("need an even number (>= 2) of projections")
    norms = projections.norm(dim=1)
    if (norms <= 1e-12).any():
        raise ValueError("zero-norm projection; cosine similarity undefined")
    z = projections / norms[:, None]
    sim = z @ z.T / temperature
    sim = sim.masked_fill(torch.eye(n2, dtype=torch.bool), float("-inf"))
    n = n2 // 2
    targets = torch.cat([torch.arange(n, n2), torch.arange(0, n)])
    return F.cross_entropy(sim, targets)


def retrieval_accuracy(projections):
    """Fraction of anchors whose most similar other row is their positive."""
    n2 = projections.shape[0]
    z = F.normalize(projections, dim=1)
    sim = (z @ z.T).masked_fill(torch.eye(n2, dtype=torch.bool), float("-inf"))
    n = n2 // 2
    targets = torch.cat([torch.arange(n, n2), torch.arange(0, n)])
    return (sim.argmax(1) == targets).float().mean().item()


# -- augmentation ------------------------------------------------------------


@dataclass
class PrimaryAugConfig:
    jitter: float = 0.1
    hflip_p: float = 0.5
    vflip_p: float = 0.5


@dataclass
class SimCLRAugConfig:
    rotation: str = "quarter"  # quarter | any | none
    flip_p: float = 0.5
    jitter: float = 0.5
    jitter_p: float = 0.8
    crop_scale: tuple = (0.4, 1.0)
    grayscale_p: float = 0.2


@dataclass
class AugmentationConfig:
    primary: PrimaryAugConfig = field(default_factory=PrimaryAugConfig)
    simclr: SimCLRAugConfig = field(default_factory=SimCLRAugConfig)

    def __post_init__(self):
        if isinstance(self.primary, dict):
            self.primary = PrimaryAugConfig(**self.primary)
        if isinstance(self.simclr, dict):
            self.simclr = SimCLRAugConfig(**self.simclr)
        s = self.simclr
        s.crop_scale = tuple(float(v) for v in s.crop_scale)
        for name, p in [("primary.hflip_p", self.primary.hflip_p), ("primary.vflip_p", self.primary.vflip_p),
                        ("simclr.flip_p", s.flip_p), ("simclr.jitter_p", s.jitter_p),
                        ("simclr.grayscale_p", s.grayscale_p)]:
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be a probability, got {p}")
        if self.primary.jitter < 0 or s.jitter < 0:
            raise ValueError("jitter strength must be non-negative")
        lo, hi = s.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError(f"crop_scale must satisfy 0 < lo <= hi <= 1, got {s.crop_scale}")
        if s.rotation not in ("quarter", "any", "none"):
            raise ValueError(f"unknown rotation mode {s.rotation!r}")

    @classmethod
    def identity(cls):
        return cls(
            PrimaryAugConfig(jitter=0.0, hflip_p=0.0, vflip_p=0.0),
            SimCLRAugConfig(rotation="none", flip_p=0.0, jitter=0.0, jitter_p=0.0,
                            crop_scale=(1.0, 1.0), grayscale_p=0.0),
        )

    def to_dict(self):
        d = asdict(self)
        d["simclr"]["crop_scale"] = list(self.simclr.crop_scale)
        return d


_LUMA = torch.tensor([0.299, 0.587, 0.114])
_RGB2YIQ = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
_YIQ2RGB = torch.linalg.inv(_RGB2YIQ)


def _log(log, stage, op, **params):
    if log is not None:
        log.append({"stage": stage, "op": op,
                    **{k: np.asarray(v).tolist() for k, v in params.items()}})


def _bcast(v, x):
    return torch.as_tensor(v, dtype=x.dtype).view(-1, *([1] * (x.ndim - 1)))


def _gray(x):
    return torch.einsum("...chw,c->...hw", x, _LUMA.to(x.dtype)).unsqueeze(-3)


def _select(mask, a, b):
    return torch.where(_bcast(mask, a).bool(), a, b)


def _jitter(x, strength, hue_strength, active, rng, log, stage):
    n = x.shape[0]
    if strength > 0:
        b, c, s = (rng.uniform(1 - strength, 1 + strength, n) for _ in range(3))
        b, c, s = (np.where(active, v, 1.0) for v in (b, c, s))
        _log(log, stage, "color_jitter", brightness=b, contrast=c, saturation=s)
        x = (x * _bcast(b, x)).clamp(0, 1)
        m = _gray(x).mean(dim=(-2, -1), keepdim=True)
        x = ((x - m) * _bcast(c, x) + m).clamp(0, 1)
        g = _gray(x)
        x = ((x - g) * _bcast(s, x) + g).clamp(0, 1)
    if hue_strength > 0:
        h = np.where(active, rng.uniform(-hue_strength, hue_strength, n), 0.0)
        _log(log, stage, "hue", shift=h)
        theta = torch.as_tensor(2 * math.pi * h, dtype=x.dtype)
        cos, sin = torch.cos(theta), torch.sin(theta)
        rot = torch.zeros(n, 3, 3, dtype=x.dtype)
        rot[:, 0, 0] = 1
        rot[:, 1, 1], rot[:, 1, 2], rot[:, 2, 1], rot[:, 2, 2] = cos, -sin, sin, cos
        m = _YIQ2RGB.to(x.dtype) @ rot @ _RGB2YIQ.to(x.dtype)
        m = m.view(n, *([1] * (x.ndim - 4)), 3, 3)
        x = torch.einsum("...ij,...jhw->...ihw", m, x).clamp(0, 1)
    return x


def _flip(x, p, dim, rng, log, stage, name):
    if p <= 0:
        return x
    mask = rng.random(x.shape[0]) < p
    _log(log, stage, name, mask=mask)
    if not mask.any():
        return x
    return _select(mask, x.flip(dim), x)


def _as_batch(images):
    single = images.ndim == 3
    return (images.unsqueeze(0) if single else images), single


def augment_primary(images, cfg, rng, log=None):
    """Colour jitter and horizontal/vertical flips."""
    cfg = cfg.primary if isinstance(cfg, AugmentationConfig) else cfg
    x, single = _as_batch(images)
    active = np.ones(x.shape[0], dtype=bool)
    x = _jitter(x, cfg.jitter, cfg.jitter / 4, active, rng, log, "primary")
    x = _flip(x, cfg.hflip_p, -1, rng, log, "primary", "hflip")
    x = _flip(x, cfg.vflip_p, -2, rng, log, "primary", "vflip")
    return x[0] if single else x


def _resized_crop(x, scale, rng, log, stage):
    lo, hi = scale
    n = x.shape[0]
    area = rng.uniform(lo, hi, n)
    ratio = np.exp(rng.uniform(math.log(3 / 4), math.log(4 / 3), n))
    w = np.minimum(np.sqrt(area * ratio), 1.0)
    h = np.minimum(np.sqrt(area / ratio), 1.0)
    cx = rng.uniform(-(1 - w), 1 - w)
    cy = rng.uniform(-(1 - h), 1 - h)
    _log(log, stage, "resized_crop", w=w, h=h, cx=cx, cy=cy)
    todo = ~((w == 1.0) & (h == 1.0))
    if not todo.any():
        return x
    theta = torch.zeros(n, 2, 3, dtype=x.dtype)
    theta[:, 0, 0] = torch.as_tensor(w, dtype=x.dtype)
    theta[:, 1, 1] = torch.as_tensor(h, dtype=x.dtype)
    theta[:, 0, 2] = torch.as_tensor(cx, dtype=x.dtype)
    theta[:, 1, 2] = torch.as_tensor(cy, dtype=x.dtype)
    return _select(todo, _warp(x, theta), x)


def _warp(x, theta):
    lead = x.shape[:-3]
    flat = x.reshape(lead[0], -1, *x.shape[-2:])
    grid = F.affine_grid(theta, list(flat.shape), align_corners=False)
    out = F.grid_sample(flat, grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return out.reshape(x.shape)


def _rotate(x, mode, rng, log, stage):
    n = x.shape[0]
    if mode == "none":
        return x
    if mode == "quarter":
        k = rng.integers(4, size=n)
        _log(log, stage, "rot90", k=k)
        out = x.clone()
        for q in (1, 2, 3):
            idx = np.flatnonzero(k == q)
            if len(idx):
                out[idx] = torch.rot90(x[idx], q, dims=(-2, -1))
        return out
    angle = rng.uniform(0, 2 * math.pi, n)
    _log(log, stage, "rotate", angle=angle)
    theta = torch.zeros(n, 2, 3, dtype=x.dtype)
    a = torch.as_tensor(angle, dtype=x.dtype)
    theta[:, 0, 0], theta[:, 0, 1] = torch.cos(a), -torch.sin(a)
    theta[:, 1, 0], theta[:, 1, 1] = torch.sin(a), torch.cos(a)
    return _warp(x, theta)


def augment_simclr(images, cfg, rng, log=None):
    """One draw of the contrastive augmentation family.

    Rotation, flips, random resized crop, strong colour jitter (applied with
    probability ``jitter_p``) and random grayscale, in that order.
    """
    cfg = cfg.simclr if isinstance(cfg, AugmentationConfig) else cfg
    x, single = _as_batch(images)
    x = _rotate(x, cfg.rotation, rng, log, "simclr")
    x = _flip(x, cfg.flip_p, -1, rng, log, "simclr", "hflip")
    x = _flip(x, cfg.flip_p, -2, rng, log, "simclr", "vflip")
    if tuple(cfg.crop_scale) != (1.0, 1.0):
        x = _resized_crop(x, cfg.crop_scale, rng, log, "simclr")
    if cfg.jitter > 0 and cfg.jitter_p > 0:
        active = rng.random(x.shape[0]) < cfg.jitter_p
        x = _jitter(x, 0.8 * cfg.jitter, 0.2 * cfg.jitter, active, rng, log, "simclr")
    if cfg.grayscale_p > 0:
        mask = rng.random(x.shape[0]) < cfg.grayscale_p
        _log(log, "simclr", "grayscale", mask=mask)
        if mask.any():
            x = _select(mask, _gray(x).expand_as(x), x)
    return x[0] if single else x


def make_simclr_views(images, cfg, rng, log=None):
    """Two independent augmentations of every image in the batch."""
    if images.shape[0] < 1:
        raise ValueError("need at least one image")
    return augment_simclr(images, cfg, rng, log), augment_simclr(images, cfg, rng, log)
