"""Synthetic multi-resolution slides, concentric patch sampling, batching, splits.

A virtual slide is stored at 0.25 microns per pixel.  Coarser levels are
produced by area averaging, so a patch at 0.5 mpp is exactly the 2x2 block
mean of the corresponding 0.25 mpp region.
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ._seeding import derive_seed

BASE_MPP = 0.25
MPP_LEVELS = (0.25, 0.5, 1.0)
CLASS_NAMES = ("normal", "stroma", "cancer")
PAPER_SPLIT = (232, 47, 47, 47)
SPLIT_NAMES = ("train", "val", "testA", "testB")


@dataclass
class DataConfig:
    n_slides: int = 16
    slide_size: int = 1024
    patch_size: int = 64
    patches_per_class: int = 30
    n_regions: int = 12
    purity: float = 0.9
    fine_detail: float = 0.06
    seed: int = 0

    def __post_init__(self):
        if self.n_slides < 1:
            raise ValueError("n_slides must be >= 1")
        if self.patch_size < 2 or self.patch_size % 2:
            raise ValueError(f"patch_size must be even and >= 2, got {self.patch_size}")
        if self.slide_size < 4 * self.patch_size + 8:
            raise ValueError(
                f"slide_size {self.slide_size} cannot hold a 1.0 mpp footprint of "
                f"{4 * self.patch_size} px"
            )
        if self.n_regions < 3:
            raise ValueError("n_regions must be >= 3 so every class can appear")
        if not 0.0 <= self.purity <= 1.0:
            raise ValueError("purity must be in [0, 1]")


@dataclass
class VirtualSlide:
    slide_id: str
    image: np.ndarray  # (H, W, 3) uint8 at 0.25 mpp
    class_map: np.ndarray  # (H, W) uint8 in {0, 1, 2}
    seed: int
    mpp: float = BASE_MPP

    def at_mpp(self, mpp):
        """The whole slide resampled to ``mpp`` by area averaging."""
        f = _factor(mpp)
        img = self.image.astype(np.float32) / 255.0
        return _area_downsample(img, f)


@dataclass
class PatchPyramid:
    patches: np.ndarray  # (3, S, S, 3) float32 in [0, 1], one per mpp level
    center_um: tuple
    mpp: tuple = MPP_LEVELS

    @property
    def size_px(self):
        return self.patches.shape[1]

    @property
    def field_of_view_um(self):
        return tuple(self.size_px * m for m in self.mpp)


@dataclass
class PatchRecord:
    record_id: str
    slide_id: str
    center: tuple  # base-pixel (row, col)
    label: int
    pyramid: PatchPyramid


@dataclass
class SplitSpec:
    fractions: tuple = tuple(n / sum(PAPER_SPLIT) for n in PAPER_SPLIT)
    seed: int = 0

    def __post_init__(self):
        self.fractions = tuple(float(f) for f in self.fractions)
        if len(self.fractions) != 4 or min(self.fractions) < 0:
            raise ValueError("need four non-negative split fractions")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {sum(self.fractions)}")


def _factor(mpp):
    f = mpp / BASE_MPP
    if f < 1 or abs(f - round(f)) > 1e-9:
        raise ValueError(f"mpp {mpp} is not an integer multiple of {BASE_MPP}")
    return int(round(f))


def _area_downsample(img, f):
    if f == 1:
        return img
    h, w = img.shape[0] // f, img.shape[1] // f
    img = img[: h * f, : w * f]
    return img.reshape(h, f, w, f, *img.shape[2:]).mean(axis=(1, 3))


# -- synthetic texture generator -------------------------------------------------


def _bandpass(rng, size, f_center, bandwidth, angle=None, anisotropy=1.0):
    white = rng.standard_normal((size, size))
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.rfftfreq(size)[None, :]
    if angle is not None:
        c, s = np.cos(angle), np.sin(angle)
        fx, fy = c * fx + s * fy, -s * fx + c * fy
    r = np.sqrt(fx**2 + (anisotropy * fy) ** 2)
    mask = np.exp(-0.5 * ((r - f_center) / bandwidth) ** 2)
    out = np.fft.irfft2(np.fft.rfft2(white) * mask, s=(size, size))
    return (out - out.mean()) / (out.std() + 1e-12)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _mix(a, b, t):
    a, b = np.asarray(a), np.asarray(b)
    return a + (b - a) * t[..., None]


def _class_textures(rng, size):
    # normal tissue: large pale lumens inside pink epithelium
    glands = _sigmoid(6.0 * (_bandpass(rng, size, 1 / 64, 1 / 160) - 0.7))
    epi = 0.06 * _bandpass(rng, size, 1 / 16, 1 / 48)[..., None]
    normal = _mix((0.86, 0.58, 0.74), (0.96, 0.92, 0.95), glands) + epi * np.array([1.0, 0.8, 0.6])
    # stroma: oriented fibres
    angle = rng.uniform(0, np.pi)
    fibres = _bandpass(rng, size, 1 / 20, 1 / 120, angle=angle, anisotropy=6.0)
    stroma = _mix((0.88, 0.56, 0.70), (0.97, 0.78, 0.86), _sigmoid(2.5 * fibres))
    # cancer: crowded dark nuclei
    nuclei = _sigmoid(5.0 * (_bandpass(rng, size, 1 / 10, 1 / 40) - 0.9))
    cancer = _mix((0.80, 0.56, 0.76), (0.42, 0.26, 0.56), nuclei)
    return np.stack([normal, stroma, cancer])


def _class_map(rng, size, n_regions):
    coarse = max(size // 4, 8)
    pts = rng.uniform(0, coarse, size=(n_regions, 2))
    classes = np.resize(np.arange(3), n_regions)
    rng.shuffle(classes)
    yy, xx = np.mgrid[0:coarse, 0:coarse] + 0.5
    # wobble the coordinates so region borders are not straight lines
    yy = yy + 3.0 * _bandpass(rng, coarse, 1 / 24, 1 / 48)
    xx = xx + 3.0 * _bandpass(rng, coarse, 1 / 24, 1 / 48)
    d = (yy[None] - pts[:, 0, None, None]) ** 2 + (xx[None] - pts[:, 1, None, None]) ** 2
    cmap = classes[d.argmin(0)].astype(np.uint8)
    reps = -(-size // coarse)
    return np.kron(cmap, np.ones((reps, reps), dtype=np.uint8))[:size, :size]


def _make_slide(slide_id, cfg, seed):
    rng = np.random.default_rng(seed)
    size = cfg.slide_size
    cmap = _class_map(rng, size, cfg.n_regions)
    textures = _class_textures(rng, size)
    img = np.take_along_axis(textures, cmap[None, :, :, None].astype(np.intp), axis=0)[0]
    img = img + cfg.fine_detail * _bandpass(rng, size, 0.35, 0.08)[..., None]
    img = img * rng.uniform(0.97, 1.03, size=3)
    img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    return VirtualSlide(slide_id, img, cmap, seed)


def generate_synthetic_dataset(cfg, seed=None):
    """Deterministic corpus of virtual slides."""
    seed = cfg.seed if seed is None else seed
    return [
        _make_slide(f"slide{i:03d}", cfg, derive_seed(seed, "slide", i))
        for i in range(cfg.n_slides)
    ]


def corpus_digest(slides):
    h = hashlib.sha256()
    for s in sorted(slides, key=lambda s: s.slide_id):
        h.update(s.slide_id.encode())
        h.update(s.image.tobytes())
        h.update(s.class_map.tobytes())
    return h.hexdigest()


def save_corpus(slides, path, cfg=None):
    path = Path(path)
    (path / "slides").mkdir(parents=True, exist_ok=True)
    for s in slides:
        Image.fromarray(s.image).save(path / "slides" / f"{s.slide_id}.png")
        Image.fromarray(s.class_map).save(path / "slides" / f"{s.slide_id}_classes.png")
        meta = {"slide_id": s.slide_id, "seed": s.seed, "mpp": s.mpp, "classes": list(CLASS_NAMES)}
        (path / "slides" / f"{s.slide_id}.json").write_text(json.dumps(meta, indent=1) + "\n")
    if cfg is not None:
        (path / "corpus.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True) + "\n")
    (path / "digest.txt").write_text(corpus_digest(slides) + "\n")
    return path


def load_corpus(path):
    path = Path(path)
    slides = []
    for meta_file in sorted((path / "slides").glob("*.json")):
        meta = json.loads(meta_file.read_text())
        sid = meta["slide_id"]
        img = np.asarray(Image.open(path / "slides" / f"{sid}.png").convert("RGB"))
        cmap = np.asarray(Image.open(path / "slides" / f"{sid}_classes.png"))
        slides.append(VirtualSlide(sid, img, cmap, meta["seed"], meta["mpp"]))
    digest_file = path / "digest.txt"
    if digest_file.exists() and digest_file.read_text().strip() != corpus_digest(slides):
        raise ValueError(f"corpus at {path} does not match its digest")
    return slides


# -- patch sampling --------------------------------------------------------------


def sample_concentric(slide, center, size_px):
    """Three concentric patches at 0.25, 0.5 and 1.0 mpp around ``center``.

    ``center`` is a base-pixel (row, col) corner point; every patch is
    ``size_px`` square.  Raises if the 1.0 mpp footprint leaves the slide.
    """
    if size_px < 2 or size_px % 2:
        raise ValueError("size_px must be even and >= 2")
    cy, cx = (int(c) for c in center)
    h, w = slide.image.shape[:2]
    patches = []
    for mpp in MPP_LEVELS:
        f = _factor(mpp)
        half = f * size_px // 2
        if cy - half < 0 or cx - half < 0 or cy + half > h or cx + half > w:
            raise ValueError(
                f"{mpp} mpp footprint around {center} exceeds slide bounds {h}x{w}"
            )
        region = slide.image[cy - half : cy + half, cx - half : cx + half].astype(np.float32) / 255.0
        patches.append(_area_downsample(region, f))
    return PatchPyramid(np.stack(patches).astype(np.float32), (cy * BASE_MPP, cx * BASE_MPP))


@dataclass
class PatchSet:
    """Columnar store of patch records.  ``pyramids`` is (N, 3, S, S, 3)."""

    pyramids: np.ndarray
    labels: np.ndarray
    slide_ids: list
    centers: np.ndarray
    record_ids: list = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.centers = np.asarray(self.centers, dtype=np.int64).reshape(-1, 2)
        if self.record_ids is None:
            self.record_ids = [f"{s}:{r}:{c}" for s, (r, c) in zip(self.slide_ids, self.centers)]
        n = len(self.labels)
        if not (len(self.pyramids) == len(self.slide_ids) == len(self.centers) == len(self.record_ids) == n):
            raise ValueError("PatchSet columns have inconsistent lengths")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        cy, cx = self.centers[i]
        return PatchRecord(
            self.record_ids[i], self.slide_ids[i], (int(cy), int(cx)), int(self.labels[i]),
            PatchPyramid(self.pyramids[i], (cy * BASE_MPP, cx * BASE_MPP)),
        )

    @property
    def patch_size(self):
        return self.pyramids.shape[2]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return PatchSet(self.pyramids[idx], self.labels[idx], [self.slide_ids[i] for i in idx],
                        self.centers[idx], [self.record_ids[i] for i in idx])

    def replace_pyramids(self, pyramids):
        return PatchSet(pyramids, self.labels.copy(), list(self.slide_ids), self.centers.copy(),
                        list(self.record_ids))

    def tensor(self, idx=None, level=None):
        """NCHW float tensor: (n, 3, 3, S, S), or (n, 3, S, S) for one ``level``."""
        p = self.pyramids if idx is None else self.pyramids[np.asarray(idx)]
        if level is not None:
            p = p[:, level]
        return torch.from_numpy(np.ascontiguousarray(np.moveaxis(p, -1, -3)))

    @classmethod
    def concat(cls, sets):
        return cls(np.concatenate([s.pyramids for s in sets]), np.concatenate([s.labels for s in sets]),
                   [x for s in sets for x in s.slide_ids], np.concatenate([s.centers for s in sets]),
                   [x for s in sets for x in s.record_ids])


def extract_patches(slides, cfg, seed=None):
    """Sample class-pure concentric pyramids from every slide."""
    seed = cfg.seed if seed is None else seed
    S = cfg.patch_size
    margin = 2 * S
    pyramids, labels, sids, centers = [], [], [], []
    for slide in slides:
        rng = np.random.default_rng(derive_seed(seed, "patches", slide.slide_id))
        h, w = slide.class_map.shape
        valid = np.zeros_like(slide.class_map, dtype=bool)
        valid[margin : h - margin + 1, margin : w - margin + 1] = True
        for c in range(len(CLASS_NAMES)):
            cand = np.flatnonzero(valid & (slide.class_map == c))
            taken = 0
            for flat in rng.permutation(cand)[: 50 * cfg.patches_per_class]:
                if taken == cfg.patches_per_class:
                    break
                cy, cx = divmod(int(flat), w)
                core = slide.class_map[cy - S // 2 : cy + S // 2, cx - S // 2 : cx + S // 2]
                if (core == c).mean() < cfg.purity:
                    continue
                pyramids.append(sample_concentric(slide, (cy, cx), S).patches)
                labels.append(c)
                sids.append(slide.slide_id)
                centers.append((cy, cx))
                taken += 1
    if not pyramids:
        raise ValueError("no patches could be sampled from the corpus")
    return PatchSet(np.stack(pyramids), labels, sids, centers)


# -- batching and splits -----------------------------------------------------------


def stratified_batches(labels, batch_size, rng, n_classes=3):
    """Endless iterator of index arrays with ``batch_size / n_classes`` per class.

    Each class is drawn without replacement until its pool is exhausted, then
    the pool is reshuffled.
    """
    if batch_size <= 0 or batch_size % n_classes:
        raise ValueError(f"batch_size must be a positive multiple of {n_classes}, got {batch_size}")
    labels = np.asarray(labels.labels if isinstance(labels, PatchSet) else labels)
    per = batch_size // n_classes
    pools = [np.flatnonzero(labels == c) for c in range(n_classes)]
    if any(len(p) == 0 for p in pools):
        raise ValueError("every class needs at least one record")
    order = [rng.permutation(p) for p in pools]
    pos = [0] * n_classes

    def take(c):
        out = []
        while len(out) < per:
            if pos[c] == len(order[c]):
                order[c] = rng.permutation(pools[c])
                pos[c] = 0
            k = min(per - len(out), len(order[c]) - pos[c])
            out.extend(order[c][pos[c] : pos[c] + k])
            pos[c] += k
        return out

    while True:
        yield rng.permutation(np.concatenate([take(c) for c in range(n_classes)]))


def _largest_remainder(n, fractions):
    raw = np.asarray(fractions) * n
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: n - counts.sum()]:
        counts[i] += 1
    return counts


def split_slides(slides, spec=None):
    """Partition slides (never patches) into train/val/testA/testB."""
    spec = spec or SplitSpec()
    if len(slides) < 4:
        raise ValueError("need at least 4 slides to split")
    counts = _largest_remainder(len(slides), spec.fractions)
    if (counts == 0).any():
        raise ValueError(f"split fractions {spec.fractions} leave an empty split for {len(slides)} slides")
    order = np.random.default_rng(spec.seed).permutation(len(slides))
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return {
        name: [slides[i] for i in order[bounds[k] : bounds[k + 1]]]
        for k, name in enumerate(SPLIT_NAMES)
    }


def build_splits(cfg, split=None, slides=None):
    """Generate (or reuse) a corpus and return one PatchSet per split."""
    slides = generate_synthetic_dataset(cfg) if slides is None else slides
    parts = split_slides(slides, split or SplitSpec(seed=derive_seed(cfg.seed, "split")))
    return {name: extract_patches(part, cfg) for name, part in parts.items()}
