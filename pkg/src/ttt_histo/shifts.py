"""Label-preserving test-domain simulators: identity, additive Gaussian noise, scanner colour response."""

from dataclasses import dataclass, field

import numpy as np

from ._seeding import derive_seed, keyed_rng

KINDS = ("identity", "gaussian", "scanner")


@dataclass
class ShiftSpec:
    kind: str = "identity"
    sigma: float = 0.0
    matrix: list = field(default_factory=lambda: np.eye(3).tolist())
    offset: list = field(default_factory=lambda: [0.0, 0.0, 0.0])
    gamma: float = 1.0
    spec_id: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"shift kind must be one of {KINDS}, got {self.kind!r}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be non-negative, got {self.sigma}")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(3, 3).tolist()
        self.offset = np.asarray(self.offset, dtype=np.float64).reshape(3).tolist()
        if not self.spec_id:
            self.spec_id = {"identity": "none", "gaussian": f"gaussian{self.sigma:g}",
                            "scanner": "scanner"}[self.kind]

    @classmethod
    def identity(cls):
        return cls("identity")

    @classmethod
    def gaussian(cls, sigma):
        return cls("gaussian", sigma=sigma)

    @classmethod
    def scanner(cls, domain_seed, strength=1.0):
        """A reproducible colour-response change drawn from ``domain_seed``."""
        rng = np.random.default_rng(derive_seed(domain_seed, "scanner"))
        matrix = np.eye(3) + strength * rng.uniform(-0.06, 0.06, size=(3, 3))
        offset = strength * rng.uniform(-0.04, 0.04, size=3)
        gamma = float(np.exp(strength * rng.uniform(-0.15, 0.15)))
        return cls("scanner", matrix=matrix.tolist(), offset=offset.tolist(), gamma=gamma,
                   spec_id=f"scanner{domain_seed}")


def apply_shift(image, spec, rng=None):
    """Apply ``spec`` to an HWC (or stacked ...HWC) float image in [0, 1]."""
    if spec.kind == "identity":
        return image
    if spec.kind == "gaussian":
        if spec.sigma == 0:
            return image
        if rng is None:
            raise ValueError("gaussian shift needs an explicit rng")
        noise = rng.standard_normal(image.shape).astype(image.dtype)
        return np.clip(image + spec.sigma * noise, 0.0, 1.0)
    m = np.asarray(spec.matrix, dtype=image.dtype)
    out = np.clip(image @ m.T + np.asarray(spec.offset, dtype=image.dtype), 0.0, 1.0)
    if spec.gamma != 1.0:
        out = out ** image.dtype.type(spec.gamma)
    return np.clip(out, 0.0, 1.0)


def shift_dataset(patches, spec, seed=0):
    """Shift every pyramid level of every record; labels are untouched.

    Noise for each record comes from a stream keyed by ``(seed, record_id)``,
    so the result for a record does not depend on its position in the set.
    """
    if spec.kind == "identity" or (spec.kind == "gaussian" and spec.sigma == 0):
        return patches.replace_pyramids(patches.pyramids.copy())
    out = np.empty_like(patches.pyramids)
    for i, rid in enumerate(patches.record_ids):
        rng = keyed_rng(seed, spec.spec_id, rid) if spec.kind == "gaussian" else None
        out[i] = apply_shift(patches.pyramids[i], spec, rng)
    return patches.replace_pyramids(out)
