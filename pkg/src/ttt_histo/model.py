"""Shared-encoder network with a primary head and a self-supervised head.

The network is partitioned into three role groups (``encoder``, ``primary``,
``secondary``).  Batch-norm affine parameters inside the encoder additionally
carry the ``affine`` tag and batch-norm running statistics carry
``bn_stats``.  Test-time methods select what they may modify through
:func:`partition_params`.
"""

import contextlib
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

TASKS = ("rsp", "simclr")
ROLES = frozenset({"encoder", "primary", "secondary", "affine", "bn_stats"})
N_CLASSES = 3
N_PERMUTATIONS = 6
DOWNSAMPLE_FACTOR = 2

WEIGHTS_FILE = "weights.bin"
INDEX_FILE = "weights.json"
MANIFEST_FILE = "manifest.json"


@dataclass
class ModelConfig:
    image_size: int = 64
    latent_dim: int = 512
    task: str = "simclr"
    widths: tuple = (16, 32, 64, 128)
    rsp_hidden: int = 256
    proj_hidden: int = 256
    proj_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.latent_dim <= 0:
            raise ValueError(f"latent_dim must be positive, got {self.latent_dim}")
        if self.image_size <= 0 or self.image_size % DOWNSAMPLE_FACTOR:
            raise ValueError(
                f"image_size must be a positive multiple of {DOWNSAMPLE_FACTOR}, "
                f"got {self.image_size}"
            )
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if len(self.widths) < 2 or min(self.widths) <= 0:
            raise ValueError("encoder needs at least two conv blocks of positive width")
        if min(self.rsp_hidden, self.proj_hidden, self.proj_dim) <= 0:
            raise ValueError("head widths must be positive")

    def to_dict(self):
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class Encoder(nn.Module):
    """Conv blocks (stride-2 conv, BN, ReLU), global average pool, linear."""

    def __init__(self, widths, latent_dim):
        super().__init__()
        blocks = []
        c_in = 3
        for w in widths:
            blocks.append(
                nn.Sequential(
                    nn.Conv2d(c_in, w, 3, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(w),
                    nn.ReLU(inplace=True),
                )
            )
            c_in = w
        self.blocks = nn.Sequential(*blocks)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(c_in, latent_dim)

    def forward(self, x):
        return self.fc(self.pool(self.blocks(x)).flatten(1))


def _mlp(d_in, d_hidden, d_out):
    return nn.Sequential(nn.Linear(d_in, d_hidden), nn.ReLU(inplace=True), nn.Linear(d_hidden, d_out))


class RSPHead(nn.Module):
    """Pairwise head for resolution-sequence prediction.

    Each of the pairs (1,2), (1,3), (2,3) of displayed positions is
    concatenated and sent through one shared two-layer MLP; the three pair
    outputs are concatenated and classified into the six orderings.
    """

    PAIRS = ((0, 1), (0, 2), (1, 2))

    def __init__(self, latent_dim, hidden):
        super().__init__()
        self.pair_mlp = _mlp(2 * latent_dim, hidden, hidden)
        self.classifier = nn.Sequential(
            nn.ReLU(inplace=False), _mlp(3 * hidden, hidden, N_PERMUTATIONS)
        )

    @property
    def pair_input_dim(self):
        return self.pair_mlp[0].in_features

    def forward(self, latents):
        # latents: (batch, 3, latent_dim) in display order
        pairs = [torch.cat([latents[:, i], latents[:, j]], dim=1) for i, j in self.PAIRS]
        out = torch.cat([self.pair_mlp(p) for p in pairs], dim=1)
        return self.classifier(out)


class TTTNet(nn.Module):
    """Encoder + primary classifier + one secondary head (RSP or projection)."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config.widths, config.latent_dim)
        self.primary_head = nn.Linear(config.latent_dim, N_CLASSES)
        if config.task == "rsp":
            self.secondary_head = RSPHead(config.latent_dim, config.rsp_hidden)
        else:
            self.secondary_head = _mlp(config.latent_dim, config.proj_hidden, config.proj_dim)
        self.param_roles = _tag_roles(self)

    @property
    def task(self):
        return self.config.task

    @property
    def latent_dim(self):
        return self.config.latent_dim

    def encode(self, images):
        """Map an NCHW float batch in [0, 1] to ``(batch, latent_dim)``."""
        s = self.config.image_size
        if images.ndim != 4 or tuple(images.shape[1:]) != (3, s, s):
            raise ValueError(
                f"expected images of shape (batch, 3, {s}, {s}), got {tuple(images.shape)}"
            )
        if images.shape[0] < 1:
            raise ValueError("empty batch")
        return self.encoder(images)

    def predict_primary(self, latents):
        self._check_latents(latents)
        return self.primary_head(latents)

    def forward_rsp(self, pyramid_latents):
        if self.task != "rsp":
            raise ValueError("model was built for the simclr task, not rsp")
        if pyramid_latents.ndim != 3 or pyramid_latents.shape[1] != 3:
            raise ValueError(
                f"expected (batch, 3, latent_dim) pyramid latents, got {tuple(pyramid_latents.shape)}"
            )
        if pyramid_latents.shape[2] != self.latent_dim:
            raise ValueError("latent width does not match the model")
        return self.secondary_head(pyramid_latents)

    def forward_projection(self, latents):
        if self.task != "simclr":
            raise ValueError("model was built for the rsp task, not simclr")
        self._check_latents(latents)
        return self.secondary_head(latents)

    def forward(self, images):
        return self.predict_primary(self.encode(images))

    def secondary_forward(self, inputs):
        """Secondary-task output for a task input batch.

        ``inputs`` is ``(batch, 3, 3, S, S)`` (pyramids in display order) for
        RSP and ``(2N, 3, S, S)`` (views ``a`` then ``b``) for SimCLR.
        """
        if self.task == "rsp":
            b = inputs.shape[0]
            z = self.encode(inputs.reshape(b * 3, *inputs.shape[2:]))
            return self.forward_rsp(z.reshape(b, 3, -1))
        return self.forward_projection(self.encode(inputs))

    def _check_latents(self, latents):
        if latents.ndim != 2 or latents.shape[1] != self.latent_dim:
            raise ValueError(
                f"expected latents of shape (batch, {self.latent_dim}), got {tuple(latents.shape)}"
            )


def _tag_roles(model):
    roles = {}
    bn_prefixes = [
        name + "." for name, m in model.named_modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)
    ]
    for name, _ in model.named_parameters():
        group = name.split(".", 1)[0]
        tags = {"encoder": {"encoder"}, "primary_head": {"primary"}, "secondary_head": {"secondary"}}[group]
        if group == "encoder" and any(name.startswith(p) for p in bn_prefixes):
            tags = tags | {"affine"}
        roles[name] = frozenset(tags)
    for name, _ in model.named_buffers():
        if name.endswith("running_mean") or name.endswith("running_var"):
            roles[name] = frozenset({"bn_stats"})
    return roles


def build_model(config=None, **overrides):
    """Build a :class:`TTTNet` with parameters drawn deterministically from ``config.seed``."""
    if config is None:
        config = ModelConfig(**overrides)
    elif overrides:
        config = ModelConfig(**{**config.to_dict(), **overrides})
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.seed)
        model = TTTNet(config)
    return model


def partition_params(model, roles):
    """Tensors carrying any of the requested role tags, in registration order."""
    roles = set(roles)
    unknown = roles - ROLES
    if unknown:
        raise ValueError(f"unknown role tags: {sorted(unknown)}")
    state = dict(model.named_parameters())
    state.update(model.named_buffers())
    return [state[name] for name, tags in model.param_roles.items() if tags & roles]


def param_names(model, roles):
    roles = set(roles)
    if roles - ROLES:
        raise ValueError(f"unknown role tags: {sorted(roles - ROLES)}")
    return [name for name, tags in model.param_roles.items() if tags & roles]


@dataclass
class ParamSnapshot:
    """Ordered copy of every parameter and buffer plus a content digest."""

    names: list
    tensors: list = field(repr=False)
    digest: str = ""


def _digest(names, tensors):
    h = hashlib.sha256()
    for name, t in zip(names, tensors):
        a = t.detach().cpu().contiguous().numpy()
        h.update(name.encode())
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def snapshot(model):
    names, tensors = zip(*model.state_dict(keep_vars=False).items())
    tensors = [t.detach().clone() for t in tensors]
    return ParamSnapshot(list(names), tensors, _digest(names, tensors))


def restore(model, snap):
    state = model.state_dict(keep_vars=True)
    if list(state) != snap.names:
        raise ValueError("snapshot was taken from a different architecture")
    for name, saved in zip(snap.names, snap.tensors):
        if state[name].shape != saved.shape or state[name].dtype != saved.dtype:
            raise ValueError(f"shape/dtype mismatch restoring {name}")
    with torch.no_grad():
        for name, saved in zip(snap.names, snap.tensors):
            state[name].copy_(saved)


def state_digest(model, roles=None):
    """Digest of the full state, or of only the tensors carrying ``roles``."""
    state = model.state_dict()
    if roles is None:
        names = list(state)
    else:
        names = param_names(model, roles)
    return _digest(names, [state[n] for n in names])


def bn_layers(model):
    return [m for m in model.modules() if isinstance(m, nn.modules.batchnorm._BatchNorm)]


@contextlib.contextmanager
def frozen_bn_stats(model, enabled=True):
    """Train-mode forwards inside the block use batch statistics but leave
    the BN running statistics untouched."""
    if not enabled:
        yield
        return
    layers = bn_layers(model)
    flags = [m.track_running_stats for m in layers]
    for m in layers:
        m.track_running_stats = False
    try:
        yield
    finally:
        for m, f in zip(layers, flags):
            m.track_running_stats = f


# -- checkpoint / weight export ------------------------------------------------


def export_weights(model, out_dir):
    """Write every state tensor as little-endian float32 plus a name index.

    ``weights.json`` maps name -> {"shape", "offset" (bytes), "dtype"} where
    ``dtype`` is the in-memory dtype the tensor is restored to.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    offset = 0
    with open(out_dir / WEIGHTS_FILE, "wb") as f:
        for name, t in model.state_dict().items():
            a = t.detach().cpu().numpy().astype("<f4")
            f.write(a.tobytes())
            index[name] = {"shape": list(a.shape), "offset": offset, "dtype": str(t.dtype).replace("torch.", "")}
            offset += a.nbytes
    (out_dir / INDEX_FILE).write_text(json.dumps(index, indent=1, sort_keys=True) + "\n")
    return out_dir


def import_weights(model, weights_dir):
    weights_dir = Path(weights_dir)
    index = json.loads((weights_dir / INDEX_FILE).read_text())
    raw = (weights_dir / WEIGHTS_FILE).read_bytes()
    state = model.state_dict()
    if set(index) != set(state):
        raise ValueError("weight index does not match the model architecture")
    with torch.no_grad():
        for name, t in state.items():
            entry = index[name]
            if list(t.shape) != entry["shape"]:
                raise ValueError(f"shape mismatch for {name}: {entry['shape']} vs {list(t.shape)}")
            n = int(np.prod(entry["shape"], dtype=np.int64))
            a = np.frombuffer(raw, dtype="<f4", count=n, offset=entry["offset"]).reshape(entry["shape"])
            t.copy_(torch.from_numpy(a.copy()).to(t.dtype))
    return model


def save_checkpoint(model, path, step=0, seeds=None, extra=None):
    path = Path(path)
    export_weights(model, path)
    manifest = {
        "architecture": model.config.to_dict(),
        "step": int(step),
        "seeds": seeds or {"model": model.config.seed},
        "roles": {k: sorted(v) for k, v in model.param_roles.items()},
        "digest": state_digest(model),
    }
    if extra:
        manifest.update(extra)
    (path / MANIFEST_FILE).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def load_checkpoint(path):
    path = Path(path)
    manifest = json.loads((path / MANIFEST_FILE).read_text())
    model = build_model(ModelConfig(**manifest["architecture"]))
    import_weights(model, path)
    return model, manifest
