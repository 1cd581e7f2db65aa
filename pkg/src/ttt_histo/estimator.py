"""scikit-learn style wrapper around joint training and test-time adaptation."""

import hashlib

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from .adapt import AdaptConfig, adaptive_logits
from .data import PatchSet
from .model import build_model
from .training import TrainingConfig, train_joint

N_CLASSES = 3


def check_images(X, task=None, image_size=None):
    """Validate and convert ``X`` to a float32 pyramid array (n, 3, S, S, 3) in [0, 1].

    Accepts single-level images (n, S, S, 3), which are repeated across the
    three levels, or full pyramids (n, 3, S, S, 3).  uint8 input is scaled
    by 1/255.  RSP needs real pyramids.
    """
    X = np.asarray(X)
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / 255.0
    elif not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"X must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if X.ndim == 4:
        if task == "rsp":
            raise ValueError("the rsp task needs (n, 3, S, S, 3) pyramids, got single-level images")
        X = np.repeat(X[:, None], 3, axis=1)
    if X.ndim != 5 or X.shape[1] != 3 or X.shape[-1] != 3 or X.shape[2] != X.shape[3]:
        raise ValueError(f"X must have shape (n, S, S, 3) or (n, 3, S, S, 3), got {X.shape}")
    if len(X) == 0:
        raise ValueError("X is empty")
    if image_size is not None and X.shape[2] != image_size:
        raise ValueError(f"expected {image_size}x{image_size} images, got {X.shape[2]}x{X.shape[3]}")
    if not np.isfinite(X).all():
        raise ValueError("X contains NaN or infinity")
    if X.min() < 0.0 or X.max() > 1.0:
        raise ValueError("pixel values must lie in [0, 1]")
    return X


def content_ids(X):
    """Record ids derived from pixel content, so episodes do not depend on row order."""
    return [hashlib.sha256(x.tobytes()).hexdigest()[:20] for x in X]


class TTTClassifier(ClassifierMixin, BaseEstimator):
    """Three-class patch classifier trained jointly with a self-supervised task.

    ``predict`` and ``predict_proba`` run episodic test-time adaptation
    (``adapt_method``) on the inputs; the fitted weights are never changed by
    prediction.
    """

    def __init__(self, task="simclr", lambda_s=0.01, steps=2000, batch_size=24, lr=1e-3,
                 latent_dim=512, adapt_method="none", step_size=0.0, n_steps=1,
                 granularity="batch", episode_size=32, random_state=0):
        self.task = task
        self.lambda_s = lambda_s
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.latent_dim = latent_dim
        self.adapt_method = adapt_method
        self.step_size = step_size
        self.n_steps = n_steps
        self.granularity = granularity
        self.episode_size = episode_size
        self.random_state = random_state

    def fit(self, X, y):
        X = check_images(X, self.task)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} samples but y has {len(y)}")
        check_classification_targets(y)
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) != N_CLASSES:
            raise ValueError(f"expected exactly {N_CLASSES} classes, got {len(self.classes_)}")
        seed = int(self.random_state or 0)
        self.model_ = build_model(image_size=X.shape[2], latent_dim=self.latent_dim, task=self.task, seed=seed)
        cfg = TrainingConfig(lambda_s=self.lambda_s, steps=self.steps, batch_size=self.batch_size,
                             lr=self.lr, task=self.task, val_steps=0, seed=seed)
        self.train_result_ = train_joint(self.model_, {"train": self._patchset(X, codes)}, cfg)
        self.n_features_in_ = int(np.prod(X.shape[2:]))
        self.image_size_ = X.shape[2]
        return self

    def _patchset(self, X, codes=None):
        n = len(X)
        codes = np.zeros(n, dtype=np.int64) if codes is None else codes
        return PatchSet(X, codes, ["input"] * n, np.zeros((n, 2)), content_ids(X))

    def adapt_config(self):
        return AdaptConfig(method=self.adapt_method, step_size=self.step_size, n_steps=self.n_steps,
                           granularity=self.granularity, episode_size=self.episode_size,
                           seed=int(self.random_state or 0))

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        X = check_images(X, image_size=self.image_size_)
        logits, _ = adaptive_logits(self.model_, self._patchset(X), self.adapt_config())
        return logits.numpy()

    def predict_proba(self, X):
        return torch.softmax(torch.from_numpy(self.decision_function(X)), 1).numpy()

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(1)]
