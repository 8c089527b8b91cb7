"""Scikit-learn style estimator wrapping the training loop.

``X`` is a list (or object array) of images; images may differ in size but
must share a channel count. ``y`` is the matching list of integer masks.
The estimator composes with sklearn tooling: ``get_params``/``set_params``
and ``clone`` work, and ``score`` returns mean Dice in [0, 1].
"""

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .metrics import dsc
from .segmenter import load_checkpoint, save_checkpoint
from .outliers import queues_to_arrays
from .trainer import infer, run_training, TrainConfig


class OutlierAwareSegmenter(BaseEstimator):
    """Binary segmenter trained with virtual-outlier regularization.

    Parameters mirror :class:`cellseg.trainer.TrainConfig`; defaults follow
    the reference recipe, so desk-scale experiments usually lower
    ``epochs``, ``sample_size``, and ``selection_count``.
    """

    def __init__(
        self,
        epochs=200,
        sampling_start_epoch=None,
        batch_size=8,
        pixels_per_image=1000,
        sample_size=100_000,
        selection_count=10_000,
        substitution_fraction=0.05,
        queue_capacity=5000,
        strategy="balance",
        lam=1.0,
        beta=1.0,
        lam1=0.5,
        lam2=0.5,
        beta1=0.5,
        beta2=0.5,
        lr0=0.01,
        momentum=0.9,
        weight_decay=1e-4,
        gamma=0.98,
        seed=0,
        outlier_classes="both",
        n_classes=2,
        hidden1=8,
        hidden2=16,
        patch=224,
        margin=56,
    ):
        self.epochs = epochs
        self.sampling_start_epoch = sampling_start_epoch
        self.batch_size = batch_size
        self.pixels_per_image = pixels_per_image
        self.sample_size = sample_size
        self.selection_count = selection_count
        self.substitution_fraction = substitution_fraction
        self.queue_capacity = queue_capacity
        self.strategy = strategy
        self.lam = lam
        self.beta = beta
        self.lam1 = lam1
        self.lam2 = lam2
        self.beta1 = beta1
        self.beta2 = beta2
        self.lr0 = lr0
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.gamma = gamma
        self.seed = seed
        self.outlier_classes = outlier_classes
        self.n_classes = n_classes
        self.hidden1 = hidden1
        self.hidden2 = hidden2
        self.patch = patch
        self.margin = margin

    def _config(self):
        values = {}
        for f in fields(TrainConfig):
            if hasattr(self, f.name):
                values[f.name] = getattr(self, f.name)
        return TrainConfig(**values)

    def fit(self, X, y):
        cfg = self._config()
        params, optim, queues, run_log = run_training(list(X), list(y), cfg)
        self.params_ = params
        self.optim_ = optim
        self.queues_ = queues
        self.run_log_ = run_log
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("call fit() or load() before predicting")

    def predict(self, X):
        """Predicted label masks, one per input image."""
        self._check_fitted()
        return [
            infer(self.params_, img, patch=self.patch, margin=self.margin)[0] for img in X
        ]

    def predict_proba(self, X):
        """Per-pixel class probability maps, one per input image."""
        self._check_fitted()
        return [
            infer(self.params_, img, patch=self.patch, margin=self.margin)[1] for img in X
        ]

    def score(self, X, y):
        """Mean Dice similarity against the given masks, scaled to [0, 1]."""
        preds = self.predict(X)
        return float(np.mean([dsc(p, m) for p, m in zip(preds, y)])) / 100.0

    def save(self, path):
        """Persist the fitted model as a standard checkpoint file."""
        self._check_fitted()
        queues = None
        if self.queues_ is not None:
            queues = queues_to_arrays(self.queues_, self.n_classes)
        save_checkpoint(self.params_, self.optim_, path, queues=queues)

    def load(self, path):
        """Load a checkpoint into this estimator (marks it as fitted)."""
        params, optim, _ = load_checkpoint(path)
        self.params_ = params
        self.optim_ = optim
        self.queues_ = None
        return self
