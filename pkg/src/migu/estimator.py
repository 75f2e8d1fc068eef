"""scikit-learn style wrapper: a token-sequence classifier trained with MIGU.

``fit`` trains on one task from scratch. Each ``partial_fit`` call is treated
as a new task in a continual stream, so calling it once per task reproduces
the continual-learning protocol without task labels.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .exceptions import ShapeError
from .harness import ContinualLearner, Dataset, MethodConfig, PretrainSpec, pretrain_base
from .masking import MiguConfig, resolve_components
from .model import ModelConfig


def check_tokens(X, vocab_size, seq_len=None):
    """Validate an integer token matrix of shape (n_samples, seq_len)."""
    X = check_array(X, dtype=None, ensure_2d=True)
    if not np.issubdtype(X.dtype, np.integer):
        if not np.all(np.equal(np.mod(X, 1), 0)):
            raise ValueError("token ids must be integers")
        X = X.astype(np.int64)
    X = X.astype(np.int64, copy=False)
    if X.min() < 0 or X.max() >= vocab_size:
        raise ValueError(f"token ids must lie in [0, {vocab_size}), got range [{X.min()}, {X.max()}]")
    if seq_len is not None and X.shape[1] != seq_len:
        raise ShapeError(f"expected sequences of length {seq_len}, got {X.shape[1]}")
    return X


class MiguClassifier(ClassifierMixin, BaseEstimator):
    """Tiny transformer classifier trained with magnitude-based gradient masking.

    Parameters mirror the method configuration: ``method`` is one of the
    harness methods (``"FT+MIGU"``, ``"LoRA+MIGU"``, ``"FT"`` ...), ``T`` the
    masked fraction of output columns per instrumented layer.
    """

    def __init__(self, method="FT+MIGU", T=0.7, components="all", granularity="per-batch",
                 lr=3e-3, epochs=10, batch_size=32, weight_decay=0.01, lora_r=8, lora_alpha=32.0,
                 vocab_size=512, d_model=64, n_heads=4, n_blocks=2, d_ffn=128, pretrain=False,
                 random_state=0):
        self.method = method
        self.T = T
        self.components = components
        self.granularity = granularity
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.weight_decay = weight_decay
        self.lora_r = lora_r
        self.lora_alpha = lora_alpha
        self.vocab_size = vocab_size
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_blocks = n_blocks
        self.d_ffn = d_ffn
        self.pretrain = pretrain
        self.random_state = random_state

    def _method_config(self):
        migu = None
        if self.method.endswith("+MIGU"):
            migu = MiguConfig(T=self.T, granularity=self.granularity,
                              components=resolve_components(self.components))
        return MethodConfig(method=self.method, migu=migu, lr=self.lr, epochs=self.epochs,
                            batch_size=self.batch_size, weight_decay=self.weight_decay,
                            lora_r=self.lora_r, lora_alpha=self.lora_alpha, seed=self.random_state)

    def _init(self, X, classes):
        self.classes_ = np.asarray(classes)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        mcfg = ModelConfig(vocab_size=self.vocab_size, seq_len=X.shape[1], d_model=self.d_model,
                           n_heads=self.n_heads, n_blocks=self.n_blocks, d_ffn=self.d_ffn,
                           n_classes=len(self.classes_), seed=self.random_state)
        spec = PretrainSpec() if self.pretrain is True else (self.pretrain or None)
        model = pretrain_base(mcfg, spec)
        self.learner_ = ContinualLearner(model, self._method_config())
        self.model_ = model
        self.task_timings_ = []

    def _encode(self, y):
        idx = np.searchsorted(self.classes_, y)
        idx = np.clip(idx, 0, len(self.classes_) - 1)
        bad = self.classes_[idx] != y
        if np.any(bad):
            raise ValueError(f"labels {np.unique(np.asarray(y)[bad]).tolist()} not in classes_ {self.classes_.tolist()}")
        return idx.astype(np.int64)

    def fit(self, X, y):
        """Train a fresh model on a single task."""
        X, y = check_X_y(X, y, dtype=None)
        check_classification_targets(y)
        X = check_tokens(X, self.vocab_size)
        self._init(X, np.unique(y))
        return self._learn(X, y)

    def partial_fit(self, X, y, classes=None):
        """Train on the next task of a continual stream.

        ``classes`` is required on the first call when later tasks may carry
        labels absent from the first one.
        """
        X, y = check_X_y(X, y, dtype=None)
        check_classification_targets(y)
        if not hasattr(self, "learner_"):
            X = check_tokens(X, self.vocab_size)
            self._init(X, np.unique(y) if classes is None else np.unique(classes))
        else:
            X = check_tokens(X, self.vocab_size, self.n_features_in_)
        return self._learn(X, y)

    def _learn(self, X, y):
        self.task_timings_.append(self.learner_.learn_task(Dataset(X, self._encode(y))))
        self.n_tasks_seen_ = self.learner_.tasks_seen
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "learner_")
        X = check_tokens(X, self.vocab_size, self.n_features_in_)
        logits = self.model_.predict_logits(X).astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        check_is_fitted(self, "learner_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
