"""scikit-learn style wrapper around the adversarial CNN."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import train_test_split
from sklearn.utils.validation import check_is_fitted

from .dataio import Dataset
from .model import EncoderConfig, Network, load_checkpoint, save_checkpoint
from .trainer import TrainConfig, evaluate, predict_logits, train


def _check_epochs(X):
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 3:
        raise ValueError(f"expected epochs of shape (n, channels, samples), got {X.shape}")
    return X


class AdversarialCNNClassifier(BaseEstimator, ClassifierMixin):
    """Subject classifier whose features are trained to hide the session.

    Parameters
    ----------
    lam : float
        Weight of the adversary's loss in the encoder objective. ``0``
        trains an ordinary CNN while still fitting a probe adversary.
    batch_size, max_passes, patience, lr : see :class:`TrainConfig`.
    validation_fraction : float
        Share of the training epochs held out for early stopping when
        ``eval_set`` is not given to :meth:`fit`.
    widths : tuple of int or None
        ``(n_temporal, depth_multiplier, n_block3, n_block4)``; ``None``
        keeps the full architecture.
    random_state : int
        Seeds initialization, shuffling and the validation hold-out.
    """

    def __init__(self, lam=0.0, batch_size=100, max_passes=500, patience=20, lr=1e-4,
                 validation_fraction=0.1, widths=None, random_state=0):
        self.lam = lam
        self.batch_size = batch_size
        self.max_passes = max_passes
        self.patience = patience
        self.lr = lr
        self.validation_fraction = validation_fraction
        self.widths = widths
        self.random_state = random_state

    def _dataset(self, X, y, sessions):
        X = _check_epochs(X)
        y = np.asarray(y)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        unknown = np.setdiff1d(y, self.classes_)
        if unknown.size:
            raise ValueError(f"labels {unknown.tolist()} were not seen during fit")
        s = np.searchsorted(self.classes_, y)
        r = np.zeros(len(X), np.int64) if sessions is None else np.asarray(sessions, np.int64)
        n_sessions = int(r.max()) + 1 if r.size else 1
        return Dataset(X, s, r, len(self.classes_), n_sessions)

    def fit(self, X, y, sessions=None, eval_set=None):
        """Train on epochs ``X`` with subject labels ``y``.

        ``sessions`` are non-negative integer recording IDs; with two or more
        distinct values an adversary is trained against the encoder.
        ``eval_set`` is ``(X_val, y_val)`` or ``(X_val, y_val, sessions_val)``.
        """
        X = _check_epochs(X)
        self.classes_ = np.unique(y)
        if self.classes_.size < 2:
            raise ValueError("need at least two subjects")
        data = self._dataset(X, y, sessions)
        if eval_set is not None:
            if sessions is not None and len(eval_set) != 3:
                raise ValueError("eval_set needs sessions when fit is given sessions")
            val, tr = self._dataset(*eval_set, *([None] * (3 - len(eval_set)))), data
        else:
            idx_tr, idx_va = train_test_split(
                np.arange(len(data)), test_size=self.validation_fraction,
                random_state=self.random_state, stratify=data.subjects)
            tr, val = data.subset(np.sort(idx_tr)), data.subset(np.sort(idx_va))
        C, T = X.shape[1:]
        config = EncoderConfig(C, T, *(self.widths or ()))
        session_map = tuple(int(v) for v in np.unique(tr.sessions))
        if len(session_map) < 2:
            session_map = ()
        net = Network.build(config, len(self.classes_), session_map, seed=self.random_state)
        cfg = TrainConfig(lam=self.lam, batch_size=min(self.batch_size, len(tr)),
                          max_passes=self.max_passes, patience=self.patience, lr=self.lr,
                          seed=self.random_state)
        self.network_, self.history_ = train(net, tr, val, cfg)
        self.n_features_out_ = config.feature_dim
        return self

    def decision_function(self, X):
        check_is_fitted(self, "network_")
        return predict_logits(self.network_, _check_epochs(X), "identifier")

    def predict_proba(self, X):
        z = self.decision_function(X).astype(np.float64)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]

    def transform(self, X):
        """Encoder features with batch normalization in inference mode."""
        check_is_fitted(self, "network_")
        X = _check_epochs(X)
        out = [self.network_.encoder.forward(X[i:i + 250], "eval", keep_cache=False)[0]
               for i in range(0, len(X), 250)]
        return np.concatenate(out)

    def session_score(self, X, sessions):
        """Adversary accuracy; every session must be one seen during fit."""
        check_is_fitted(self, "network_")
        X = _check_epochs(X)
        r = np.asarray(sessions, np.int64)
        ds = Dataset(X, np.zeros(len(X), np.int64), r, len(self.classes_), int(r.max()) + 1)
        return evaluate(self.network_, ds, "adversary")[0]

    def save(self, path):
        check_is_fitted(self, "network_")
        save_checkpoint(path, self.network_)

    @classmethod
    def load(cls, path, classes=None):
        """Rebuild a fitted classifier from a checkpoint.

        Class labels are not stored; they default to ``0..n_subjects-1``.
        """
        net = load_checkpoint(path)
        cfg = net.config
        est = cls(widths=(cfg.n_temporal, cfg.depth_multiplier, cfg.n_block3, cfg.n_block4))
        est.network_ = net
        est.classes_ = np.arange(net.identifier.n_classes) if classes is None \
            else np.asarray(classes)
        est.n_features_out_ = cfg.feature_dim
        return est
