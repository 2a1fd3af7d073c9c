"""Classical baselines: channel log-bandpower features, PCA projection and a
shrinkage-regularized QDA classifier, each also exposed as a scikit-learn
estimator so they chain with ``sklearn.pipeline``."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular
from scipy.signal import welch
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


class BandDef(NamedTuple):
    name: str
    low_hz: float
    high_hz: float


BANDS = (
    BandDef("theta", 4, 8),
    BandDef("alpha", 8, 15),
    BandDef("beta1", 15, 20),
    BandDef("beta2", 20, 25),
    BandDef("beta3", 25, 30),
    BandDef("gamma1", 30, 45),
    BandDef("gamma2", 45, 60),
    BandDef("gamma3", 60, 75),
)

LOG_FLOOR = 1e-12


class QDAFitError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spectral features

def welch_psd(x, sample_rate=256.0, seg_len=64, overlap=32):
    """One-sided Welch PSD with a Hann window along the last axis.

    Returns ``(freqs, psd)``; bin ``k`` sits at ``k * sample_rate / seg_len``.
    """
    x = np.asarray(x, dtype=np.float64)
    if seg_len < 2 or seg_len & (seg_len - 1):
        raise ValueError(f"seg_len must be a power of two, got {seg_len}")
    if not 0 <= overlap < seg_len:
        raise ValueError(f"overlap must lie in [0, {seg_len}), got {overlap}")
    if x.shape[-1] < seg_len:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one "
                         f"{seg_len}-sample segment")
    return welch(x, fs=sample_rate, window="hann", nperseg=seg_len, noverlap=overlap,
                 detrend=False, return_onesided=True, scaling="density", axis=-1)


def log_bandpowers(X, sample_rate=256.0, bands=BANDS, seg_len=64, overlap=32):
    """Natural-log band powers, channel-major: ``(..., C, T) -> (..., C * n_bands)``.

    A band sums the PSD bins whose centre frequency ``f`` satisfies
    ``low <= f < high``.  Channels are mean-centred first; otherwise the Hann
    window smears a DC offset into the 4 Hz bin.
    """
    nyquist = sample_rate / 2
    for b in bands:
        if not 0 <= b.low_hz < b.high_hz <= nyquist:
            raise ValueError(f"band {b.name} [{b.low_hz}, {b.high_hz}) is invalid for "
                             f"Nyquist {nyquist} Hz")
    X = np.asarray(X, dtype=np.float64)
    X = X - X.mean(axis=-1, keepdims=True)
    freqs, psd = welch_psd(X, sample_rate, seg_len, overlap)
    powers = np.stack([psd[..., (freqs >= b.low_hz) & (freqs < b.high_hz)].sum(axis=-1)
                       for b in bands], axis=-1)
    out = np.log(powers + LOG_FLOOR)
    return out.reshape(out.shape[:-2] + (-1,))


# ---------------------------------------------------------------------------
# PCA

@dataclass
class PcaModel:
    mean: np.ndarray             # (D,)
    components: np.ndarray       # (d, D), orthonormal rows
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit(X, var_threshold=0.9) -> PcaModel:
    """Keep the fewest leading components whose variance share reaches ``var_threshold``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise ValueError("pca_fit needs a 2-d array with at least two rows")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    evals, evecs = np.clip(evals[::-1], 0, None), evecs[:, ::-1]
    total = evals.sum()
    if total <= 0:
        raise ValueError("data has zero total variance")
    ratio = evals / total
    d = int(np.argmax(np.cumsum(ratio) >= var_threshold - 1e-12)) + 1
    comps = evecs[:, :d].T
    # deterministic sign: largest-magnitude loading positive
    flip = np.sign(comps[np.arange(d), np.abs(comps).argmax(axis=1)])
    comps = comps * flip[:, None]
    return PcaModel(mean, comps, evals[:d], ratio[:d])


def pca_transform(model: PcaModel, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.mean.shape[0]:
        raise ValueError(f"expected (N, {model.mean.shape[0]}) input, got {X.shape}")
    return (X - model.mean) @ model.components.T


# ---------------------------------------------------------------------------
# QDA

@dataclass
class QdaModel:
    classes: np.ndarray
    priors: np.ndarray
    means: np.ndarray        # (K, d)
    covariances: np.ndarray  # (K, d, d), regularized
    cholesky: np.ndarray     # (K, d, d), lower factors
    log_dets: np.ndarray     # (K,)


def qda_fit(X, y, shrinkage=1e-3, classes=None) -> QdaModel:
    """Per-class Gaussian fit with covariance ``(1-a) S + a (tr S / d) I``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    present = np.unique(y)
    classes = present if classes is None else np.asarray(classes)
    missing = np.setdiff1d(classes, present)
    if missing.size:
        raise QDAFitError(f"classes {missing.tolist()} have no training samples")
    if classes.size < 2:
        raise QDAFitError("QDA needs at least two classes")
    if not 0 <= shrinkage <= 1:
        raise ValueError("shrinkage must lie in [0, 1]")
    n, d = X.shape
    K = classes.size
    means = np.empty((K, d))
    covs = np.empty((K, d, d))
    chol = np.empty((K, d, d))
    logdet = np.empty(K)
    priors = np.empty(K)
    for k, c in enumerate(classes):
        Xk = X[y == c]
        if len(Xk) < max(2, d / 2):
            raise QDAFitError(f"class {c} has {len(Xk)} samples for {d} dimensions; "
                              "add data or increase shrinkage")
        means[k] = Xk.mean(axis=0)
        S = np.atleast_2d(np.cov(Xk, rowvar=False))
        covs[k] = (1 - shrinkage) * S + shrinkage * (np.trace(S) / d) * np.eye(d)
        try:
            chol[k] = np.linalg.cholesky(covs[k])
        except np.linalg.LinAlgError:
            raise QDAFitError(f"regularized covariance of class {c} is not positive "
                              "definite; increase shrinkage") from None
        logdet[k] = 2 * np.log(np.diag(chol[k])).sum()
        priors[k] = len(Xk) / n
    return QdaModel(classes, priors, means, covs, chol, logdet)


def qda_decision(model: QdaModel, X):
    """Unnormalized log-posteriors ``log p_k - logdet_k / 2 - maha_k / 2``, shape (N, K)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.means.shape[1]:
        raise ValueError(f"expected (N, {model.means.shape[1]}) input, got {X.shape}")
    out = np.empty((X.shape[0], model.classes.size))
    for k in range(model.classes.size):
        diff = (X - model.means[k]).T
        z = solve_triangular(model.cholesky[k], diff, lower=True) if diff.size else diff
        out[:, k] = np.log(model.priors[k]) - 0.5 * model.log_dets[k] \
            - 0.5 * (z * z).sum(axis=0)
    return out


def qda_predict(model: QdaModel, X):
    """Return ``(labels, log_posteriors)``; ties go to the lowest class index."""
    scores = qda_decision(model, X)
    log_post = scores - logsumexp(scores, axis=1, keepdims=True)
    return model.classes[np.argmax(scores, axis=1)], log_post


# ---------------------------------------------------------------------------
# scikit-learn wrappers

def _epochs(X):
    X = np.asarray(X)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected epochs (n, C, T), got shape {X.shape}")
    return X


class LogBandpower(TransformerMixin, BaseEstimator):
    """Epochs ``(n, C, T)`` to concatenated channel log-bandpowers ``(n, C * 8)``."""

    def __init__(self, sample_rate=256.0, seg_len=64, overlap=32, bands=BANDS):
        self.sample_rate = sample_rate
        self.seg_len = seg_len
        self.overlap = overlap
        self.bands = bands

    def fit(self, X, y=None):
        X = _epochs(X)
        self.n_channels_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_channels_")
        X = _epochs(X)
        if X.shape[1] != self.n_channels_:
            raise ValueError(f"fitted on {self.n_channels_} channels, got {X.shape[1]}")
        return log_bandpowers(X, self.sample_rate, self.bands, self.seg_len, self.overlap)


class Vectorizer(TransformerMixin, BaseEstimator):
    """Flatten epochs ``(n, C, T)`` to ``(n, C * T)``."""

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = np.asarray(X)
        return X.reshape(len(X), -1)


class PCAProjection(TransformerMixin, BaseEstimator):
    def __init__(self, var_threshold=0.9):
        self.var_threshold = var_threshold

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.model_ = pca_fit(X, self.var_threshold)
        self.n_components_ = self.model_.n_components
        self.explained_variance_ratio_ = self.model_.explained_variance_ratio
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        return pca_transform(self.model_, check_array(X, dtype=np.float64))


class ShrinkageQDA(ClassifierMixin, BaseEstimator):
    def __init__(self, shrinkage=1e-3):
        self.shrinkage = shrinkage

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.model_ = qda_fit(X, y, self.shrinkage)
        self.classes_ = self.model_.classes
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return qda_decision(self.model_, check_array(X, dtype=np.float64))

    def predict_log_proba(self, X):
        check_is_fitted(self, "model_")
        return qda_predict(self.model_, check_array(X, dtype=np.float64))[1]

    def predict_proba(self, X):
        return np.exp(self.predict_log_proba(X))

    def predict(self, X):
        check_is_fitted(self, "model_")
        return qda_predict(self.model_, check_array(X, dtype=np.float64))[0]


def spectral_qda(sample_rate=256.0, shrinkage=1e-3, **welch_kw):
    from sklearn.pipeline import make_pipeline
    return make_pipeline(LogBandpower(sample_rate, **welch_kw), ShrinkageQDA(shrinkage))


def pca_qda(var_threshold=0.9, shrinkage=1e-3):
    from sklearn.pipeline import make_pipeline
    return make_pipeline(Vectorizer(), PCAProjection(var_threshold), ShrinkageQDA(shrinkage))


# ---------------------------------------------------------------------------
# CSV export

def write_features_csv(path, features, labels=None):
    features = np.asarray(features)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = [f"f{i}" for i in range(features.shape[1])]
        w.writerow((["label"] if labels is not None else []) + head)
        for i, row in enumerate(features):
            prefix = [int(labels[i])] if labels is not None else []
            w.writerow(prefix + [repr(float(v)) for v in row])


def write_qda_summary_csv(path, model: QdaModel):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "prior", "log_det", "trace_cov"])
        for k, c in enumerate(model.classes):
            w.writerow([int(c), repr(float(model.priors[k])), repr(float(model.log_dets[k])),
                        repr(float(np.trace(model.covariances[k])))])
