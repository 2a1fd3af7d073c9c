"""Alternating adversarial training of encoder, identifier and adversary.

Per mini-batch the adversary takes one Adam step on its session
cross-entropy with the encoder output treated as a constant; then encoder
and identifier take one Adam step on

    L = CE_id - lam * CE_adv

with the adversary frozen.  ``lam = 0`` reduces to an ordinary CNN.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tc
from ._rng import substream
from .dataio import Dataset
from .model import Network

log = logging.getLogger(__name__)

EVAL_BATCH = 250


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.0
    batch_size: int = 100
    max_passes: int = 500
    patience: int = 20
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.batch_size < 1 or self.max_passes < 1 or self.patience < 1:
            raise ValueError("batch_size, max_passes and patience must be positive")

    def adam(self) -> dict:
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


@dataclass
class PassRecord:
    pass_index: int
    id_train_loss: float
    id_val_loss: float
    id_val_acc: float
    adv_val_acc: float
    enc_loss: float


HISTORY_COLUMNS = ("pass", "id_train_loss", "id_val_loss", "id_val_acc", "adv_val_acc",
                   "enc_loss")


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_pass: int = -1

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(HISTORY_COLUMNS)
            for rec in self.records:
                w.writerow([rec.pass_index] + [repr(float(v)) for v in
                                               list(asdict(rec).values())[1:]])

    @property
    def best(self) -> PassRecord:
        return self.records[self.best_pass]


@dataclass
class Optimizers:
    theta_gamma: tc.AdamState = field(default_factory=tc.AdamState)
    phi: tc.AdamState = field(default_factory=tc.AdamState)


def _check(value, what):
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite ({value}); "
                               "lower the learning rate or the adversarial weight")
    return value


def adversary_step(net: Network, X, r, opt: tc.AdamState, cfg: TrainConfig, feats=None):
    """One Adam step on the adversary only; ``r`` are adversary labels.

    The encoder runs in train mode without touching its running statistics,
    and no gradient reaches it.
    """
    if net.adversary is None:
        raise ValueError("network has no adversary head")
    if feats is None:
        feats, _ = net.encoder.forward(X, "train", update_stats=False, keep_cache=False)
    logits, cache = net.adversary.forward(feats)
    loss, probs = tc.softmax_cross_entropy(logits, r)
    _check(loss, "adversary loss")
    _, grads = net.adversary.backward(tc.softmax_cross_entropy_backward(probs, r), cache)
    tc.adam_step(net.adversary.params, grads, opt, **cfg.adam())
    return loss


def objective(net: Network, X, s, r, lam: float, forward=None, update_stats=True,
              _adv_sign=-1.0):
    """Encoder-identifier loss ``CE_id - lam * CE_adv`` and its gradients.

    Returns ``(ce_id, ce_adv, combined, grads)`` with ``grads`` covering the
    encoder and identifier parameters only.  ``ce_adv`` is NaN when the
    network has no adversary.
    """
    if forward is None:
        forward = net.encoder.forward(X, "train", update_stats=update_stats)
    feats, caches = forward
    logits, id_cache = net.identifier.forward(feats)
    ce_id, probs = tc.softmax_cross_entropy(logits, s)
    dfeat, grads = net.identifier.backward(tc.softmax_cross_entropy_backward(probs, s),
                                           id_cache)
    ce_adv = float("nan")
    combined = ce_id
    if net.adversary is not None:
        adv_logits, _ = net.adversary.forward(feats)
        ce_adv, adv_probs = tc.softmax_cross_entropy(adv_logits, r)
        combined = ce_id - lam * ce_adv
        if lam != 0:
            dadv = tc.softmax_cross_entropy_backward(adv_probs, r)
            dfeat = dfeat + (_adv_sign * lam) * (dadv @ net.adversary.weight)
    grads.update(net.encoder.backward(dfeat, caches))
    return ce_id, ce_adv, combined, grads


def encoder_identifier_step(net: Network, X, s, r, opt: tc.AdamState, lam: float,
                            cfg: TrainConfig, forward=None):
    """One Adam step on encoder and identifier against a frozen adversary.

    Returns ``(ce_id, ce_adv, combined)``.
    """
    ce_id, ce_adv, combined, grads = objective(net, X, s, r, lam, forward)
    _check(combined, "encoder loss")
    tc.adam_step(net.theta_gamma(), grads, opt, **cfg.adam())
    return ce_id, ce_adv, combined


def train_batch(net: Network, X, s, r, opts: Optimizers, cfg: TrainConfig):
    """Adversary step followed by encoder-identifier step on one mini-batch.

    Both steps see the same encoder parameters, so a single train-mode
    forward pass serves both.
    """
    forward = net.encoder.forward(X, "train", update_stats=True)
    adv_loss = float("nan")
    if net.adversary is not None:
        adv_loss = adversary_step(net, X, r, opts.phi, cfg, feats=forward[0])
    ce_id, ce_adv, combined = encoder_identifier_step(net, X, s, r, opts.theta_gamma,
                                                      cfg.lam, cfg, forward)
    return ce_id, ce_adv, combined, adv_loss


def batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _heads(net: Network, which):
    heads = []
    for name in which:
        head = {"identifier": net.identifier, "adversary": net.adversary}.get(name, KeyError)
        if head is KeyError:
            raise ValueError(f"unknown head {name!r}")
        if head is None:
            raise ValueError(f"network has no {name} head")
        heads.append(head)
    return heads


def predict_logits(net: Network, X, which="identifier"):
    """Eval-mode logits of one head, or a tuple of them for a tuple ``which``."""
    names = (which,) if isinstance(which, str) else tuple(which)
    heads = _heads(net, names)
    out = [[] for _ in heads]
    for i in range(0, len(X), EVAL_BATCH):
        feats, _ = net.encoder.forward(X[i:i + EVAL_BATCH], "eval", keep_cache=False)
        for acc, head in zip(out, heads):
            acc.append(head.forward(feats)[0])
    logits = tuple(np.concatenate(o) if o else np.zeros((0, h.n_classes), np.float32)
                   for o, h in zip(out, heads))
    return logits[0] if isinstance(which, str) else logits


def _score(logits, labels):
    loss, _ = tc.softmax_cross_entropy(logits, labels)
    return float(np.mean(np.argmax(logits, axis=1) == labels)), loss


def _labels(net, ds, which):
    return ds.subjects if which == "identifier" else net.map_sessions(ds.sessions)


def evaluate(net: Network, ds: Dataset, which="identifier"):
    """Accuracy and mean cross-entropy of one head, batchnorm in eval mode.

    Adversary evaluation requires every session of ``ds`` to be one of the
    network's training sessions.
    """
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _heads(net, (which,))
    labels = _labels(net, ds, which)
    return _score(predict_logits(net, ds.X, which), labels)


def evaluate_heads(net: Network, ds: Dataset):
    """``{head: (acc, loss)}`` for every head, sharing one encoder pass."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    names = ("identifier",) + (("adversary",) if net.adversary is not None else ())
    labels = [_labels(net, ds, n) for n in names]
    logits = predict_logits(net, ds.X, names)
    return {n: _score(z, y) for n, z, y in zip(names, logits, labels)}


def train(net: Network, train_set: Dataset, val_set: Dataset, cfg: TrainConfig,
          callback=None):
    """Train in place and return ``(best_network, history)``.

    Stops once the identifier validation loss has not improved for
    ``cfg.patience`` passes, or after ``cfg.max_passes``.
    """
    if len(val_set) == 0:
        raise ValueError("validation set is empty")
    if cfg.batch_size > len(train_set):
        raise ValueError(f"batch_size {cfg.batch_size} exceeds training set size "
                         f"{len(train_set)}")
    has_adv = net.adversary is not None
    r_train = net.map_sessions(train_set.sessions) if has_adv else \
        np.zeros(len(train_set), np.int64)
    s_train = train_set.subjects
    X = train_set.X.astype(net.identifier.weight.dtype, copy=False)
    rng = substream(cfg.seed, "train.shuffle")
    opts = Optimizers()
    history = TrainHistory()
    best_loss, best_net = math.inf, net.copy()

    for p in range(cfg.max_passes):
        id_losses, enc_losses = [], []
        for idx in batches(len(X), cfg.batch_size, rng):
            ce_id, _, combined, _ = train_batch(net, X[idx], s_train[idx], r_train[idx],
                                                opts, cfg)
            id_losses.append(ce_id)
            enc_losses.append(combined)
        scores = evaluate_heads(net, val_set)
        val_acc, val_loss = scores["identifier"]
        _check(val_loss, "identifier validation loss")
        adv_acc = scores["adversary"][0] if has_adv else float("nan")
        rec = PassRecord(p, float(np.mean(id_losses)), val_loss, val_acc, adv_acc,
                         float(np.mean(enc_losses)))
        history.records.append(rec)
        log.info("pass %d id_train %.4f id_val %.4f acc %.3f adv %.3f", p,
                 rec.id_train_loss, val_loss, val_acc, adv_acc)
        if callback is not None:
            callback(rec, net)
        if val_loss < best_loss:
            best_loss, best_net, history.best_pass = val_loss, net.copy(), p
        elif p - history.best_pass >= cfg.patience:
            break
    return best_net, history
