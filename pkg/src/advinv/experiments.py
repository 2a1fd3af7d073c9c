"""Experiment protocols: within-session, leave-one-session-out, baselines, reports."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tc
from .baselines import pca_qda, spectral_qda
from .dataio import Dataset, read_dataset, split_loso, split_within_session
from .model import EncoderConfig, Network, checkpoint_tensors, save_checkpoint
from .trainer import TrainConfig, evaluate, objective, train

log = logging.getLogger(__name__)

MODES = ("within", "loso", "sweep", "baseline-spectral", "baseline-pca", "gradcheck", "gen")
BASELINE_LABELS = {"spectral": "Spectral Powers + QDA", "pca": "PCA + QDA"}

RAW_COLUMNS = ("method", "lambda", "rep", "seed", "id_val_acc", "adv_val_acc", "test_acc")
TABLE_COLUMNS = ("method", "lambda", "id_val_mean", "id_val_sd", "adv_val_mean",
                 "adv_val_sd", "test_mean", "test_sd", "reps")
SCATTER_COLUMNS = ("lambda", "id_mean", "id_sd", "adv_mean", "adv_sd")


# ---------------------------------------------------------------------------
# config files

def _coerce(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes"):
            return True
        if value.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def parse_config(text: str, cls, extra=()) -> dict:
    """Parse ``key = value`` lines into keyword arguments for dataclass ``cls``.

    Blank lines and ``#`` comments are ignored.  Keys named in ``extra`` are
    passed through as raw strings.
    """
    defaults = {f.name: f.default for f in dataclasses.fields(cls)}
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = (part.strip() for part in line.partition("="))
        if not sep or not key:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        if key in extra:
            out[key] = value
            continue
        if key not in defaults:
            raise ValueError(f"line {lineno}: unknown key {key!r}; valid keys: "
                             f"{', '.join(sorted(defaults) + sorted(extra))}")
        try:
            out[key] = _coerce(value, defaults[key])
        except ValueError as exc:
            raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from None
    return out


def load_config(path, cls, extra=()) -> dict:
    return parse_config(Path(path).read_text(), cls, extra)


def parse_widths(text):
    if text is None or text == "":
        return None
    widths = tuple(int(v) for v in str(text).split(","))
    if len(widths) != 4:
        raise ValueError(f"widths needs 4 comma-separated integers, got {text!r}")
    return widths


# ---------------------------------------------------------------------------
# spec and results

@dataclass
class ExperimentSpec:
    """One experiment invocation.

    ``data`` is a dataset file path or an in-memory :class:`Dataset`.
    ``train`` holds :class:`TrainConfig` overrides; ``lam`` and ``seed`` are
    set per run from ``lambdas`` and ``base_seed + repetition``.
    ``swap_sessions`` reverses the order of the adversary's session labels.
    """

    mode: str
    data: object = None
    session: int = 0
    lambdas: tuple = (0.0,)
    train: dict = field(default_factory=dict)
    reps: int = 1
    base_seed: int = 0
    out: str | None = None
    widths: tuple | None = None
    swap_sessions: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        self.lambdas = tuple(float(v) for v in self.lambdas)
        if not self.lambdas:
            raise ValueError("lambda list is empty")
        if any(not v >= 0 for v in self.lambdas):
            raise ValueError(f"lambdas must be non-negative, got {self.lambdas}")
        if self.reps < 1:
            raise ValueError("reps must be at least 1")
        if {"lam", "seed"} & set(self.train):
            raise ValueError("set lam and seed through lambdas and base_seed")
        bad = set(self.train) - {f.name for f in dataclasses.fields(TrainConfig)}
        if bad:
            raise ValueError(f"unknown TrainConfig keys: {sorted(bad)}")

    def train_config(self, lam, seed) -> TrainConfig:
        return TrainConfig(lam=lam, seed=seed, **self.train)

    def seeds(self):
        return [self.base_seed + i for i in range(self.reps)]

    def encoder_config(self, ds: Dataset) -> EncoderConfig:
        return EncoderConfig(ds.n_channels, ds.n_samples, *(self.widths or ()))

    def dataset(self) -> Dataset:
        if self.data is None:
            raise ValueError("no dataset given")
        ds = self.data if isinstance(self.data, Dataset) else read_dataset(self.data)
        return ds if ds.normalized else ds.normalize()


@dataclass(frozen=True)
class RunRecord:
    method: str
    lam: float
    rep: int
    seed: int
    id_val_acc: float
    adv_val_acc: float
    test_acc: float


@dataclass(frozen=True)
class ResultRow:
    """Mean and population standard deviation over repetitions."""

    method: str
    lam: float
    id_val_mean: float
    id_val_sd: float
    adv_val_mean: float
    adv_val_sd: float
    test_mean: float
    test_sd: float
    reps: int

    @classmethod
    def aggregate(cls, runs) -> "ResultRow":
        runs = list(runs)
        if not runs:
            raise ValueError("no runs to aggregate")

        def stat(attr):
            v = np.array([getattr(r, attr) for r in runs], dtype=np.float64)
            return float(v.mean()), float(v.std(ddof=0))

        return cls(runs[0].method, runs[0].lam, *stat("id_val_acc"), *stat("adv_val_acc"),
                   *stat("test_acc"), len(runs))


def _order(r):
    # baselines (no lambda) first, then by lambda, method and repetition
    nan = math.isnan(r.lam)
    return (not nan, 0.0 if nan else r.lam, r.method, r.rep)


def aggregate(runs) -> list[ResultRow]:
    groups = {}
    for r in sorted(runs, key=_order):
        groups.setdefault(_order(r)[:3], []).append(r)
    return [ResultRow.aggregate(g) for g in groups.values()]


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_raw_csv(path, runs):
    _write_csv(path, RAW_COLUMNS, [dataclasses.astuple(r) for r in
                                   sorted(runs, key=_order)])


def write_table_csv(path, rows):
    _write_csv(path, TABLE_COLUMNS, [dataclasses.astuple(r) for r in rows])


def write_manifest(path, spec: ExperimentSpec, extra=None):
    """Record every resolved setting so a run can be repeated."""
    lines = [f"python = {platform.python_version()}", f"numpy = {np.__version__}",
             f"command = {' '.join(sys.argv)}", f"mode = {spec.mode}",
             f"data = {spec.data if not isinstance(spec.data, Dataset) else '<memory>'}",
             f"session = {spec.session}",
             f"lambdas = {','.join(repr(v) for v in spec.lambdas)}",
             f"reps = {spec.reps}", f"base_seed = {spec.base_seed}",
             f"seeds = {','.join(str(s) for s in spec.seeds())}",
             f"widths = {','.join(map(str, spec.widths)) if spec.widths else 'full'}",
             f"swap_sessions = {spec.swap_sessions}"]
    cfg = spec.train_config(spec.lambdas[0], spec.base_seed)
    for f in dataclasses.fields(TrainConfig):
        if f.name not in ("lam", "seed"):
            lines.append(f"train.{f.name} = {getattr(cfg, f.name)}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# protocols

def cnn_label(lam):
    return "CNN" if lam == 0 else "A-CNN"


def loso_run(ds: Dataset, spec: ExperimentSpec, lam, rep, out_dir=None) -> RunRecord:
    """One adversarial leave-one-session-out training run."""
    seed = spec.base_seed + rep
    tr, va, te, smap = split_loso(ds, spec.session, seed)
    order = sorted(smap, reverse=spec.swap_sessions)
    net = Network.build(spec.encoder_config(ds), ds.n_subjects, order, seed=seed)
    best, history = train(net, tr, va, spec.train_config(lam, seed))
    if spec.session in best.session_map:
        raise AssertionError("held-out session leaked into the adversary label space")
    # the best pass was scored on the validation split with this exact network
    id_val, adv_val = history.best.id_val_acc, history.best.adv_val_acc
    test = evaluate(best, te, "identifier")[0]
    if out_dir is not None:
        stem = Path(out_dir) / f"lam{lam:g}_rep{rep}"
        save_checkpoint(f"{stem}.ckpt", best)
        history.to_csv(f"{stem}_history.csv")
    log.info("loso lam=%g rep=%d id_val=%.3f adv_val=%.3f test=%.3f", lam, rep, id_val,
             adv_val, test)
    return RunRecord(cnn_label(lam), lam, rep, seed, id_val, adv_val, test)


def loso_runs(spec: ExperimentSpec, out_dir=None) -> list[RunRecord]:
    ds = spec.dataset()
    return [loso_run(ds, spec, lam, rep, out_dir)
            for lam in spec.lambdas for rep in range(spec.reps)]


def run_loso(spec: ExperimentSpec) -> list[ResultRow]:
    return aggregate(loso_runs(spec))


def within_runs(spec: ExperimentSpec, out_dir=None) -> list[RunRecord]:
    ds = spec.dataset()
    if spec.session not in set(ds.sessions.tolist()):
        raise ValueError(f"dataset has no session {spec.session}")
    runs = []
    for rep, seed in enumerate(spec.seeds()):
        tr, va, te = split_within_session(ds, spec.session, seed)
        net = Network.build(spec.encoder_config(ds), ds.n_subjects, (), seed=seed)
        best, history = train(net, tr, va, spec.train_config(0.0, seed))
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / f"within_rep{rep}.ckpt", best)
            history.to_csv(Path(out_dir) / f"within_rep{rep}_history.csv")
        runs.append(RunRecord("CNN", 0.0, rep, seed, history.best.id_val_acc, np.nan,
                              evaluate(best, te)[0]))
    return runs


def run_within_session(spec: ExperimentSpec) -> ResultRow:
    return ResultRow.aggregate(within_runs(spec))


def baseline_runs(spec: ExperimentSpec, methods=("spectral", "pca")) -> list[RunRecord]:
    ds = spec.dataset()
    runs = []
    for method in methods:
        if method not in BASELINE_LABELS:
            raise ValueError(f"unknown baseline {method!r}")
        for rep, seed in enumerate(spec.seeds()):
            tr, va, te, _ = split_loso(ds, spec.session, seed)
            pipe = spectral_qda(ds.sample_rate) if method == "spectral" else pca_qda()
            pipe.fit(tr.X, tr.subjects)
            runs.append(RunRecord(BASELINE_LABELS[method], np.nan, rep, seed,
                                  pipe.score(va.X, va.subjects), np.nan,
                                  pipe.score(te.X, te.subjects)))
    return runs


def run_baselines(spec: ExperimentSpec, methods=("spectral", "pca")) -> list[ResultRow]:
    return aggregate(baseline_runs(spec, methods))


def scatter_rows(rows):
    """Identifier vs adversary validation accuracy per lambda, CNN rows only."""
    return [(r.lam, r.id_val_mean, r.id_val_sd, r.adv_val_mean, r.adv_val_sd)
            for r in sorted(rows, key=lambda r: r.lam) if r.method in ("CNN", "A-CNN")]


def run_sweep_report(runs, out_dir) -> dict:
    """Write raw, table and scatter CSVs for a lambda sweep; return their paths."""
    runs = list(runs)
    if not runs:
        raise ValueError("no sweep results to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = aggregate(runs)
    paths = {"raw": out / "sweep_raw.csv", "table": out / "table.csv",
             "scatter": out / "scatter.csv"}
    write_raw_csv(paths["raw"], runs)
    write_table_csv(paths["table"], rows)
    _write_csv(paths["scatter"], SCATTER_COLUMNS, scatter_rows(rows))
    return paths


# ---------------------------------------------------------------------------
# gradient check

def gradcheck_suite(lam=0.05, seed=0, _adv_sign=-1.0, tolerance=1e-4):
    """Finite-difference checks of the tiny network in float64.

    Returns ``[(title, GradcheckReport)]`` for the identifier loss, the
    adversary loss and the combined encoder loss ``CE_id - lam * CE_adv``.
    """
    cfg = EncoderConfig.reduced(3, 16)
    net = Network.build(cfg, 4, (0, 1), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((6, 3, 16))
    s = np.array([0, 1, 2, 3, 0, 1])
    r = np.array([0, 1, 1, 0, 1, 0])

    def encoder_loss(weight):
        def fn(params):
            ce_id, _, combined, grads = objective(net, X, s, r, weight, update_stats=False,
                                                  _adv_sign=_adv_sign)
            return combined, grads
        return fn

    feats = net.encoder.forward(X, "train", update_stats=False, keep_cache=False)[0]

    def adversary_loss(params):
        logits, cache = net.adversary.forward(feats)
        loss, probs = tc.softmax_cross_entropy(logits, r)
        return loss, net.adversary.backward(tc.softmax_cross_entropy_backward(probs, r),
                                            cache)[1]

    return [("identifier", tc.gradcheck(encoder_loss(0.0), net.theta_gamma(), tolerance)),
            ("adversary", tc.gradcheck(adversary_loss, net.phi(), tolerance)),
            (f"combined lam={lam:g}", tc.gradcheck(encoder_loss(lam), net.theta_gamma(),
                                                   tolerance))]


def cmd_gradcheck(out=print, _adv_sign=-1.0) -> int:
    """Run the gradient-check suite, print a report, return the exit status."""
    results = gradcheck_suite(_adv_sign=_adv_sign)
    names = [n for n in checkpoint_tensors(
        Network.build(EncoderConfig.reduced(3, 16), 4, (0, 1))) if not n.startswith("meta.")]
    checked = set()
    ok = True
    for title, report in results:
        out(f"[{title}] max_rel_err={report.max_error:.3e} "
            f"{'PASS' if report.passed else 'FAIL'}")
        for line in report.lines():
            out("  " + line)
        checked |= set(report.errors)
        ok &= report.passed
    for name in names:
        if name not in checked:
            out(f"  {name:<24s} (running statistic, no gradient)")
    out("gradcheck " + ("PASSED" if ok else "FAILED"))
    return 0 if ok else 1
