"""Epoch datasets: normalization, binary file format, split protocols and a
synthetic subject/session-confounded signal generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.signal import lfilter

from ._rng import substream


class FormatError(ValueError):
    pass


class EpochRecord(NamedTuple):
    X: np.ndarray
    s: int
    r: int


@dataclass
class Dataset:
    """Epochs ``X`` (n, C, T) with per-epoch subject and session IDs."""

    X: np.ndarray
    subjects: np.ndarray
    sessions: np.ndarray
    n_subjects: int
    n_sessions: int
    sample_rate: float = 256.0
    normalized: bool = False

    def __post_init__(self):
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        self.sessions = np.asarray(self.sessions, dtype=np.int64)
        if self.X.ndim != 3:
            raise ValueError(f"X must be (n, C, T), got {self.X.shape}")
        n = len(self.X)
        if self.subjects.shape != (n,) or self.sessions.shape != (n,):
            raise ValueError("one subject and one session ID per epoch required")
        for ids, k, what in ((self.subjects, self.n_subjects, "subject"),
                             (self.sessions, self.n_sessions, "session")):
            if n and (ids.min() < 0 or ids.max() >= k):
                raise ValueError(f"{what} IDs must lie in [0, {k})")

    @property
    def n_channels(self) -> int:
        return self.X.shape[1]

    @property
    def n_samples(self) -> int:
        return self.X.shape[2]

    def __len__(self):
        return len(self.X)

    def __getitem__(self, i) -> EpochRecord:
        return EpochRecord(self.X[i], int(self.subjects[i]), int(self.sessions[i]))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, X=self.X[idx], subjects=self.subjects[idx],
                       sessions=self.sessions[idx])

    def normalize(self) -> "Dataset":
        if self.normalized:
            return self
        return replace(self, X=normalize_epoch(self.X), normalized=True)


# ---------------------------------------------------------------------------
# normalization

CENTER_TOL = 1e-7


def normalize_epoch(X):
    """Zero-mean each channel, then divide it by its absolute maximum.

    Works on a single (C, T) epoch or any stack (..., C, T).  All-zero
    channels stay zero.  A channel whose mean is already within round-off of
    zero is not re-centered, which makes the map a bitwise fixed point on its
    own output.
    """
    X = np.asarray(X)
    if not np.all(np.isfinite(X)):
        raise ValueError("normalize_epoch requires finite input")
    x = X.astype(np.float64)
    mean = x.mean(axis=-1, keepdims=True)
    scale = np.abs(x).max(axis=-1, keepdims=True)
    x = np.where(np.abs(mean) > CENTER_TOL * scale, x - mean, x)
    peak = np.abs(x).max(axis=-1, keepdims=True)
    x = np.divide(x, peak, out=np.zeros_like(x), where=peak > 0)
    return x.astype(X.dtype if np.issubdtype(X.dtype, np.floating) else np.float64)


# ---------------------------------------------------------------------------
# file format (little-endian)
#
#   magic "EEGB" | version u32 | C u32 | T u32 | S u32 | R u32 |
#   sample_rate_hz f32 | n_epochs u64 | normalized u8 |
#   n_epochs x (s u16 | r u16 | C*T f32, channel-major)

MAGIC = b"EEGB"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIIfQB")


def _record_dtype(c, t):
    return np.dtype([("s", "<u2"), ("r", "<u2"), ("x", "<f4", (c, t))])


def write_dataset(path, ds: Dataset) -> None:
    c, t = ds.n_channels, ds.n_samples
    rec = np.empty(len(ds), dtype=_record_dtype(c, t))
    rec["s"] = ds.subjects
    rec["r"] = ds.sessions
    rec["x"] = ds.X
    header = _HEADER.pack(MAGIC, VERSION, c, t, ds.n_subjects, ds.n_sessions,
                          ds.sample_rate, len(ds), int(ds.normalized))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def read_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r} at offset 0 (expected {MAGIC!r})")
    if len(buf) < _HEADER.size:
        raise FormatError(f"{path}: truncated header, {len(buf)} of {_HEADER.size} bytes")
    _, version, c, t, s, r, rate, n, norm = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    dt = _record_dtype(c, t)
    expected = _HEADER.size + n * dt.itemsize
    if len(buf) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {n} epochs, found "
                          f"{len(buf)} (truncated or trailing data after offset "
                          f"{min(len(buf), expected)})")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=_HEADER.size)
    subj = rec["s"].astype(np.int64)
    sess = rec["r"].astype(np.int64)
    if n and (subj.max() >= s or sess.max() >= r):
        bad = int(np.argmax((subj >= s) | (sess >= r)))
        raise FormatError(f"{path}: epoch {bad} (offset {_HEADER.size + bad * dt.itemsize}) "
                          f"has IDs outside S={s}, R={r}")
    return Dataset(rec["x"].copy(), subj, sess, s, r, float(rate), bool(norm))


# ---------------------------------------------------------------------------
# splits

def _round(x):
    return int(np.floor(x + 0.5))


def _stratified(groups: dict, fractions, rng):
    """Shuffle each group and cut it by ``fractions``; returns one index array per part."""
    parts = [[] for _ in fractions]
    for key in sorted(groups):
        idx = rng.permutation(groups[key])
        n = len(idx)
        cuts, acc = [], 0
        for f in fractions[:-1]:
            acc += _round(f * n)
            cuts.append(min(acc, n))
        for part, chunk in zip(parts, np.split(idx, cuts)):
            part.append(chunk)
    return [rng.permutation(np.concatenate(p)) if p else np.array([], np.int64)
            for p in parts]


def split_within_session(ds: Dataset, session_id: int, seed=0):
    """70/10/20 split of one session's epochs, stratified by subject."""
    pool = np.flatnonzero(ds.sessions == session_id)
    if pool.size == 0:
        raise ValueError(f"session {session_id} has no epochs")
    groups = {int(s): pool[ds.subjects[pool] == s] for s in np.unique(ds.subjects[pool])}
    rng = substream(seed, "split.within")
    tr, va, te = _stratified(groups, (0.7, 0.1, 0.2), rng)
    return ds.subset(tr), ds.subset(va), ds.subset(te)


def split_loso(ds: Dataset, test_session: int, seed=0):
    """Hold out ``test_session``; split the rest 80/20 per (subject, session).

    Returns ``(train, val, test, session_map)`` where ``session_map`` maps each
    remaining original session ID to an adversary label, in ascending order.
    """
    present = sorted(int(r) for r in np.unique(ds.sessions))
    if test_session not in present:
        raise ValueError(f"unknown session {test_session}; present: {present}")
    if len(present) < 2:
        raise ValueError("leave-one-session-out needs at least two sessions")
    rest = np.flatnonzero(ds.sessions != test_session)
    groups = {}
    for i in rest:
        groups.setdefault((int(ds.subjects[i]), int(ds.sessions[i])), []).append(i)
    groups = {k: np.array(v) for k, v in groups.items()}
    rng = substream(seed, "split.loso")
    tr, va = _stratified(groups, (0.8, 0.2), rng)
    session_map = {r: i for i, r in enumerate(r for r in present if r != test_session)}
    test = ds.subset(np.flatnonzero(ds.sessions == test_session))
    return ds.subset(tr), ds.subset(va), test, session_map


# ---------------------------------------------------------------------------
# synthetic data

@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 10
    n_sessions: int = 3
    epochs_per_subject_session: int = 200
    n_channels: int = 16
    n_samples: int = 128
    sample_rate: float = 256.0
    # calibrated so a probe adversary finds the session at lambda 0 in two passes
    subject_scale: float = 0.3
    session_scale: float = 1.5
    session_shared: float = 0.3
    noise_floor: float = 0.5
    n_sources: int = 4
    seed: int = 0

    def validate(self):
        for f in ("n_subjects", "n_sessions", "epochs_per_subject_session", "n_channels",
                  "n_samples", "n_sources"):
            if getattr(self, f) < 1:
                raise ValueError(f"{f} must be positive")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        for f in ("subject_scale", "session_scale", "noise_floor"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be non-negative")
        if not 0 <= self.session_shared <= 1:
            raise ValueError("session_shared must lie in [0, 1]")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# Resonance centres (Hz) of the latent sources and how far a subject may move them.
_BASE_FREQS = np.array([6.0, 10.0, 20.0, 34.0, 50.0, 64.0])
_FREQ_SPREAD = np.array([1.5, 2.5, 4.0, 6.0, 8.0, 8.0])
# Session signature resonances are drawn from this fraction of the Nyquist band.
_SIGNATURE_BAND = (0.1, 0.85)
_POLE_RADIUS = 0.96
_BURN_IN = 64


def _ar2(freq, rate, shape, rng, radius=_POLE_RADIUS):
    """Unit-variance-ish order-2 autoregressive oscillation at ``freq`` Hz."""
    a1 = 2 * radius * np.cos(2 * np.pi * freq / rate)
    e = rng.standard_normal(shape[:-1] + (shape[-1] + _BURN_IN,))
    z = lfilter([1.0], [1.0, -a1, radius ** 2], e, axis=-1)[..., _BURN_IN:]
    return z / z.std()


def synth_generate(cfg: SynthConfig = SynthConfig()) -> Dataset:
    """Draw epochs ``X = A_s z + b (sqrt(rho) p_r u_r + sqrt(1-rho) q_sr v_sr) + w``.

    ``z`` are order-2 autoregressive sources whose resonance frequencies are
    subject specific and ``A_s`` is a subject mixing matrix.  The session
    part has a narrowband signature ``u_r`` with spatial pattern ``p_r``
    shared by every subject recorded in session ``r``, and a signature
    ``v_sr`` with pattern ``q_sr`` unique to one recording; both have random
    resonance frequencies.  ``b`` is ``session_scale``, ``rho`` is
    ``session_shared`` and ``w`` white sensor noise of scale
    ``noise_floor``.  ``session_scale=0`` removes every session dependence;
    ``subject_scale=0`` makes all subjects share one mixing matrix and one
    set of resonances.
    """
    cfg.validate()
    S, R, E = cfg.n_subjects, cfg.n_sessions, cfg.epochs_per_subject_session
    C, T, K = cfg.n_channels, cfg.n_samples, cfg.n_sources
    ps = substream(cfg.seed, "synth.subjects")
    pr = substream(cfg.seed, "synth.sessions")
    noise = substream(cfg.seed, "synth.noise")

    base = _BASE_FREQS[np.arange(K) % len(_BASE_FREQS)]
    spread = _FREQ_SPREAD[np.arange(K) % len(_FREQ_SPREAD)]
    shared_mix = ps.standard_normal((C, K))
    freqs = base + cfg.subject_scale * ps.uniform(-1, 1, (S, K)) * spread
    mix = shared_mix + cfg.subject_scale * ps.standard_normal((S, C, K))

    nyq = cfg.sample_rate / 2
    lo, hi = _SIGNATURE_BAND[0] * nyq, _SIGNATURE_BAND[1] * nyq
    shared_freq = pr.uniform(lo, hi, R)
    shared_pattern = pr.standard_normal((R, C))
    own_freq = pr.uniform(lo, hi, (S, R))
    own_pattern = pr.standard_normal((S, R, C))
    w_shared = cfg.session_scale * np.sqrt(cfg.session_shared)
    w_own = cfg.session_scale * np.sqrt(1 - cfg.session_shared)

    X = np.empty((S * R * E, C, T), dtype=np.float32)
    subj = np.repeat(np.arange(S), R * E)
    sess = np.tile(np.repeat(np.arange(R), E), S)
    for s in range(S):
        for r in range(R):
            z = np.stack([_ar2(freqs[s, k], cfg.sample_rate, (E, T), noise)
                          for k in range(K)], axis=1)          # (E, K, T)
            sig = np.einsum("ck,ekt->ect", mix[s], z)
            if cfg.session_scale > 0:
                u = _ar2(shared_freq[r], cfg.sample_rate, (E, 1, T), noise)
                v = _ar2(own_freq[s, r], cfg.sample_rate, (E, 1, T), noise)
                sig += w_shared * shared_pattern[r][:, None] * u
                sig += w_own * own_pattern[s, r][:, None] * v
            sig += cfg.noise_floor * noise.standard_normal((E, C, T))
            i0 = (s * R + r) * E
            X[i0:i0 + E] = sig
    return Dataset(X, subj, sess, S, R, cfg.sample_rate, normalized=False)
