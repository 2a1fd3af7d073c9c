"""Convolutional encoder, linear softmax heads and checkpoint I/O.

Encoder layout for a ``(C, T)`` epoch (channel counts shown for the default
widths; ``N`` is the batch axis)::

    reshape                  (N, 1, C, T)
    conv 20 x (1, T/2)       (N, 20, C, T/2)      + batchnorm
    depthwise 20 x (C, 1)    (N, 400, 1, T/2)     + batchnorm + relu, reshape (N, 1, 400, T/2)
    conv 200 x (400, T/4)    (N, 200, 1, T/4)     + batchnorm + relu, reshape (N, 1, 200, T/4)
    conv 100 x (200, T/8)    (N, 100, 1, T/8)     + batchnorm + relu
    flatten                  (N, 100 * T/8)

The temporal convolutions use stride 2 along time with symmetric zero padding
``((out - 1) * stride + k - in) / 2``.
"""
from __future__ import annotations

import copy
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as tc
from ._rng import substream


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderConfig:
    n_channels: int
    n_samples: int
    n_temporal: int = 20
    depth_multiplier: int = 20
    n_block3: int = 200
    n_block4: int = 100

    @classmethod
    def reduced(cls, n_channels=3, n_samples=16, factor=10) -> "EncoderConfig":
        """Same topology with every channel count divided by ``factor``."""
        return cls(n_channels, n_samples, 20 // factor, 20 // factor,
                   200 // factor, 100 // factor)

    @property
    def feature_dim(self) -> int:
        return self.n_block4 * self.n_samples // 8

    @property
    def n_spatial(self) -> int:
        return self.n_temporal * self.depth_multiplier

    def blocks(self):
        """Per-block ``(kernel_shape, stride, pad, output_shape)`` without the batch axis."""
        self.validate()
        c, t = self.n_channels, self.n_samples
        f1, f2 = self.n_temporal, self.n_spatial
        spec = [
            ("b1", (f1, 1, 1, t // 2), t, t // 2, (f1, c, t // 2)),
            ("b2", (f1, self.depth_multiplier, c, 1), None, None, (f2, 1, t // 2)),
            ("b3", (self.n_block3, 1, f2, t // 4), t // 2, t // 4, (self.n_block3, 1, t // 4)),
            ("b4", (self.n_block4, 1, self.n_block3, t // 8), t // 4, t // 8,
             (self.n_block4, 1, t // 8)),
        ]
        out = {}
        for name, kshape, w_in, w_out, oshape in spec:
            if w_in is None:
                out[name] = (kshape, (1, 1), (0, 0), oshape)
                continue
            total = (w_out - 1) * 2 + kshape[-1] - w_in
            if total < 0 or total % 2:
                raise ConfigError(
                    f"T={t} admits no symmetric padding for block {name} "
                    f"(kernel {kshape[-1]}, {w_in} -> {w_out}); use T divisible by 16")
            out[name] = (kshape, (1, 2), (0, total // 2), oshape)
        return out

    def validate(self):
        if self.n_channels < 1:
            raise ConfigError("n_channels must be >= 1")
        if self.n_samples < 8 or self.n_samples % 8:
            raise ConfigError(f"n_samples must be a positive multiple of 8, got {self.n_samples}")
        if min(self.n_temporal, self.depth_multiplier, self.n_block3, self.n_block4) < 1:
            raise ConfigError("channel counts must be positive")


def _uniform(rng, shape, fan_in, dtype):
    a = np.sqrt(6.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Encoder:
    """Parameters, batchnorm statistics and forward/backward of the encoder."""

    def __init__(self, config: EncoderConfig, params: dict, stats: dict):
        self.config = config
        self.params = params
        self.stats = stats
        self.layout = config.blocks()

    @classmethod
    def build(cls, config: EncoderConfig, seed=0, dtype=np.float32) -> "Encoder":
        rng = substream(seed, "init.encoder")
        params, stats = {}, {}
        for name, (kshape, _, _, oshape) in config.blocks().items():
            fan_in = int(np.prod(kshape[1:]))
            params[f"enc.{name}.kernel"] = _uniform(rng, kshape, fan_in, dtype)
            params[f"enc.{name}.bias"] = np.zeros(oshape[0], dtype)
            params[f"enc.{name}.gamma"] = np.ones(oshape[0], dtype)
            params[f"enc.{name}.beta"] = np.zeros(oshape[0], dtype)
            stats[name] = tc.RunningStats.init(oshape[0], dtype)
        return cls(config, params, stats)

    def astype(self, dtype) -> "Encoder":
        params = {k: v.astype(dtype) for k, v in self.params.items()}
        stats = {k: tc.RunningStats(s.mean.astype(dtype), s.var.astype(dtype), s.momentum)
                 for k, s in self.stats.items()}
        return Encoder(self.config, params, stats)

    def copy(self) -> "Encoder":
        return Encoder(self.config, {k: v.copy() for k, v in self.params.items()},
                       copy.deepcopy(self.stats))

    def forward(self, X, mode="train", update_stats=True, keep_cache=True, trace=None):
        """Map epochs ``X`` (N, C, T) to features (N, feature_dim).

        If ``trace`` is a list, ``(label, shape)`` pairs of every intermediate
        tensor are appended to it.
        """
        cfg = self.config
        if X.ndim != 3 or X.shape[1:] != (cfg.n_channels, cfg.n_samples):
            raise tc.DimensionError(
                f"expected input (N, {cfg.n_channels}, {cfg.n_samples}), got {X.shape}")
        p = self.params
        caches = {}
        h = X.reshape(X.shape[0], 1, cfg.n_channels, cfg.n_samples)
        note = trace.append if trace is not None else (lambda item: None)
        note(("input", h.shape))
        for name in ("b1", "b2", "b3", "b4"):
            _, stride, pad, _ = self.layout[name]
            conv = tc.depthwise_conv2d if name == "b2" else tc.conv2d
            h, c_conv = conv(h, p[f"enc.{name}.kernel"], p[f"enc.{name}.bias"], stride, pad)
            note((f"{name}.conv", h.shape))
            h, c_bn = tc.batchnorm(h, p[f"enc.{name}.gamma"], p[f"enc.{name}.beta"],
                                   self.stats[name], mode, update_stats)
            note((f"{name}.bn", h.shape))
            mask = None
            if name != "b1":
                h, mask = tc.relu(h)
                if name != "b4":
                    # (N, F, 1, W) -> (N, 1, F, W)
                    h = h.reshape(h.shape[0], 1, h.shape[1], h.shape[3])
                    note((f"{name}.reshape", h.shape))
            if keep_cache:
                caches[name] = (c_conv, c_bn, mask)
        feats = h.reshape(h.shape[0], -1)
        note(("flatten", feats.shape))
        return feats, caches

    def backward(self, dfeat, caches) -> dict:
        grads = {}
        n = dfeat.shape[0]
        dh = None
        for name in ("b4", "b3", "b2", "b1"):
            c_conv, c_bn, mask = caches[name]
            _, _, _, oshape = self.layout[name]
            if name == "b4":
                dh = dfeat.reshape((n,) + oshape)
            elif name != "b1":
                dh = dh.reshape((n,) + oshape)
            if mask is not None:
                dh = tc.relu_backward(dh, mask)
            dh, grads[f"enc.{name}.gamma"], grads[f"enc.{name}.beta"] = \
                tc.batchnorm_backward(dh, c_bn)
            back = tc.depthwise_conv2d_backward if name == "b2" else tc.conv2d_backward
            dh, grads[f"enc.{name}.kernel"], grads[f"enc.{name}.bias"] = \
                back(dh, c_conv, need_input_grad=name != "b1")
        return grads

    def n_parameters(self) -> int:
        return sum(v.size for v in self.params.values())


class Head:
    """Fully connected layer producing class logits; softmax lives in the loss."""

    def __init__(self, prefix: str, weight, bias):
        self.prefix = prefix
        self.params = {f"{prefix}.weight": weight, f"{prefix}.bias": bias}

    @classmethod
    def build(cls, prefix, n_features, n_classes, seed=0, dtype=np.float32) -> "Head":
        if n_classes < 2:
            raise ConfigError(f"a softmax head needs at least 2 classes, got {n_classes}")
        rng = substream(seed, f"init.{prefix}")
        w = _uniform(rng, (n_classes, n_features), n_features, dtype)
        return cls(prefix, w, np.zeros(n_classes, dtype))

    @property
    def weight(self):
        return self.params[f"{self.prefix}.weight"]

    @property
    def bias(self):
        return self.params[f"{self.prefix}.bias"]

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]

    def forward(self, feats):
        return tc.linear(feats, self.weight, self.bias)

    def backward(self, dlogits, cache):
        dx, dw, db = tc.linear_backward(dlogits, cache)
        return dx, {f"{self.prefix}.weight": dw, f"{self.prefix}.bias": db}

    def astype(self, dtype) -> "Head":
        return Head(self.prefix, self.weight.astype(dtype), self.bias.astype(dtype))

    def copy(self) -> "Head":
        return Head(self.prefix, self.weight.copy(), self.bias.copy())


def build_encoder(config: EncoderConfig, seed=0, dtype=np.float32) -> Encoder:
    return Encoder.build(config, seed, dtype)


def encoder_forward(encoder: Encoder, X, mode="train"):
    return encoder.forward(X, mode, keep_cache=False)[0]


def head_forward(head: Head, feats):
    return head.forward(feats)[0]


@dataclass
class Network:
    """Encoder plus identifier head and optional adversary head.

    ``session_map`` lists the original session IDs in adversary-label order
    (adversary label ``i`` stands for session ``session_map[i]``).
    """

    encoder: Encoder
    identifier: Head
    adversary: Head | None = None
    session_map: tuple = ()

    @classmethod
    def build(cls, config: EncoderConfig, n_subjects: int, session_map=(), seed=0,
              dtype=np.float32) -> "Network":
        enc = Encoder.build(config, seed, dtype)
        ident = Head.build("id", config.feature_dim, n_subjects, seed, dtype)
        adv = None
        if len(session_map) >= 2:
            adv = Head.build("adv", config.feature_dim, len(session_map), seed, dtype)
        return cls(enc, ident, adv, tuple(int(s) for s in session_map))

    @property
    def config(self) -> EncoderConfig:
        return self.encoder.config

    def theta_gamma(self) -> dict:
        return {**self.encoder.params, **self.identifier.params}

    def phi(self) -> dict:
        return dict(self.adversary.params) if self.adversary is not None else {}

    def all_params(self) -> dict:
        return {**self.theta_gamma(), **self.phi()}

    def copy(self) -> "Network":
        return Network(self.encoder.copy(), self.identifier.copy(),
                       self.adversary.copy() if self.adversary is not None else None,
                       self.session_map)

    def astype(self, dtype) -> "Network":
        return Network(self.encoder.astype(dtype), self.identifier.astype(dtype),
                       self.adversary.astype(dtype) if self.adversary is not None else None,
                       self.session_map)

    def map_sessions(self, sessions) -> np.ndarray:
        """Translate original session IDs to adversary labels."""
        lookup = {s: i for i, s in enumerate(self.session_map)}
        sessions = np.asarray(sessions)
        unknown = sorted(set(np.unique(sessions).tolist()) - set(lookup))
        if unknown:
            raise LabelDomainError(
                f"sessions {unknown} are outside the adversary's training sessions "
                f"{list(self.session_map)}")
        return np.array([lookup[int(s)] for s in sessions], dtype=np.int64)


class LabelDomainError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoint file
#
#   magic "AINV" | version u32 | count u32 | count x entry
#   entry: name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u32[rank] | data
#
# dtype codes: 0 = float32, 1 = int32.  Tensor names:
#   enc.b{1..4}.{kernel,bias,gamma,beta,running_mean,running_var}
#   id.{weight,bias}   adv.{weight,bias}   (adversary optional)
#   meta.config  int32[6] = C, T, n_temporal, depth_multiplier, n_block3, n_block4
#   meta.session_map  int32[R_train]

CKPT_MAGIC = b"AINV"
CKPT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i4")}


def checkpoint_tensors(net: Network) -> dict:
    cfg = net.config
    out = {}
    for k, v in net.encoder.params.items():
        out[k] = v
    for name, st in net.encoder.stats.items():
        out[f"enc.{name}.running_mean"] = st.mean
        out[f"enc.{name}.running_var"] = st.var
    out.update(net.identifier.params)
    if net.adversary is not None:
        out.update(net.adversary.params)
    out["meta.config"] = np.array([cfg.n_channels, cfg.n_samples, cfg.n_temporal,
                                   cfg.depth_multiplier, cfg.n_block3, cfg.n_block4],
                                  dtype=np.int32)
    out["meta.session_map"] = np.array(net.session_map, dtype=np.int32)
    return out


def save_checkpoint(path, net: Network) -> None:
    tensors = checkpoint_tensors(net)
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        code = 1 if np.issubdtype(arr.dtype, np.integer) else 0
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<BB", code, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_checkpoint_tensors(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r} at offset 0")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _DTYPES[code]
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(size * dt.itemsize), dtype=dt).reshape(dims).copy()
    return tensors


def load_checkpoint(path) -> Network:
    t = read_checkpoint_tensors(path)
    try:
        cfg = EncoderConfig(*(int(v) for v in t["meta.config"]))
        params, stats = {}, {}
        for name in ("b1", "b2", "b3", "b4"):
            for part in ("kernel", "bias", "gamma", "beta"):
                params[f"enc.{name}.{part}"] = t[f"enc.{name}.{part}"]
            stats[name] = tc.RunningStats(t[f"enc.{name}.running_mean"],
                                          t[f"enc.{name}.running_var"])
        enc = Encoder(cfg, params, stats)
        ident = Head("id", t["id.weight"], t["id.bias"])
        adv = Head("adv", t["adv.weight"], t["adv.bias"]) if "adv.weight" in t else None
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing tensor {exc}") from None
    for name, (kshape, *_) in cfg.blocks().items():
        if params[f"enc.{name}.kernel"].shape != kshape:
            raise CheckpointError(f"{path}: enc.{name}.kernel has wrong shape")
    return Network(enc, ident, adv, tuple(int(s) for s in t["meta.session_map"]))
