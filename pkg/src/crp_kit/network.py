"""Score network, Adam, EMA and checkpoint files.

The network is a frame-wise MLP: each STFT frame of ``X_t`` and ``Y``
(real and imaginary parts stacked, ``4 * n_bins`` features) is mapped to
one complex output frame.  A sinusoidal embedding of ``t`` is concatenated
to the first layer input when ``time_conditioned`` is set.

Time-conditioned networks are preconditioned by default.  With
``v(t)^2 = sigma(t)^2 + (1 - t)^2 D^2`` (``D`` the spread of ``X_0 - Y``)
the MLP sees ``u = (X_t - Y) / v`` in place of ``X_t`` and the score is
``(F - g(t) u) / v``; ``F = 0`` and ``g = 1`` give the exact score for
Gaussian ``X_0 - Y`` of spread ``D``, and the MLP only learns the residual.
The gain ``g(t) = 1 + a_0 + a . emb(t)`` starts at 1 and is learned.
"""
from __future__ import annotations

import base64
import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, Tape
from .sde import BbedParams, broadcast_time

CHECKPOINT_VERSION = 1
STAGES = ("dsm", "crp", "predictive")


class ConfigError(ValueError):
    pass


def time_embedding(t, dim: int, f_max: float = 1000.0) -> np.ndarray:
    """``[sin(2 pi f_j t), cos(2 pi f_j t)]`` for dim/2 log-spaced f_j in [1, f_max]."""
    if dim <= 0 or dim % 2:
        raise ConfigError(f"time embedding dimension must be even and positive, got {dim}")
    freqs = np.geomspace(1.0, f_max, dim // 2)
    arg = 2 * np.pi * np.asarray(t, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


@dataclass
class ScoreNetwork:
    n_bins: int
    widths: tuple = (128, 128, 128)
    time_embed_dim: int = 2
    time_conditioned: bool = True
    theta: np.ndarray | None = None
    layout: list = field(default_factory=list)
    precondition: bool = True
    data_scale: float = 0.5
    sde: BbedParams = BbedParams()
    skip: bool = True

    def __post_init__(self):
        if isinstance(self.sde, dict):
            self.sde = BbedParams(**self.sde)
        if not self.data_scale > 0:
            raise ConfigError("data_scale must be positive")
        self.widths = tuple(int(w) for w in self.widths)
        if self.time_conditioned and (self.time_embed_dim <= 0 or self.time_embed_dim % 2):
            raise ConfigError("time_embed_dim must be even and positive")
        sizes = [self.input_dim, *self.widths, 2 * self.n_bins]
        layout, off = [], 0
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            layout.append((f"w{i}", (a, b), off))
            off += a * b
            layout.append((f"b{i}", (b,), off))
            off += b
        if self.has_gain:
            layout.append(("gain", (self.time_embed_dim + 1,), off))
            off += self.time_embed_dim + 1
        self.layout = layout
        if self.theta is None:
            self.theta = np.zeros(off)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (off,):
            raise ConfigError(f"theta has length {self.theta.size}, layout needs {off}")

    @property
    def input_dim(self) -> int:
        return 4 * self.n_bins + (self.time_embed_dim if self.time_conditioned else 0)

    @property
    def n_params(self) -> int:
        return self.theta.size

    @classmethod
    def create(cls, n_bins, rng: np.random.Generator, **kw) -> "ScoreNetwork":
        """Xavier-uniform hidden layers, zero output layer (initial score is 0)."""
        net = cls(n_bins, **kw)
        n_layers = len(net.widths) + 1
        for name, shape, off in net.layout:
            if name[0] == "w" and int(name[1:]) < n_layers - 1:
                lim = math.sqrt(6.0 / (shape[0] + shape[1]))
                net.theta[off:off + shape[0] * shape[1]] = rng.uniform(-lim, lim, shape[0] * shape[1])
        return net

    @property
    def preconditioned(self) -> bool:
        return self.precondition and self.time_conditioned

    @property
    def has_gain(self) -> bool:
        return self.preconditioned and self.skip

    def with_theta(self, theta) -> "ScoreNetwork":
        return ScoreNetwork(self.n_bins, self.widths, self.time_embed_dim,
                            self.time_conditioned, np.array(theta, dtype=np.float64),
                            precondition=self.precondition, data_scale=self.data_scale,
                            sde=self.sde, skip=self.skip)

    def scale(self, t) -> np.ndarray:
        """``v(t)``; sigma is floored at ``sigma(t_eps)`` to keep the scale bounded."""
        t = np.asarray(t, dtype=np.float64)
        s2 = self.sde.kernel_sigma_sq(np.maximum(t, self.sde.t_eps))
        return np.sqrt(s2 + ((1.0 - t) * self.data_scale) ** 2)

    def _param(self, tape, name, shape, off):
        if tape is None:
            return self.theta[off:off + math.prod(shape)].reshape(shape)
        return tape.param(self.theta, off, shape)

    def features(self, xt, y, t):
        xt, y = np.asarray(xt), np.asarray(y)
        if xt.shape != y.shape:
            raise ValueError(f"shape mismatch: {xt.shape} vs {y.shape}")
        if xt.shape[-1] != self.n_bins:
            raise ValueError(f"expected {self.n_bins} bins, got {xt.shape[-1]}")
        if not (np.all(np.isfinite(xt)) and np.all(np.isfinite(y))):
            raise NumericError("non-finite network input")
        feats = [xt.real, xt.imag, y.real, y.imag]
        if self.time_conditioned:
            emb = time_embedding(t, self.time_embed_dim)
            t_ndim = np.ndim(t)
            # per-sample times (B,) -> (B, 1, E); scalar t -> (E,)
            emb = emb.reshape(emb.shape[:t_ndim] + (1,) * (xt.ndim - 1 - t_ndim) + emb.shape[-1:])
            feats.append(np.broadcast_to(emb, xt.shape[:-1] + emb.shape[-1:]))
        return np.concatenate(feats, axis=-1)

    def forward(self, xt, y, t=None, tape: Tape | None = None):
        """Score estimate for ``(X_t, Y, t)``.

        Without a tape the result is a complex grid shaped like ``xt``.  With
        a tape the computation is recorded and a :class:`~crp_kit.autodiff.Var`
        holding the real-packed output ``(..., 2 * n_bins)`` is returned.
        """
        if tape is not None and tape.n_params != self.n_params:
            raise ad.UsageError("tape parameter count does not match the network")
        if self.preconditioned:
            if t is None:
                raise ValueError("a time-conditioned network needs t")
            xt, y = np.asarray(xt), np.asarray(y)
            v = broadcast_time(self.scale(t), xt)
            u = (xt - y) / v
            h = self._mlp(u, y, t, tape)
            if tape is None:
                out = ad.unpack_complex(h)
                if self.skip:
                    out = out - (1.0 + self._gain(t, xt, None)) * u
                return out / v
            if self.skip:
                pu = ad.pack_complex(u)
                h = ad.add(h, -pu)
                h = ad.add(h, ad.scale(self._gain(t, xt, tape), -pu))
            return ad.scale(h, 1.0 / v)
        h = self._mlp(xt, y, t, tape)
        return h if tape is not None else ad.unpack_complex(h)

    __call__ = forward

    def _gain(self, t, xt, tape):
        """``g(t) - 1`` shaped to broadcast against ``xt`` (one value per sample)."""
        emb = time_embedding(t, self.time_embed_dim)
        feats = np.concatenate([np.ones(emb.shape[:-1] + (1,)), emb], axis=-1)
        t_ndim = np.ndim(t)
        feats = feats.reshape(feats.shape[:t_ndim] + (1,) * (xt.ndim - 1 - t_ndim) + feats.shape[-1:])
        _, shape, off = self.layout[-1]
        return ad.linear(feats, self._param(tape, "gain", (shape[0], 1), off), np.zeros(1))

    def _mlp(self, xt, y, t, tape):
        h = self.features(xt, y, t)
        layers = self.layout
        n_layers = len(self.widths) + 1
        for i in range(n_layers):
            (_, ws, wo), (_, bs, bo) = layers[2 * i], layers[2 * i + 1]
            h = ad.linear(h, self._param(tape, "w", ws, wo), self._param(tape, "b", bs, bo))
            if i < n_layers - 1:
                h = ad.gelu(h)
        return h

    def to_dict(self) -> dict:
        return {"n_bins": self.n_bins, "widths": list(self.widths),
                "time_embed_dim": self.time_embed_dim,
                "time_conditioned": self.time_conditioned,
                "precondition": self.precondition, "data_scale": self.data_scale,
                "sde": asdict(self.sde), "skip": self.skip, "theta": encode_array(self.theta)}

    @classmethod
    def from_dict(cls, d) -> "ScoreNetwork":
        return cls(d["n_bins"], tuple(d["widths"]), d["time_embed_dim"],
                   d["time_conditioned"], decode_array(d["theta"]),
                   precondition=d["precondition"], data_scale=d["data_scale"],
                   sde=BbedParams(**d["sde"]), skip=d["skip"])


# --------------------------------------------------------------------------
# optimiser and EMA

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)


def adam_step(theta, grad, state: AdamState) -> np.ndarray:
    """One Adam update with bias correction and decoupled weight decay.

    ``state`` is updated in place; the new parameter vector is returned.
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError(f"gradient shape {grad.shape} != parameter shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite gradient; update rejected")
    b1, b2 = state.beta1, state.beta2
    m = b1 * state.m + (1 - b1) * grad
    v = b2 * state.v + (1 - b2) * grad * grad
    step = state.step + 1
    m_hat = m / (1 - b1 ** step)
    v_hat = v / (1 - b2 ** step)
    new = theta - state.lr * m_hat / (np.sqrt(v_hat) + state.eps_adam) \
        - state.lr * state.weight_decay * theta
    state.m, state.v, state.step = m, v, step
    return new


@dataclass
class EmaState:
    shadow: np.ndarray
    decay: float = 0.999


def ema_update(ema: EmaState, theta, decay: float | None = None) -> np.ndarray:
    """``shadow <- decay * shadow + (1 - decay) * theta``; ``decay`` overrides ``ema.decay``.

    Evaluated as ``shadow + (1 - decay) * (theta - shadow)`` so a shadow equal
    to ``theta`` stays bit-identical.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != ema.shadow.shape:
        raise ValueError("EMA shadow and parameters differ in length")
    d = ema.decay if decay is None else decay
    ema.shadow = ema.shadow + (1.0 - d) * (theta - ema.shadow)
    return ema.shadow


def warmup_decay(decay: float, step: int) -> float:
    """``min(decay, (1 + step) / (10 + step))``: short runs are not dominated by the init."""
    return min(decay, (1.0 + step) / (10.0 + step))


# --------------------------------------------------------------------------
# checkpoints

def encode_array(a) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def decode_array(s) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").copy()


@dataclass
class Checkpoint:
    stage: str
    net: ScoreNetwork
    ema: EmaState | None = None
    adam: AdamState | None = None
    schedule: list | None = None
    bbed: dict | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown training stage {self.stage!r}")

    def eval_net(self) -> ScoreNetwork:
        """Weights used for sampling: EMA shadow when tracked, live weights otherwise."""
        return self.net if self.ema is None else self.net.with_theta(self.ema.shadow)

    def copy(self) -> "Checkpoint":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        d = {"version": CHECKPOINT_VERSION, "stage": self.stage, "net": self.net.to_dict(),
             "schedule": self.schedule, "bbed": self.bbed, "meta": self.meta,
             "ema": None, "adam": None}
        if self.ema is not None:
            d["ema"] = {"shadow": encode_array(self.ema.shadow), "decay": self.ema.decay}
        if self.adam is not None:
            a = self.adam
            d["adam"] = {"m": encode_array(a.m), "v": encode_array(a.v), "step": a.step,
                         "lr": a.lr, "weight_decay": a.weight_decay, "beta1": a.beta1,
                         "beta2": a.beta2, "eps_adam": a.eps_adam}
        return d

    @classmethod
    def from_dict(cls, d) -> "Checkpoint":
        if d.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"unsupported checkpoint version {d.get('version')!r}")
        ema = adam = None
        if d.get("ema"):
            ema = EmaState(decode_array(d["ema"]["shadow"]), d["ema"]["decay"])
        if d.get("adam"):
            a = dict(d["adam"])
            adam = AdamState(decode_array(a.pop("m")), decode_array(a.pop("v")), **a)
        return cls(d["stage"], ScoreNetwork.from_dict(d["net"]), ema, adam,
                   d.get("schedule"), d.get("bbed"), d.get("meta") or {})

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_dict(json.loads(Path(path).read_text()))
