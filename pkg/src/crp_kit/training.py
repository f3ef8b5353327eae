"""Two-stage training (DSM, then CRP fine-tuning) and the predictive baseline.

All losses are squared L2 norms over real and imaginary parts, summed over
the grid and averaged over the batch.  Training is driven by a single
``numpy.random.Generator`` seeded from the config, so every run is
bit-reproducible.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .network import (AdamState, Checkpoint, EmaState, ScoreNetwork, adam_step, ema_update,
                      warmup_decay)
from .sampler import PRINTED, Schedule, build_schedule, em_step, solve_reverse
from .sde import BbedParams, broadcast_time, prior_from_noise, sample_forward, standard_normal_like

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


class GuardError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    stage: str = "dsm"
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-3
    lr_schedule: str = "constant"
    weight_decay: float = 1e-6
    ema_decay: float = 0.999
    ema_warmup: bool = True
    widths: tuple = (128, 128, 128)
    time_embed_dim: int = 2
    precondition: bool = True
    skip: bool = True
    data_scale: float | None = None
    crp_n_steps: int = 1
    crp_stochastic_rollout: bool = True
    resume_adam: bool = False
    convention: str = PRINTED
    validation_every: int = 50
    n_valid: int = 10
    seed: int = 0

    def validate(self):
        if self.stage not in ("dsm", "crp", "predictive"):
            raise ConfigError(f"stage must be dsm, crp or predictive, got {self.stage!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be constant or cosine, got {self.lr_schedule!r}")
        if self.validation_every < 1:
            raise ConfigError("validation_every must be at least 1")


def as_arrays(data):
    """Accept ``(x0, y)`` arrays or a sequence of ``(x0, y)`` pairs."""
    if isinstance(data, tuple) and len(data) == 2 and np.ndim(data[0]) == 3:
        x0, y = data
    else:
        data = list(data)
        if not data:
            raise ConfigError("training data is empty")
        x0 = np.stack([np.asarray(getattr(a, "values", a)) for a, _ in data])
        y = np.stack([np.asarray(getattr(b, "values", b)) for _, b in data])
    x0, y = np.asarray(x0, dtype=np.complex128), np.asarray(y, dtype=np.complex128)
    if len(x0) == 0:
        raise ConfigError("training data is empty")
    if x0.shape != y.shape:
        raise ConfigError(f"clean/noisy shapes differ: {x0.shape} vs {y.shape}")
    return x0, y


def estimate_data_scale(x0, y) -> float:
    """RMS modulus of ``X_0 - Y`` per grid entry, used as the network's ``D``."""
    d = np.asarray(x0) - np.asarray(y)
    scale = float(np.sqrt(np.mean(np.abs(d) ** 2)))
    return scale if scale > 0 else 1.0


def new_score_network(n_bins, cfg: TrainConfig, p=BbedParams(), data_scale=None,
                      time_conditioned=True) -> ScoreNetwork:
    d = cfg.data_scale if cfg.data_scale is not None else data_scale
    return ScoreNetwork.create(n_bins, np.random.default_rng([cfg.seed, 0]),
                               widths=cfg.widths, time_embed_dim=cfg.time_embed_dim,
                               time_conditioned=time_conditioned,
                               precondition=cfg.precondition, data_scale=d or 0.5, sde=p,
                               skip=cfg.skip)


def _batch_size_of(x):
    x = np.asarray(x)
    return x.shape[0] if x.ndim == 3 else 1


# --------------------------------------------------------------------------
# losses

def dsm_loss(net, x0, y, t, rng, tape=None, p=BbedParams()):
    """``|s(X_t, Y, t) + Z / sigma(t)|^2`` for one draw of (X_t, Z)."""
    sigma = np.asarray(p.sigma(t))
    if np.any(sigma < 1e-12):
        raise GuardError(f"sigma(t) below 1e-12 at t={t}")
    xt, z = sample_forward(x0, y, t, rng, p)
    target = -z / broadcast_time(sigma, z)
    w = 1.0 / _batch_size_of(x0)
    if tape is None:
        return float(w * np.sum(np.abs(net(xt, y, t) - target) ** 2))
    s = net.forward(xt, y, t, tape=tape)
    return ad.sum_squares(ad.add(s, -ad.pack_complex(target)), w)


def crp_loss(x_tilde_0, x0):
    """``|X~_0 - X_0|^2``, batch-averaged.  Records on the tape if given a Var."""
    x0 = np.asarray(x0)
    w = 1.0 / _batch_size_of(x0)
    if isinstance(x_tilde_0, ad.Var):
        if x_tilde_0.shape != ad.pack_complex(x0).shape:
            raise ValueError("shape mismatch between estimate and target")
        return ad.sum_squares(ad.add(x_tilde_0, -ad.pack_complex(x0)), w)
    x_tilde_0 = np.asarray(x_tilde_0)
    if x_tilde_0.shape != x0.shape:
        raise ValueError(f"shape mismatch: {x_tilde_0.shape} vs {x0.shape}")
    return float(w * np.sum(np.abs(x_tilde_0 - x0) ** 2))


def crp_rollout(y, net: ScoreNetwork, sched: Schedule, p=BbedParams(), rng=None,
                stochastic=True, convention=PRINTED):
    """Run the reverse process; only the final score call is recorded.

    Returns ``(x_tilde_0, tape)`` where ``x_tilde_0`` is a real-packed Var.
    """
    y = np.asarray(y)
    x = prior_from_noise(y, sched.t_start, p, standard_normal_like(rng, y))
    steps = sched.steps()
    for t_hi, t_lo in steps[:-1]:
        x = em_step(x, y, t_hi, t_lo, net, rng, add_noise=stochastic, sde=p,
                    convention=convention)
    tape = Tape(net.n_params)
    t_hi, t_lo = steps[-1]
    out = em_step(x, y, t_hi, t_lo, net, rng, add_noise=False, tape=tape, sde=p,
                  convention=convention)
    return out, tape


# --------------------------------------------------------------------------
# training loops

@dataclass
class _Best:
    metric: float = np.inf
    theta: np.ndarray | None = None
    shadow: np.ndarray | None = None
    adam: AdamState | None = None
    step: int = 0


def _split_valid(x0, y, valid, n_valid, seed):
    if valid is not None:
        vx0, vy = as_arrays(valid)
        return vx0[:n_valid], vy[:n_valid]
    idx = np.random.default_rng([seed, 7]).permutation(len(x0))[:min(n_valid, len(x0))]
    return x0[idx], y[idx]


def _batches(rng, n, batch_size):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def _log_row(rows, step, epoch, stage, loss, val, theta, shadow):
    if rows is None:
        return
    gap = float(np.sqrt(np.mean((theta - shadow) ** 2))) if shadow is not None else 0.0
    rows.append({"step": step, "epoch": epoch, "stage": stage, "loss": loss,
                 "val_metric": val, "ema_gap": gap})


def _run(stage, x0, y, cfg: TrainConfig, net: ScoreNetwork, p, loss_fn, val_fn,
         adam: AdamState, use_ema: bool, rows, extra_meta):
    rng = np.random.default_rng([cfg.seed, 1])
    ema = EmaState(net.theta.copy(), cfg.ema_decay) if use_ema else None
    eval_theta = (lambda: ema.shadow) if use_ema else (lambda: net.theta)
    best = _Best()

    def validate(step):
        metric = float(val_fn(net.with_theta(eval_theta())))
        if metric < best.metric:
            best.metric, best.step = metric, step
            best.theta = net.theta.copy()
            best.shadow = None if ema is None else ema.shadow.copy()
            best.adam = AdamState(adam.m.copy(), adam.v.copy(), adam.step, cfg.lr,
                                  adam.weight_decay, adam.beta1, adam.beta2, adam.eps_adam)
        return metric

    total = cfg.epochs * len(_batches(np.random.default_rng(0), len(x0), cfg.batch_size))
    base_lr = adam.lr
    step = 0
    val = validate(step)
    _log_row(rows, step, 0, stage, float("nan"), val, net.theta, eval_theta())
    for epoch in range(1, cfg.epochs + 1):
        for idx in _batches(rng, len(x0), cfg.batch_size):
            adam.lr = _lr_at(cfg, base_lr, step, total)
            tape = Tape(net.n_params)
            loss = loss_fn(net, x0[idx], y[idx], rng, tape)
            grad = ad.backward(loss.tape if isinstance(loss, ad.Var) else tape)
            net.theta = adam_step(net.theta, grad, adam)
            step += 1
            if ema is not None:
                ema_update(ema, net.theta, _decay(cfg, step))
            val = validate(step) if step % cfg.validation_every == 0 else None
            _log_row(rows, step, epoch, stage, float(np.asarray(ad.value(loss))), val,
                     net.theta, eval_theta())
    if step % cfg.validation_every:
        val = validate(step)
        if rows:
            rows[-1]["val_metric"] = val
    log.info("%s: best validation %.6g at step %d of %d", stage, best.metric, best.step, step)

    out_net = net.with_theta(best.theta)
    out_ema = None if ema is None else EmaState(best.shadow, cfg.ema_decay)
    meta = {"best_step": best.step, "best_val": best.metric, "steps": step,
            "config": _config_dict(cfg), **extra_meta}
    return Checkpoint(stage, out_net, out_ema, best.adam, None, asdict(p), meta)


def _lr_at(cfg, base_lr, step, total):
    if cfg.lr_schedule == "cosine" and total > 0:
        return base_lr * 0.5 * (1.0 + np.cos(np.pi * step / total))
    return base_lr


def _decay(cfg, step):
    return warmup_decay(cfg.ema_decay, step) if cfg.ema_warmup else cfg.ema_decay


def _config_dict(cfg):
    d = asdict(cfg)
    d["widths"] = list(d["widths"])
    return d


def _new_adam(n, cfg):
    return AdamState.zeros(n, lr=cfg.lr, weight_decay=cfg.weight_decay)


def train_dsm(data, cfg: TrainConfig, valid=None, p=BbedParams(), net=None, rows=None,
              val_fn=None) -> Checkpoint:
    """Stage 1: denoising score matching, t ~ U[t_eps, T] per sample."""
    cfg.validate()
    if cfg.stage != "dsm":
        raise ConfigError("train_dsm needs cfg.stage == 'dsm'")
    x0, y = as_arrays(data)
    if net is None:
        net = new_score_network(x0.shape[-1], cfg, p, estimate_data_scale(x0, y))
    vx0, vy = _split_valid(x0, y, valid, cfg.n_valid, cfg.seed)

    def loss_fn(net, bx0, by, rng, tape):
        t = rng.uniform(p.t_eps, p.T, size=len(bx0))
        return dsm_loss(net, bx0, by, t, rng, tape, p)

    if val_fn is None:
        def val_fn(eval_net):
            vrng = np.random.default_rng([cfg.seed, 2])
            t = vrng.uniform(p.t_eps, p.T, size=len(vx0))
            return dsm_loss(eval_net, vx0, vy, t, vrng, None, p)

    return _run("dsm", x0, y, cfg, net, p, loss_fn, val_fn,
                _new_adam(net.n_params, cfg), True, rows, {})


def enhance(net, y, sched: Schedule, p=BbedParams(), seed=0, convention=PRINTED,
            mode="em", corrector=None):
    return solve_reverse(y, net, sched, p, np.random.default_rng(seed), mode=mode,
                         corrector=corrector, convention=convention).estimate


def train_crp(data, cfg: TrainConfig, stage1: Checkpoint | None, valid=None,
              p=BbedParams(), rows=None) -> Checkpoint:
    """Stage 2: fine-tune on |X~_0 - X_0|^2 through the last score call only."""
    cfg.validate()
    if cfg.stage != "crp":
        raise ConfigError("train_crp needs cfg.stage == 'crp'")
    if stage1 is None:
        raise ad.UsageError("CRP fine-tuning needs a stage-1 (dsm) checkpoint")
    if stage1.stage != "dsm":
        raise ad.UsageError(f"CRP starts from a dsm checkpoint, got {stage1.stage!r}")
    x0, y = as_arrays(data)
    net = stage1.eval_net()
    if cfg.resume_adam and stage1.adam is not None:
        a = stage1.adam
        adam = AdamState(a.m.copy(), a.v.copy(), a.step, cfg.lr, cfg.weight_decay,
                         a.beta1, a.beta2, a.eps_adam)
    else:
        adam = _new_adam(net.n_params, cfg)
    sched = build_schedule(p.t_rsp, p.t_eps, cfg.crp_n_steps)
    vx0, vy = _split_valid(x0, y, valid, cfg.n_valid, cfg.seed)

    def loss_fn(net, bx0, by, rng, tape):
        out, rollout_tape = crp_rollout(by, net, sched, p, rng, cfg.crp_stochastic_rollout,
                                        cfg.convention)
        return crp_loss(out, bx0)

    def val_fn(eval_net):
        est = enhance(eval_net, vy, sched, p, seed=[cfg.seed, 3], convention=cfg.convention)
        return crp_loss(est, vx0) / np.prod(vx0.shape[1:])

    ck = _run("crp", x0, y, cfg, net, p, loss_fn, val_fn, adam, True, rows,
              {"schedule_digest": sched.digest(), "n_steps": sched.n_steps})
    ck.schedule = list(sched.times)
    return ck


def train_predictive(data, cfg: TrainConfig, valid=None, p=BbedParams(), rows=None) -> Checkpoint:
    """Direct Y -> X_0 regression with the time-unconditioned network, no EMA."""
    cfg.validate()
    if cfg.stage != "predictive":
        raise ConfigError("train_predictive needs cfg.stage == 'predictive'")
    x0, y = as_arrays(data)
    net = new_score_network(x0.shape[-1], cfg, p, time_conditioned=False)
    vx0, vy = _split_valid(x0, y, valid, cfg.n_valid, cfg.seed)

    def loss_fn(net, bx0, by, rng, tape):
        return crp_loss(net.forward(by, by, None, tape=tape), bx0)

    def val_fn(eval_net):
        return crp_loss(eval_net(vy, vy), vx0) / np.prod(vx0.shape[1:])

    return _run("predictive", x0, y, cfg, net, p, loss_fn, val_fn,
                _new_adam(net.n_params, cfg), False, rows, {})


def predict(net: ScoreNetwork, y):
    return net(y, y, None)


# --------------------------------------------------------------------------
# analytic toy task

@dataclass
class GaussianToyTask:
    """X_0 ~ N_C(m, gamma^2 I) with a fixed conditioning grid y."""

    m: np.ndarray
    gamma: float
    y: np.ndarray = field(default=None)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        self.m = np.asarray(self.m, dtype=np.complex128)
        self.y = np.asarray(self.y if self.y is not None else np.zeros_like(self.m),
                            dtype=np.complex128)

    def sample_x0(self, rng, n):
        return self.m + self.gamma * standard_normal_like(rng, np.zeros((n,) + self.m.shape, complex))

    def marginal(self, t, p=BbedParams()):
        mean = p.kernel_mean(np.broadcast_to(self.m, np.shape(t) + self.m.shape),
                             np.broadcast_to(self.y, np.shape(t) + self.m.shape), t)
        var = (1 - np.asarray(t)) ** 2 * self.gamma ** 2 + p.kernel_sigma_sq(t)
        return mean, var

    def sample_xt(self, rng, t, p=BbedParams()):
        mean, var = self.marginal(t, p)
        return mean + broadcast_time(np.sqrt(var), mean) * standard_normal_like(rng, mean)


def analytic_score(task: GaussianToyTask, xt, t, p=BbedParams()):
    """Exact score of the toy marginal: ``-(x - mean_t) / var_t``."""
    mean, var = task.marginal(t, p)
    return -(np.asarray(xt) - mean) / broadcast_time(var, mean)


def relative_score_error(net, task: GaussianToyTask, rng, n=256, p=BbedParams()):
    """Mean over held-out (t, X_t) of |s_net - s| / |s|."""
    t = rng.uniform(p.t_eps, p.T, size=n)
    xt = task.sample_xt(rng, t, p)
    y = np.broadcast_to(task.y, xt.shape)
    truth = analytic_score(task, xt, t, p)
    est = net(xt, y, t)
    axes = tuple(range(1, xt.ndim))
    return float(np.mean(np.sqrt(np.sum(np.abs(est - truth) ** 2, axis=axes)
                                 / np.sum(np.abs(truth) ** 2, axis=axes))))


def train_toy_dsm(task: GaussianToyTask, cfg: TrainConfig, steps: int, p=BbedParams(),
                  rows=None, n_eval=256) -> Checkpoint:
    """DSM on fresh draws from the toy prior; validates by relative score error."""
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, 1])
    y1 = task.y if task.y.ndim == 2 else task.y[None]
    data_scale = float(np.sqrt(np.mean(np.abs(task.m - task.y) ** 2) + task.gamma ** 2))
    net = new_score_network(task.m.shape[-1], cfg, p, data_scale)
    adam = _new_adam(net.n_params, cfg)
    ema = EmaState(net.theta.copy(), cfg.ema_decay)
    best = _Best()
    for step in range(1, steps + 1):
        x0 = task.sample_x0(rng, cfg.batch_size)
        y = np.broadcast_to(y1, x0.shape)
        t = rng.uniform(p.t_eps, p.T, size=cfg.batch_size)
        tape = Tape(net.n_params)
        loss = dsm_loss(net, x0, y, t, rng, tape, p)
        net.theta = adam_step(net.theta, ad.backward(tape), adam)
        ema_update(ema, net.theta, _decay(cfg, step))
        val = None
        if step % cfg.validation_every == 0 or step == steps:
            val = relative_score_error(net.with_theta(ema.shadow), task,
                                       np.random.default_rng([cfg.seed, 4]), n_eval, p)
            if val < best.metric:
                best.metric, best.step = val, step
                best.theta, best.shadow = net.theta.copy(), ema.shadow.copy()
        _log_row(rows, step, 1, "dsm", float(loss.value), val, net.theta, ema.shadow)
    return Checkpoint("dsm", net.with_theta(best.theta), EmaState(best.shadow, cfg.ema_decay),
                      None, None, asdict(p), {"best_step": best.step, "best_val": best.metric,
                                              "steps": steps, "config": _config_dict(cfg)})
