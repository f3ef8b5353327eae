"""Reverse-process solvers: schedules, Euler-Maruyama steps, predictor-corrector."""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .sde import BbedParams, prior_from_noise, standard_normal_like

PRINTED = "printed"   # g and score at t_i (lower time), drift state at t_{i+1}
UPPER = "upper"       # everything at t_{i+1}
CONVENTIONS = (PRINTED, UPPER)


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    times: tuple

    def __post_init__(self):
        times = tuple(float(t) for t in self.times)
        object.__setattr__(self, "times", times)
        if len(times) < 2 or times[-1] != 0.0:
            raise ScheduleError("schedule must end at exactly 0 and contain a step")
        if any(a <= b for a, b in zip(times[:-1], times[1:])):
            raise ScheduleError("schedule times must be strictly decreasing")

    @property
    def n_steps(self) -> int:
        return len(self.times) - 1

    @property
    def t_start(self) -> float:
        return self.times[0]

    def steps(self):
        return list(zip(self.times[:-1], self.times[1:]))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.times).encode()).hexdigest()[:16]


def build_schedule(t_rsp: float, t_eps: float, n_steps: int) -> Schedule:
    """Uniform grid from t_rsp down to t_eps (n_steps points), then a final step to 0.

    A single step goes from t_rsp straight to 0.
    """
    if n_steps < 1:
        raise ScheduleError("n_steps must be at least 1")
    if not 0 < t_eps < t_rsp:
        raise ScheduleError(f"need 0 < t_eps < t_rsp, got t_eps={t_eps}, t_rsp={t_rsp}")
    if n_steps == 1:
        return Schedule((t_rsp, 0.0))
    return Schedule(tuple(np.linspace(t_rsp, t_eps, n_steps)) + (0.0,))


@dataclass
class CorrectorConfig:
    steps: int = 1
    snr: float = 0.5


@dataclass
class ReverseResult:
    estimate: np.ndarray
    nfe: int
    trajectory: list | None = None
    rng_draws: list | None = None


def _call_score(score, x, y, t, tape=None):
    if tape is None:
        return score(x, y, t)
    return score.forward(x, y, t, tape=tape)


def em_step(x, y, t_hi, t_lo, score, rng=None, add_noise=True, tape=None,
            sde=BbedParams(), convention=PRINTED, noise=None):
    """One reverse Euler-Maruyama step from ``t_hi`` to ``t_lo``.

    ``x - [f(x, y) - g^2 s(x, y, t_s)] dt + g sqrt(dt) Z`` where the drift
    uses the state's time ``t_hi``.  Under the printed convention ``g`` and
    the score time ``t_s`` are ``t_lo``; under ``"upper"`` both are ``t_hi``.
    With a tape the score call is recorded and the new state is returned as
    a real-packed :class:`~crp_kit.autodiff.Var`.
    """
    dt = t_hi - t_lo
    if not dt > 0:
        raise ScheduleError(f"reverse step needs t_hi > t_lo, got {t_hi} -> {t_lo}")
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown time convention {convention!r}")
    t_s = t_lo if convention == PRINTED else t_hi
    g = float(sde.diffusion(t_s))
    base = x - sde.drift(x, y, t_hi) * dt
    if add_noise:
        if noise is None:
            noise = standard_normal_like(rng, x)
        base = base + g * np.sqrt(dt) * noise
    s = _call_score(score, x, y, t_s, tape)
    if tape is None:
        return base + g * g * dt * s
    return ad.add(ad.scale(s, g * g * dt), ad.pack_complex(base))


def _batch_norm(a):
    a = np.asarray(a)
    if a.ndim <= 2:
        return np.sqrt(np.sum(np.abs(a) ** 2))
    return np.sqrt(np.sum(np.abs(a) ** 2, axis=(-2, -1), keepdims=True))


def langevin_correct(x, y, t, score, rng, snr=0.5, noise=None):
    """Annealed Langevin step ``x + eps s + sqrt(2 eps) Z``, eps = 2 (r |Z| / |s|)^2."""
    s = score(x, y, t)
    if noise is None:
        noise = standard_normal_like(rng, x)
    s_norm = _batch_norm(s)
    with np.errstate(divide="ignore", invalid="ignore"):
        eps = np.where(s_norm > 0, 2.0 * (snr * _batch_norm(noise) / s_norm) ** 2, 0.0)
    return x + eps * s + np.sqrt(2.0 * eps) * noise


def _summary(x):
    return float(np.mean(np.abs(x)))


def solve_reverse(y, score, sched: Schedule, p=BbedParams(), rng=None, mode="em",
                  corrector: CorrectorConfig | None = None, convention=PRINTED,
                  final_noise=False, keep_trajectory=False, record_draws=False,
                  replay=None, x_start=None) -> ReverseResult:
    """Enhance ``y`` by integrating the reverse SDE over ``sched``.

    Starts from ``sample_prior(y, t_N)`` (or ``x_start``), applies one
    predictor step per schedule interval and, in ``"pc"`` mode,
    ``corrector.steps`` Langevin corrections at the new time after each.
    Noise is injected on every predictor step except the one into t = 0
    unless ``final_noise`` is set.  ``replay`` feeds back ``rng_draws`` from
    an earlier call.
    """
    if mode not in ("em", "pc"):
        raise ValueError(f"unknown sampler mode {mode!r}")
    corrector = corrector or CorrectorConfig()
    n_corr = corrector.steps if mode == "pc" else 0
    draws = list(replay) if replay is not None else None
    recorded = [] if record_draws else None

    def draw(like):
        z = draws.pop(0) if draws is not None else standard_normal_like(rng, like)
        if recorded is not None:
            recorded.append(z)
        return z

    y = np.asarray(y)
    x = prior_from_noise(y, sched.t_start, p, draw(y)) if x_start is None else np.asarray(x_start)
    nfe = 0
    trajectory = [(0, sched.t_start, _summary(x), 0)] if keep_trajectory else None

    for i, (t_hi, t_lo) in enumerate(sched.steps(), start=1):
        add_noise = final_noise or t_lo > 0
        z = draw(x) if add_noise else None
        x = em_step(x, y, t_hi, t_lo, score, add_noise=add_noise, sde=p,
                    convention=convention, noise=z)
        nfe += 1
        for _ in range(n_corr):
            x = langevin_correct(x, y, t_lo, score, None, corrector.snr, noise=draw(x))
            nfe += 1
        if keep_trajectory:
            trajectory.append((i, t_lo, _summary(x), nfe))
        if not np.all(np.isfinite(x)):
            err = NumericError(f"non-finite reverse state after step {i} (t={t_lo})")
            err.trajectory = trajectory
            raise err
    return ReverseResult(x, nfe, trajectory, recorded)


def write_trajectory_csv(result: ReverseResult, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "t", "mean_abs_state", "nfe"])
        for row in result.trajectory or []:
            w.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])
