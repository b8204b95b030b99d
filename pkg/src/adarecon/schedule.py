"""Noise schedule and the closed-form DDIM relations.

Every function here works on NumPy arrays and torch tensors alike: the
schedule coefficients are plain Python floats, so arithmetic keeps the dtype
and device of the image argument.

    x_t      = sqrt(abar_t) * x_0 + sqrt(1 - abar_t) * eps
    x_{t->0} = (x_t - sqrt(1 - abar_t) * eps_pred) / sqrt(abar_t)
    x_{t'}   = sqrt(abar_{t'}) * x_{t->0} + sqrt(1 - abar_{t'}) * eps_pred
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "NoiseSchedule",
    "ScheduleError",
    "make_schedule",
    "subsample_schedule",
    "default_schedule",
    "diffuse",
    "predict_x0",
    "ddim_step",
]


class ScheduleError(ValueError):
    """Invalid schedule parameters or out-of-range step indices."""


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable cumulative noise schedule.

    ``alpha_bar`` has ``t_max + 1`` entries, indexed by step; ``alpha_bar[0]``
    is exactly 1 so step 0 is the identity. ``beta[t - 1]`` is the variance of
    step ``t``.
    """

    t_max: int
    alpha_bar: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02
    base_steps: int | None = None

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        b = np.asarray(self.beta, dtype=np.float64)
        if ab.shape != (self.t_max + 1,) or b.shape != (self.t_max,):
            raise ScheduleError("alpha_bar/beta lengths do not match t_max")
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0) or ab[-1] <= 0:
            raise ScheduleError("alpha_bar must be strictly decreasing and positive")
        ab.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "alpha_bar", ab)
        object.__setattr__(self, "beta", b)

    def abar(self, t: int) -> float:
        return float(self.alpha_bar[self.check_step(t)])

    def check_step(self, t, low: int = 0) -> int:
        if isinstance(t, (bool, np.bool_)) or int(t) != t:
            raise ScheduleError(f"step index must be an integer, got {t!r}")
        t = int(t)
        if not low <= t <= self.t_max:
            raise ScheduleError(f"step {t} outside [{low}, {self.t_max}]")
        return t

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "t_max": self.t_max,
            "beta_start": self.beta_start,
            "beta_end": self.beta_end,
            "base_steps": self.base_steps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        base = d.get("base_steps")
        if base:
            full = make_schedule(d["kind"], base, d["beta_start"], d["beta_end"])
            return subsample_schedule(full, d["t_max"])
        return make_schedule(d["kind"], d["t_max"], d["beta_start"], d["beta_end"])


def _from_betas(betas: np.ndarray, **meta) -> NoiseSchedule:
    alpha_bar = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    return NoiseSchedule(t_max=len(betas), alpha_bar=alpha_bar, beta=betas, **meta)


def make_schedule(kind: str = "linear", t_max: int = 1000,
                  beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Build a schedule of ``t_max`` steps.

    ``linear`` spaces beta evenly from ``beta_start`` to ``beta_end``.
    ``cosine`` uses the squared-cosine cumulative profile (offset 0.008, betas
    capped at 0.999); the beta bounds are validated but do not shape it.
    """
    if isinstance(t_max, bool) or int(t_max) != t_max or t_max < 1:
        raise ScheduleError(f"t_max must be an integer >= 1, got {t_max!r}")
    t_max = int(t_max)
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(t_max + 1, dtype=np.float64)
        f = np.cos((steps / t_max + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 1e-12, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    return _from_betas(betas, kind=kind, beta_start=float(beta_start),
                       beta_end=float(beta_end))


def subsample_schedule(schedule: NoiseSchedule, t_max: int) -> NoiseSchedule:
    """Keep ``t_max`` evenly spaced steps of a finer schedule.

    Step ``k`` of the result carries ``alpha_bar`` of step
    ``round(k * T / t_max)`` of the source; betas are re-derived so the
    cumulative-product relation still holds.
    """
    if t_max < 1 or t_max > schedule.t_max:
        raise ScheduleError(f"cannot subsample {schedule.t_max} steps to {t_max}")
    if t_max == schedule.t_max:
        return schedule
    idx = np.round(np.arange(1, t_max + 1) * schedule.t_max / t_max).astype(int)
    ab = np.concatenate([[1.0], schedule.alpha_bar[idx]])
    betas = 1.0 - ab[1:] / ab[:-1]
    return _from_betas(betas, kind=schedule.kind, beta_start=schedule.beta_start,
                       beta_end=schedule.beta_end, base_steps=schedule.t_max)


def default_schedule(t_max: int = 1000) -> NoiseSchedule:
    """Linear 1e-4..0.02 over 1000 steps, subsampled to ``t_max``."""
    return subsample_schedule(make_schedule("linear", 1000, 1e-4, 0.02), t_max)


def _check_same_shape(a, b, what: str):
    if tuple(a.shape) != tuple(b.shape):
        raise ScheduleError(f"{what} shape {tuple(b.shape)} != {tuple(a.shape)}")


def diffuse(x0, t: int, eps, schedule: NoiseSchedule):
    """Noise a clean image straight to step ``t``."""
    _check_same_shape(x0, eps, "noise")
    ab = schedule.abar(t)
    if ab == 1.0:
        return x0 * 1.0
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, t: int, eps_pred, schedule: NoiseSchedule):
    """Clean estimate implied by ``x_t`` and the predicted noise."""
    _check_same_shape(x_t, eps_pred, "predicted noise")
    ab = float(schedule.alpha_bar[schedule.check_step(t, low=1)])
    return (x_t - math.sqrt(1.0 - ab) * eps_pred) / math.sqrt(ab)


def ddim_step(x_t, t: int, t_prev: int, eps_pred, schedule: NoiseSchedule):
    """Deterministic (eta = 0) DDIM update from ``t`` to ``t_prev < t``."""
    t = schedule.check_step(t, low=1)
    t_prev = schedule.check_step(t_prev)
    if t_prev >= t:
        raise ScheduleError(f"t_prev={t_prev} must be smaller than t={t}")
    ab_prev = float(schedule.alpha_bar[t_prev])
    x0 = predict_x0(x_t, t, eps_pred, schedule)
    if t_prev == 0:
        return x0
    return math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps_pred
