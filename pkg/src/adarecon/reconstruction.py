"""Per-sample adaptive denoising step search and mask-guided fusion.

The search pass noises the input to ``t_start`` and walks the DDIM sampler
down at a fixed stride. At each visited step it compares two clean
estimates: one from the generated trajectory (which drifts toward normal
data) and one from noising the input directly to that step (which keeps
whatever anomaly the input has). The first step where the two disagree by
more than ``delta`` becomes the restart step; the final pass restarts there
from a blend of both estimates, weighted by a soft anomaly mask.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from scipy.special import expit

from .features import FeatureExtractor, anomaly_map, extract_features, layer_anomaly_map
from .schedule import NoiseSchedule, ScheduleError, ddim_step, diffuse, predict_x0

__all__ = [
    "StepSearchConfig",
    "StepRecord",
    "ReconstructionTrace",
    "ReconstructionError",
    "step_difference",
    "adaptive_step_search",
    "build_mask",
    "saff_fuse",
    "reconstruct",
    "denoise_from",
    "search_grid",
]

log = logging.getLogger(__name__)


class ReconstructionError(RuntimeError):
    def __init__(self, message: str, trace: "ReconstructionTrace | None" = None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class StepSearchConfig:
    """Search and fusion settings.

    ``delta = 0`` stops at the first visited step and ``delta = inf`` never
    stops, falling back to ``t_min``. ``fixed_step`` bypasses the stopping
    rule and restarts from that step; with ``saff=False`` the restart uses
    the input noised directly to the restart step instead of the fused blend.
    """

    t_start: int = 750
    t_min: int = 350
    delta: float = 0.35
    n_extra: int = 0
    stride: int = 10
    diff_layer: int = 12
    diff_top_k: int = 10
    mask_sharpness: float = 4.0
    mask_sigma: float = 6.0
    saff: bool = True
    fixed_step: Optional[int] = None
    clip_estimates: bool = True

    def __post_init__(self):
        if not 0 <= self.t_min < self.t_start:
            raise ValueError(f"need 0 <= t_min < t_start, got t_min={self.t_min}, t_start={self.t_start}")
        if not self.delta >= 0:
            raise ValueError(f"delta must be >= 0, got {self.delta}")
        if self.stride < 1 or self.n_extra < 0 or self.diff_top_k < 1:
            raise ValueError("stride and diff_top_k must be >= 1, n_extra >= 0")
        if self.fixed_step is not None and not self.t_min <= self.fixed_step <= self.t_start:
            raise ValueError(f"fixed_step {self.fixed_step} outside [t_min, t_start]")
        if self.t_min < 1 and self.saff:
            raise ValueError("t_min must be >= 1 when fusion is enabled")

    def check(self, schedule: NoiseSchedule) -> None:
        if self.t_start > schedule.t_max:
            raise ScheduleError(f"t_start={self.t_start} exceeds schedule length {schedule.t_max}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["delta"] == float("inf"):
            d["delta"] = "inf"
        return d


@dataclass
class StepRecord:
    t: int
    generated_x0: np.ndarray = field(repr=False)
    direct_x0: np.ndarray = field(repr=False)
    difference: float


@dataclass
class ReconstructionTrace:
    records: list[StepRecord] = field(default_factory=list)
    detection_step: Optional[int] = None
    proper_step: Optional[int] = None
    mask: Optional[np.ndarray] = field(default=None, repr=False)
    step_map: Optional[np.ndarray] = field(default=None, repr=False)
    final: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def steps(self) -> list[int]:
        return [r.t for r in self.records]

    def record_at(self, t: int) -> StepRecord | None:
        for r in self.records:
            if r.t == t:
                return r
        return None


def search_grid(start: int, stop: int, stride: int) -> list[int]:
    """``start, start - stride, ...`` strictly above ``stop``, then ``stop``."""
    grid = list(range(start, stop, -stride))
    if not grid or grid[-1] != stop:
        grid.append(stop)
    return grid


def _top_mean(values: torch.Tensor, k: int) -> float:
    flat = values.reshape(-1)
    k = min(k, flat.numel())
    return float(torch.topk(flat, k).values.mean())


def step_difference(xhat_t0, x_t0, extractor: FeatureExtractor, cfg: StepSearchConfig) -> float:
    """Top-k mean of the symmetric min-cosine map at ``cfg.diff_layer``.

    The per-position map is the larger of the two directed maps, so the
    score does not depend on argument order.
    """
    if tuple(np.shape(xhat_t0)) != tuple(np.shape(x_t0)):
        raise ValueError(f"clean estimates differ in shape: {np.shape(xhat_t0)} vs {np.shape(x_t0)}")
    pair = np.stack([np.asarray(xhat_t0), np.asarray(x_t0)])
    (feat,) = extract_features(extractor, pair, layer=cfg.diff_layer)
    f_a, f_b = feat[0], feat[1]
    m = torch.maximum(layer_anomaly_map(f_a, f_b), layer_anomaly_map(f_b, f_a))
    return _top_mean(m, cfg.diff_top_k)


def _exceeds(f: float, delta: float) -> bool:
    return delta == 0 or f > delta


def _eps_from(rng, shape) -> np.ndarray:
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    return rng.standard_normal(shape).astype(np.float32)


def _predict(model, x: np.ndarray, t: int) -> np.ndarray:
    return model.predict(x, t)


def _clean(x0: np.ndarray, cfg: StepSearchConfig) -> np.ndarray:
    return np.clip(x0, -1.0, 1.0) if cfg.clip_estimates else x0


def _run_search(model, x_a, eps, schedule, cfg, extractor, trace, stop_at=None):
    """Walk the search grid, filling ``trace``; returns the detection step or None."""
    floor = cfg.t_min if stop_at is None else stop_at
    grid = search_grid(cfg.t_start, floor, cfg.stride)
    x_hat = diffuse(x_a, cfg.t_start, eps, schedule)
    for i, t in enumerate(grid):
        x_dir = diffuse(x_a, t, eps, schedule)
        e = _predict(model, np.stack([x_hat, x_dir]), t)
        gen0 = predict_x0(x_hat, t, e[0], schedule)
        dir0 = predict_x0(x_dir, t, e[1], schedule)
        gen0, dir0 = _clean(gen0, cfg), _clean(dir0, cfg)
        f = step_difference(gen0, dir0, extractor, cfg)
        trace.records.append(StepRecord(t, gen0, dir0, f))
        if stop_at is None and _exceeds(f, cfg.delta):
            return t
        if i + 1 < len(grid):
            x_hat = ddim_step(x_hat, t, grid[i + 1], e[0], schedule)
    return None


def adaptive_step_search(model, x_a: np.ndarray, schedule: NoiseSchedule, cfg: StepSearchConfig,
                         extractor: FeatureExtractor, rng, eps: np.ndarray | None = None):
    """Find the restart step for ``x_a``; returns ``(proper_step, trace)``.

    Stops at the first visited step whose difference exceeds ``delta`` and
    returns ``min(step + n_extra, t_start)``; if none does before ``t_min``
    the answer is ``t_min``.
    """
    cfg.check(schedule)
    x_a = np.asarray(x_a, dtype=np.float32)
    if eps is None:
        eps = _eps_from(rng, x_a.shape)
    trace = ReconstructionTrace()
    hit = _run_search(model, x_a, eps, schedule, cfg, extractor, trace)
    trace.detection_step = hit
    trace.proper_step = cfg.t_min if hit is None else min(hit + cfg.n_extra, cfg.t_start)
    return trace.proper_step, trace


def build_mask(step_map, sharpness: float = 4.0, center: float | None = None,
               scale: float | None = None, size: tuple[int, int] | None = None) -> np.ndarray:
    """Soft anomaly mask ``logistic(sharpness * (M - center) / scale)``.

    ``center`` defaults to the map median and ``scale`` to its interquartile
    range (falling back to the full range, and to a flat 0.5 mask for a
    constant map).
    """
    m = np.asarray(step_map, dtype=np.float64)
    if m.size == 0:
        raise ValueError("empty anomaly map")
    if center is None:
        center = float(np.median(m))
    if scale is None:
        q1, q3 = np.percentile(m, [25, 75])
        scale = float(q3 - q1)
        if scale <= 0:
            scale = float(m.max() - m.min())
    if scale <= 0:
        mask = np.full_like(m, 0.5)
    else:
        mask = expit(sharpness * (m - center) / scale)
    if size is not None and tuple(mask.shape) != tuple(size):
        t = torch.from_numpy(mask)[None, None]
        mask = torch.nn.functional.interpolate(t, size=size, mode="bilinear", align_corners=False)[0, 0].numpy()
        mask = np.clip(mask, 0.0, 1.0)
    return mask


def saff_fuse(xhat_t0, x_t0, m, t: int, eps, schedule: NoiseSchedule):
    """Blend two clean estimates by ``m`` and re-noise with ``eps`` to step ``t``."""
    if tuple(np.shape(xhat_t0)) != tuple(np.shape(x_t0)):
        raise ValueError(f"clean estimates differ in shape: {np.shape(xhat_t0)} vs {np.shape(x_t0)}")
    if np.shape(m)[-2:] != tuple(np.shape(x_t0))[-2:]:
        raise ValueError(f"mask shape {np.shape(m)} does not match image {np.shape(x_t0)}")
    if np.min(m) < 0 or np.max(m) > 1:
        raise ValueError("mask values must lie in [0, 1]")
    schedule.check_step(t, low=1)
    if isinstance(xhat_t0, np.ndarray):
        m = np.asarray(m, dtype=xhat_t0.dtype)
    return diffuse(m * xhat_t0 + (1 - m) * x_t0, t, eps, schedule)


def denoise_from(model, x_t: np.ndarray, t: int, schedule: NoiseSchedule, stride: int) -> np.ndarray:
    """Deterministic DDIM pass from step ``t`` down to 0."""
    grid = search_grid(t, 0, stride)
    x = x_t
    for cur, nxt in zip(grid[:-1], grid[1:]):
        x = ddim_step(x, cur, nxt, _predict(model, x, cur), schedule)
    return x


def _step_map(extractor, test_img, ref_img, sigma, size):
    ft = extract_features(extractor, test_img)
    fr = extract_features(extractor, ref_img)
    return anomaly_map(ft, fr, size=size, sigma=sigma).map


def reconstruct(model, x_a: np.ndarray, schedule: NoiseSchedule, cfg: StepSearchConfig,
                extractor: FeatureExtractor, rng) -> tuple[np.ndarray, ReconstructionTrace]:
    """Anomaly-free reconstruction of one ``(C, H, W)`` model-range image.

    Runs the step search (or walks to ``cfg.fixed_step``), builds the soft
    mask from the anomaly map between the direct and generated clean
    estimates at the detection step, fuses at the restart step with the same
    noise used for the search, then denoises to step 0.
    """
    cfg.check(schedule)
    x_a = np.asarray(x_a, dtype=np.float32)
    if x_a.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got {x_a.shape}")
    eps = _eps_from(rng, x_a.shape)
    trace = ReconstructionTrace()
    try:
        if cfg.fixed_step is not None and not cfg.saff:
            p = cfg.fixed_step
            trace.proper_step = p
            final = denoise_from(model, diffuse(x_a, p, eps, schedule), p, schedule, cfg.stride)
        else:
            if cfg.fixed_step is None:
                hit = _run_search(model, x_a, eps, schedule, cfg, extractor, trace)
                trace.detection_step = hit
                p = cfg.t_min if hit is None else min(hit + cfg.n_extra, cfg.t_start)
            else:
                _run_search(model, x_a, eps, schedule, cfg, extractor, trace, stop_at=cfg.fixed_step)
                p = cfg.fixed_step
            trace.proper_step = p
            det = trace.records[-1]
            trace.step_map = _step_map(extractor, det.direct_x0, det.generated_x0,
                                       cfg.mask_sigma, x_a.shape[1:])
            trace.mask = build_mask(trace.step_map, cfg.mask_sharpness, size=x_a.shape[1:]).astype(np.float32)
            if cfg.saff:
                # generated estimate: nearest visited step at or above p
                gen = next(r for r in reversed(trace.records) if r.t >= p)
                direct = trace.record_at(p)
                if direct is not None:
                    dir0 = direct.direct_x0
                else:
                    x_p = diffuse(x_a, p, eps, schedule)
                    dir0 = _clean(predict_x0(x_p, p, _predict(model, x_p, p), schedule), cfg)
                start = saff_fuse(gen.generated_x0, dir0, trace.mask, p, eps, schedule)
            else:
                start = diffuse(x_a, p, eps, schedule)
            final = denoise_from(model, start, p, schedule, cfg.stride)
        final = np.clip(final, -1.0, 1.0).astype(np.float32)
        if not np.all(np.isfinite(final)):
            raise ReconstructionError("non-finite reconstruction", trace)
    except ReconstructionError:
        raise
    except Exception as exc:
        raise ReconstructionError(f"reconstruction failed: {exc}", trace) from exc
    trace.final = final
    return final, trace
