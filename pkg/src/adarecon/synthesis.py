"""Synthetic anomaly generation for training pairs.

Images are channel-first float arrays in model range [-1, 1]. Masks are
``uint8`` arrays of 0/1 with shape ``(H, W)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SynthParams",
    "SynthPair",
    "SynthesisError",
    "fractal_noise",
    "generate_mask",
    "make_texture",
    "synthesize_anomaly",
]

MODEL_RANGE_TOL = 1e-6


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class SynthParams:
    mask_kind: str = "fractal_noise"
    coverage_range: tuple[float, float] = (0.02, 0.15)
    opacity_range: tuple[float, float] = (0.5, 1.0)
    texture_source: str = "procedural"

    def __post_init__(self):
        lo, hi = self.coverage_range
        if not (0.0 < lo <= hi <= 1.0):
            raise SynthesisError(f"coverage_range must satisfy 0 < lo <= hi <= 1, got {self.coverage_range}")
        lo, hi = self.opacity_range
        if not (0.0 < lo <= hi <= 1.0):
            raise SynthesisError(f"opacity_range must lie in (0, 1], got {self.opacity_range}")
        if self.mask_kind not in ("fractal_noise", "rectangles"):
            raise SynthesisError(f"unknown mask_kind {self.mask_kind!r}")
        if self.texture_source not in ("procedural", "self_patch"):
            raise SynthesisError(f"unknown texture_source {self.texture_source!r}")


@dataclass
class SynthPair:
    x: np.ndarray
    x_a: np.ndarray
    mask: np.ndarray
    n: np.ndarray
    opacity: float = field(default=0.0)


def _smoothstep(t):
    return t * t * (3.0 - 2.0 * t)


def _value_noise(rng, h, w, cells_y, cells_x):
    lattice = rng.standard_normal((cells_y + 1, cells_x + 1))
    oy, ox = rng.uniform(0.0, 1.0, size=2)
    y = (np.arange(h) + 0.5) / h * (cells_y - 1) + oy
    x = (np.arange(w) + 0.5) / w * (cells_x - 1) + ox
    y0, x0 = np.floor(y).astype(int), np.floor(x).astype(int)
    fy, fx = _smoothstep(y - y0)[:, None], _smoothstep(x - x0)[None, :]
    a = lattice[np.ix_(y0, x0)]
    b = lattice[np.ix_(y0, x0 + 1)]
    c = lattice[np.ix_(y0 + 1, x0)]
    d = lattice[np.ix_(y0 + 1, x0 + 1)]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def fractal_noise(rng: np.random.Generator, shape: tuple[int, int], octaves: int = 4,
                  base_cells: int | None = None, persistence: float = 0.5) -> np.ndarray:
    """Multi-octave value noise in roughly [-1, 1], shape ``(h, w)``."""
    h, w = shape
    if base_cells is None:
        base_cells = int(rng.integers(2, 5))
    total = np.zeros((h, w))
    amp, norm = 1.0, 0.0
    for o in range(octaves):
        cy = min(base_cells * 2 ** o, h) + 1
        cx = min(base_cells * 2 ** o, w) + 1
        total += amp * _value_noise(rng, h, w, cy, cx)
        norm += amp
        amp *= persistence
    total /= norm
    peak = np.abs(total).max()
    return total / peak if peak > 0 else total


def _pixel_bounds(shape, coverage_range):
    n = shape[0] * shape[1]
    lo, hi = coverage_range
    k_lo = max(1, math.ceil(lo * n - 1e-9))
    k_hi = math.floor(hi * n + 1e-9)
    if k_hi < k_lo:
        raise SynthesisError(
            f"coverage_range {coverage_range} admits no whole pixel count on a {shape} grid")
    return k_lo, k_hi


def generate_mask(rng: np.random.Generator, shape: tuple[int, int],
                  params: SynthParams) -> np.ndarray:
    """Binary anomaly mask whose foreground fraction lies in ``params.coverage_range``."""
    h, w = shape
    if h < 8 or w < 8:
        raise SynthesisError(f"mask shape must be at least 8x8, got {shape}")
    k_lo, k_hi = _pixel_bounds(shape, params.coverage_range)
    mask = np.zeros((h, w), dtype=np.uint8)

    if params.mask_kind == "fractal_noise":
        k = int(rng.integers(k_lo, k_hi + 1))
        field_ = fractal_noise(rng, shape)
        # top-k pixels of the noise field: exact coverage, blob-shaped
        order = np.argsort(field_, axis=None, kind="stable")[::-1]
        mask.flat[order[:k]] = 1
        return mask

    # rectangles: one axis-aligned box whose area hits the pixel budget
    options = []
    for rh in range(1, h + 1):
        lo_w = max(1, math.ceil(k_lo / rh))
        hi_w = min(w, k_hi // rh)
        if lo_w <= hi_w:
            options.append((rh, lo_w, hi_w))
    if not options:
        raise SynthesisError(f"no rectangle on a {shape} grid fits coverage {params.coverage_range}")
    rh, lo_w, hi_w = options[int(rng.integers(len(options)))]
    rw = int(rng.integers(lo_w, hi_w + 1))
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    mask[top:top + rh, left:left + rw] = 1
    return mask


def make_texture(rng: np.random.Generator, x: np.ndarray, source: str = "procedural") -> np.ndarray:
    """Foreign texture for filling anomalies, same shape as ``x``."""
    c, h, w = x.shape
    if source == "self_patch":
        dy = int(rng.integers(h // 4, h - h // 4 + 1))
        dx = int(rng.integers(w // 4, w - w // 4 + 1))
        tex = np.roll(x, (dy, dx), axis=(1, 2))
        if rng.random() < 0.5:
            tex = tex[:, ::-1, :]
        if h == w and rng.random() < 0.5:
            tex = np.rot90(tex, k=1, axes=(1, 2))
        return np.ascontiguousarray(tex, dtype=x.dtype)
    tex = np.empty_like(x)
    for ch in range(c):
        noise = fractal_noise(rng, (h, w), octaves=3)
        center = rng.uniform(-0.8, 0.8)
        gain = rng.uniform(0.2, 0.6)
        tex[ch] = np.clip(center + gain * noise, -1.0, 1.0)
    return tex


def _check_model_range(x):
    x = np.asarray(x)
    if x.ndim != 3:
        raise SynthesisError(f"expected a (C, H, W) image, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise SynthesisError("image contains non-finite values")
    if x.min() < -1 - MODEL_RANGE_TOL or x.max() > 1 + MODEL_RANGE_TOL:
        raise SynthesisError("image values outside model range [-1, 1]")
    return x


def synthesize_anomaly(x: np.ndarray, rng: np.random.Generator, params: SynthParams | None = None,
                       *, mask: np.ndarray | None = None, opacity: float | None = None,
                       texture: np.ndarray | None = None) -> SynthPair:
    """Blend a foreign texture into ``x`` under a random mask.

    ``x_a = (1 - b*m) * x + b*m * texture`` clamped to [-1, 1], with opacity
    ``b`` drawn from ``params.opacity_range`` unless given. ``n`` is taken
    after clamping so it vanishes exactly off the mask. ``x`` is not modified.
    """
    params = params or SynthParams()
    x = _check_model_range(x)
    if mask is None:
        mask = generate_mask(rng, x.shape[1:], params)
    mask = (np.asarray(mask) > 0).astype(np.uint8)
    if mask.shape != x.shape[1:]:
        raise SynthesisError(f"mask shape {mask.shape} does not match image {x.shape[1:]}")
    if opacity is None:
        opacity = float(rng.uniform(*params.opacity_range))
    if texture is None:
        texture = make_texture(rng, x, params.texture_source)
    w = (opacity * mask).astype(x.dtype)[None]
    blended = np.clip((1 - w) * x + w * texture, -1.0, 1.0).astype(x.dtype)
    x_a = np.where(mask[None].astype(bool), blended, x)
    n = x_a - x
    return SynthPair(x=x.copy(), x_a=x_a, mask=mask, n=n, opacity=float(opacity))
