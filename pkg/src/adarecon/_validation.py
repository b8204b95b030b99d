"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def check_images(X, resolution: int | None = None, channels: int | None = None) -> np.ndarray:
    """Validate a batch of images and convert it to model layout.

    Accepts ``(n, H, W)`` or ``(n, H, W, C)`` with ``C`` in {1, 3}, either
    ``uint8`` or floats in [0, 1]. Returns float32 ``(n, C, H, W)`` in
    [-1, 1], bilinearly resized to ``resolution`` when given.
    """
    if isinstance(X, (list, tuple)):
        if not X:
            raise ValueError("no images given")
        X = np.stack([np.asarray(x) for x in X])
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[..., None]
    if X.ndim != 4 or X.shape[-1] not in (1, 3):
        raise ValueError(f"expected images shaped (n, H, W) or (n, H, W, C) with C in (1, 3), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if X.shape[1] < 8 or X.shape[2] < 8:
        raise ValueError(f"images must be at least 8x8, got {X.shape[1]}x{X.shape[2]}")
    if X.dtype == np.uint8:
        Xf = X.astype(np.float32) / 255.0
    else:
        Xf = X.astype(np.float32)
        if not np.all(np.isfinite(Xf)):
            raise ValueError("images contain NaN or infinite values")
        if Xf.min() < 0.0 or Xf.max() > 1.0:
            raise ValueError("float images must lie in [0, 1]")
    if channels is not None and Xf.shape[-1] != channels:
        raise ValueError(f"expected {channels}-channel images, got {Xf.shape[-1]}")
    out = np.ascontiguousarray(Xf.transpose(0, 3, 1, 2)) * 2.0 - 1.0
    if resolution and out.shape[-2:] != (resolution, resolution):
        t = F.interpolate(torch.from_numpy(out), size=(resolution, resolution),
                          mode="bilinear", align_corners=False, antialias=True)
        out = t.clamp(-1.0, 1.0).numpy()
    return out.astype(np.float32)


def check_random_state(seed) -> int:
    if seed is None:
        return 0
    if isinstance(seed, (int, np.integer)) and not isinstance(seed, bool) and seed >= 0:
        return int(seed)
    raise ValueError(f"random_state must be a non-negative integer, got {seed!r}")
