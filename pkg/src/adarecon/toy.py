"""Procedural toy dataset: periodic textures with injected defects.

Images are ``uint8`` arrays of shape ``(H, W, 3)``; masks are ``uint8``
0/1 arrays of shape ``(H, W)``. The on-disk layout matches the ingested
dataset layout (see :mod:`adarecon.data`), plus a ``toy_clean/`` tree with
each defective image's defect-free base.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .synthesis import fractal_noise

__all__ = ["ToyConfig", "ToyDataset", "render_texture", "inject_defect",
           "make_toy_dataset", "write_toy_dataset"]

TEXTURES = ("stripes", "weave", "checker")
DEFECT_KINDS = ("blob", "scratch", "spot")

_PALETTES = {
    "stripes": ((0.25, 0.35, 0.55), (0.85, 0.80, 0.65)),
    "weave": ((0.45, 0.30, 0.20), (0.90, 0.75, 0.55)),
    "checker": ((0.20, 0.20, 0.20), (0.75, 0.75, 0.80)),
}


@dataclass(frozen=True)
class ToyConfig:
    category: str = "toy_stripes"
    texture: str = "stripes"
    size: int = 64
    n_train: int = 64
    n_test_normal: int = 25
    defect_count: int = 25
    defect_scale: tuple[float, float] = (0.12, 0.25)
    seed: int = 0

    def __post_init__(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture family {self.texture!r}; choose from {TEXTURES}")
        if self.n_train < 1 or self.n_test_normal + self.defect_count < 1:
            raise ValueError("image counts must be >= 1")
        if self.n_test_normal < 0 or self.defect_count < 0:
            raise ValueError("image counts must be non-negative")
        if self.size < 8:
            raise ValueError("size must be >= 8")


@dataclass
class ToyDataset:
    config: ToyConfig
    train: list[np.ndarray]
    test: list[np.ndarray]
    labels: list[int]
    masks: list[np.ndarray]
    defect_types: list[str]
    clean: list[np.ndarray] = field(repr=False)
    names: list[str] = field(default_factory=list)


def render_texture(rng: np.random.Generator, family: str, size: int) -> np.ndarray:
    """One defect-free texture sample with mild phase/frequency/orientation jitter."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    theta = math.radians(30.0 + rng.normal(0.0, 2.0))
    freq = 6.0 * (1.0 + rng.normal(0.0, 0.02))
    phase = rng.uniform(0, 2 * math.pi)
    u = xx * math.cos(theta) + yy * math.sin(theta)
    v = -xx * math.sin(theta) + yy * math.cos(theta)
    if family == "stripes":
        s = 0.5 + 0.5 * np.sin(2 * math.pi * freq * u + phase)
    elif family == "weave":
        phase2 = rng.uniform(0, 2 * math.pi)
        a = np.sin(2 * math.pi * freq * u + phase)
        b = np.sin(2 * math.pi * freq * v + phase2)
        s = 0.5 + 0.25 * (a + b)
    else:
        phase2 = rng.uniform(0, 2 * math.pi)
        a = np.sin(2 * math.pi * freq * 0.5 * u + phase)
        b = np.sin(2 * math.pi * freq * 0.5 * v + phase2)
        s = 0.5 + 0.5 * np.tanh(3.0 * a * b)
    lo, hi = (np.array(c) for c in _PALETTES[family])
    img = lo[None, None] * (1 - s[..., None]) + hi[None, None] * s[..., None]
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def inject_defect(image: np.ndarray, rng: np.random.Generator, kind: str = "blob",
                  scale: float = 0.2, center: tuple[float, float] | None = None,
                  color: tuple[float, float, float] | None = None):
    """Paint a defect onto a copy of ``image``.

    ``scale`` is the defect's characteristic size as a fraction of the side
    length. Returns ``(defective, written)`` where ``written`` is the exact
    set of pixels the injector overwrote.
    """
    h, w = image.shape[:2]
    if center is None:
        center = (rng.uniform(0.3, 0.7), rng.uniform(0.3, 0.7))
    if color is None:
        color = tuple(rng.uniform(0.0, 1.0, size=3))
    cy, cx = center[0] * h, center[1] * w
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    r = max(scale * min(h, w) / 2.0, 1.0)
    if kind == "blob":
        wobble = 0.25 * fractal_noise(rng, (h, w), octaves=2, base_cells=2)
        written = np.hypot(yy - cy, xx - cx) <= r * (1.0 + wobble)
    elif kind == "spot":
        written = np.hypot(yy - cy, xx - cx) <= r
    elif kind == "scratch":
        ang = rng.uniform(0, math.pi)
        d = np.abs((yy - cy) * math.cos(ang) - (xx - cx) * math.sin(ang))
        along = np.abs((yy - cy) * math.sin(ang) + (xx - cx) * math.cos(ang))
        written = (d <= max(r * 0.15, 0.75)) & (along <= 2 * r)
    else:
        raise ValueError(f"unknown defect kind {kind!r}")
    if not written.any():
        written[min(int(cy), h - 1), min(int(cx), w - 1)] = True
    out = image.copy()
    paint = np.clip(np.round(np.asarray(color) * 255), 0, 255).astype(np.uint8)
    out[written] = paint
    return out, written.astype(np.uint8)


def make_toy_dataset(config: ToyConfig | None = None, **overrides) -> ToyDataset:
    """Deterministic toy dataset; every image gets its own seeded stream."""
    if config is None:
        config = ToyConfig(**overrides)
    elif overrides:
        config = ToyConfig(**{**asdict(config), **overrides})
    n_test = config.n_test_normal + config.defect_count
    streams = np.random.SeedSequence(config.seed).spawn(config.n_train + n_test)
    rngs = [np.random.default_rng(s) for s in streams]

    train = [render_texture(rngs[i], config.texture, config.size) for i in range(config.n_train)]
    test, labels, masks, kinds, clean, names = [], [], [], [], [], []
    for j in range(n_test):
        rng = rngs[config.n_train + j]
        base = render_texture(rng, config.texture, config.size)
        if j < config.n_test_normal:
            test.append(base)
            labels.append(0)
            masks.append(np.zeros(base.shape[:2], np.uint8))
            kinds.append("good")
        else:
            kind = DEFECT_KINDS[j % len(DEFECT_KINDS)]
            scale = rng.uniform(*config.defect_scale)
            img, written = inject_defect(base, rng, kind, scale)
            test.append(img)
            labels.append(1)
            masks.append(written)
            kinds.append(kind)
        clean.append(base)
        names.append(f"{j:03d}")
    return ToyDataset(config, train, test, labels, masks, kinds, clean, names)


def write_toy_dataset(ds: ToyDataset, root: str | Path) -> Path:
    """Write ``ds`` under ``root/<category>/`` in the standard folder layout."""
    from PIL import Image

    cat = Path(root) / ds.config.category
    (cat / "train" / "good").mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(ds.train):
        Image.fromarray(img).save(cat / "train" / "good" / f"{i:03d}.png")
    for img, kind, mask, base, name in zip(ds.test, ds.defect_types, ds.masks, ds.clean, ds.names):
        (cat / "test" / kind).mkdir(parents=True, exist_ok=True)
        Image.fromarray(img).save(cat / "test" / kind / f"{name}.png")
        if kind != "good":
            (cat / "ground_truth" / kind).mkdir(parents=True, exist_ok=True)
            Image.fromarray(mask * 255).save(cat / "ground_truth" / kind / f"{name}_mask.png")
            (cat / "toy_clean" / kind).mkdir(parents=True, exist_ok=True)
            Image.fromarray(base).save(cat / "toy_clean" / kind / f"{name}.png")
    return cat
