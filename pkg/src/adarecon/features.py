"""Multi-layer features, cosine anomaly maps and image scores."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import nn

__all__ = [
    "FeatureExtractor",
    "AnomalyMap",
    "FinetuneConfig",
    "extract_features",
    "layer_anomaly_map",
    "anomaly_map",
    "image_score",
    "default_top_k",
    "finetune_loss",
    "finetune_extractor",
]

TOP_K_FRACTION = 0.061


class FeatureExtractor(nn.Module):
    """Deterministic random-weight convolutional pyramid.

    Twelve 3x3 convolutions in four stages of three; features are tapped
    after the layers listed in ``layers`` (1-based). Stages two and three
    halve the resolution. Within a stage the second and third layers are
    residual, which keeps the untrained signal from collapsing with depth.
    """

    def __init__(self, in_channels: int = 3, channels: Sequence[int] = (16, 32, 48, 64),
                 layers: Sequence[int] = (3, 6, 9, 12), seed: int = 0):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("channels needs one width per stage (4)")
        layers = tuple(sorted(int(l) for l in layers))
        if not layers or layers[0] < 1 or layers[-1] > 12:
            raise ValueError(f"layer indices must lie in 1..12, got {layers}")
        self.in_channels = in_channels
        self.channels = tuple(channels)
        self.layers = layers
        self.seed = seed
        convs = []
        cin = in_channels
        for stage, c in enumerate(self.channels):
            stride = 2 if stage in (1, 2) else 1
            convs.append(nn.Conv2d(cin, c, 3, stride=stride))
            convs.append(nn.Conv2d(c, c, 3))
            convs.append(nn.Conv2d(c, c, 3))
            cin = c
        self.convs = nn.ModuleList(convs)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for conv in self.convs:
                fan_in = conv.in_channels * 9
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (1.4 / math.sqrt(fan_in)))
                conv.bias.copy_(torch.randn(conv.bias.shape, generator=gen) * 0.1)
        self.eval()

    def config(self) -> dict:
        return {"in_channels": self.in_channels, "channels": list(self.channels),
                "layers": list(self.layers), "seed": self.seed}

    def tap_convs(self) -> list[nn.Conv2d]:
        return [self.convs[l - 1] for l in self.layers]

    def forward(self, x: torch.Tensor, upto: int | None = None) -> list[torch.Tensor]:
        last = upto or self.layers[-1]
        taps = set(self.layers) if upto is None else {upto}
        out = []
        h = x
        for i, conv in enumerate(self.convs[:last], start=1):
            # reflect needs at least 2 pixels per side; 1x1 maps replicate instead
            mode = "reflect" if min(h.shape[-2:]) > 1 else "replicate"
            z = conv(F.pad(h, (1, 1, 1, 1), mode=mode))
            h = torch.tanh(z) if i % 3 == 1 else h + torch.tanh(z)
            if i in taps:
                out.append(h)
        return out


def _to_model_tensor(image, value_range: str, dtype) -> tuple[torch.Tensor, bool]:
    x = torch.as_tensor(np.asarray(image) if not torch.is_tensor(image) else image)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {tuple(x.shape)}")
    x = x.to(dtype)
    if value_range == "storage":
        x = x * 2.0 - 1.0
    elif value_range != "model":
        raise ValueError(f"value_range must be 'model' or 'storage', got {value_range!r}")
    return x, squeeze


def extract_features(extractor: FeatureExtractor, image, value_range: str = "model",
                     layer: int | None = None) -> list[torch.Tensor]:
    """Features at every tapped layer (or only ``layer``) for one image or a batch.

    Single images yield ``(c, u, v)`` tensors, batches ``(B, c, u, v)``.
    """
    if extractor is None or not isinstance(extractor, FeatureExtractor):
        raise ValueError("feature extractor is not initialised")
    dtype = next(extractor.parameters()).dtype
    x, squeeze = _to_model_tensor(image, value_range, dtype)
    with torch.no_grad():
        feats = extractor(x, upto=layer)
    return [f[0] for f in feats] if squeeze else feats


def layer_anomaly_map(f_t, f_r) -> torch.Tensor:
    """Minimum cosine distance of every test position to all reference positions.

    ``f_t`` is ``(c, u, v)`` or ``(B, c, u, v)``; ``f_r`` matches in channels
    and batch size but may differ spatially. Zero vectors have cosine 0 to
    everything. Returns ``(u, v)`` or ``(B, u, v)`` with values in [0, 2].
    """
    f_t, f_r = torch.as_tensor(f_t), torch.as_tensor(f_r)
    squeeze = f_t.ndim == 3
    if squeeze:
        f_t, f_r = f_t[None], f_r[None]
    if f_t.shape[:2] != f_r.shape[:2]:
        raise ValueError(f"feature shapes {tuple(f_t.shape)} and {tuple(f_r.shape)} disagree in batch/channels")
    b, c, u, v = f_t.shape
    a = f_t.reshape(b, c, u * v)
    r = f_r.reshape(b, c, -1)
    a = a / torch.where(a.norm(dim=1, keepdim=True) > 0, a.norm(dim=1, keepdim=True), torch.ones(()))
    r = r / torch.where(r.norm(dim=1, keepdim=True) > 0, r.norm(dim=1, keepdim=True), torch.ones(()))
    dist = 1.0 - torch.einsum("bci,bcj->bij", a, r)
    m = dist.min(dim=2).values.clamp(0.0, 2.0).reshape(b, u, v)
    return m[0] if squeeze else m


def default_top_k(height: int, width: int) -> int:
    return max(1, math.ceil(TOP_K_FRACTION * height * width))


@dataclass
class AnomalyMap:
    map: np.ndarray
    sigma: float = 6.0
    top_k: int | None = None
    layers: tuple[int, ...] = field(default=())

    @property
    def image_score(self) -> float:
        return image_score(self)


def _upsample(m: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    if tuple(m.shape[-2:]) == tuple(size):
        return m
    return F.interpolate(m[:, None], size=size, mode="bilinear", align_corners=False)[:, 0]


def anomaly_map(features_t: Sequence, features_r: Sequence, size: tuple[int, int],
                sigma: float = 6.0, top_k: int | None = None,
                layers: Sequence[int] = ()) -> AnomalyMap | list[AnomalyMap]:
    """Sum of bilinearly upsampled per-layer maps, Gaussian-smoothed.

    Batched features give a list of maps, single-image features one map.
    """
    if len(features_t) != len(features_r):
        raise ValueError(f"layer sets differ: {len(features_t)} vs {len(features_r)} layers")
    if not features_t:
        raise ValueError("no feature layers given")
    squeeze = torch.as_tensor(features_t[0]).ndim == 3
    total = None
    for ft, fr in zip(features_t, features_r):
        m = layer_anomaly_map(ft, fr)
        if squeeze:
            m = m[None]
        m = _upsample(m.to(torch.float64), size)
        total = m if total is None else total + m
    arr = total.numpy()
    if sigma and sigma > 0:
        arr = np.stack([gaussian_filter(a, sigma=sigma, mode="reflect") for a in arr])
    arr = np.maximum(arr, 0.0)
    maps = [AnomalyMap(a, sigma=sigma, top_k=top_k, layers=tuple(layers)) for a in arr]
    return maps[0] if squeeze else maps


def image_score(amap: AnomalyMap | np.ndarray, k: int | None = None) -> float:
    """Mean of the ``k`` largest map values (``k`` clamped to the map size)."""
    if isinstance(amap, AnomalyMap):
        k = k if k is not None else amap.top_k
        values = np.asarray(amap.map)
    else:
        values = np.asarray(amap)
    if values.size == 0:
        raise ValueError("empty anomaly map")
    if k is None:
        k = default_top_k(*values.shape[-2:]) if values.ndim >= 2 else 1
    k = int(min(max(k, 1), values.size))
    flat = values.ravel()
    top = np.partition(flat, flat.size - k)[flat.size - k:]
    return float(np.sort(top).mean())


@dataclass(frozen=True)
class FinetuneConfig:
    lam: float = 0.01
    lr: float = 3e-4
    batch_size: int = 16
    iterations: int = 200
    seed: int = 0


def _mean_cos_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (1.0 - F.cosine_similarity(a, b, dim=1, eps=1e-12)).mean()


def finetune_loss(model: FeatureExtractor, frozen: FeatureExtractor | None, x: torch.Tensor,
                  x_rec: torch.Tensor, lam: float) -> torch.Tensor:
    """Feature alignment between images and reconstructions plus distillation.

    Per layer: mean over positions of ``1 - cos`` along channels between test
    and reconstruction features, plus ``lam`` times the same distance from
    each to the frozen extractor's features.
    """
    if frozen is None:
        raise ValueError("finetuning needs a frozen copy of the extractor")
    ft, fr = model(x), model(x_rec)
    loss = sum(_mean_cos_distance(a, b) for a, b in zip(ft, fr))
    if lam:
        with torch.no_grad():
            ft_bar, fr_bar = frozen(x), frozen(x_rec)
        loss = loss + lam * (sum(_mean_cos_distance(a, b) for a, b in zip(ft, ft_bar))
                             + sum(_mean_cos_distance(a, b) for a, b in zip(fr, fr_bar)))
    return loss


def finetune_extractor(extractor: FeatureExtractor, normal_set, recon_fn: Callable,
                       cfg: FinetuneConfig = FinetuneConfig(),
                       frozen: FeatureExtractor | None = None):
    """Fine-tune the tapped layers of a copy of ``extractor``.

    ``recon_fn`` maps a ``(N, C, H, W)`` model-range batch of normal images to
    their reconstructions (computed once up front). The input extractor is
    left untouched and serves as the frozen reference unless ``frozen`` is
    given. Returns ``(tuned, losses)``.
    """
    frozen = frozen if frozen is not None else copy.deepcopy(extractor)
    frozen.eval()
    for p in frozen.parameters():
        p.requires_grad_(False)
    tuned = copy.deepcopy(extractor)
    for p in tuned.parameters():
        p.requires_grad_(False)
    trainable = [p for conv in tuned.tap_convs() for p in conv.parameters()]
    for p in trainable:
        p.requires_grad_(True)

    dtype = next(tuned.parameters()).dtype
    data = torch.as_tensor(np.asarray(normal_set)).to(dtype)
    recon = torch.as_tensor(np.asarray(recon_fn(data.numpy()))).to(dtype)
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.Adam(trainable, lr=cfg.lr)
    losses = []
    tuned.train()
    for _ in range(cfg.iterations):
        idx = torch.randint(data.shape[0], (min(cfg.batch_size, data.shape[0]),), generator=gen)
        loss = finetune_loss(tuned, frozen, data[idx], recon[idx], cfg.lam)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(float(loss.item()))
    tuned.eval()
    for p in tuned.parameters():
        p.requires_grad_(False)
    return tuned, losses
