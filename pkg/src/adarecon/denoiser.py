"""Noise-prediction network, anomaly-oriented loss and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.optim.swa_utils import AveragedModel, get_ema_multi_avg_fn

from .schedule import NoiseSchedule, ScheduleError
from .synthesis import SynthPair, SynthParams, synthesize_anomaly

__all__ = [
    "Denoiser",
    "TrainConfig",
    "TrainingError",
    "PairBatch",
    "atp_target",
    "restoring_target",
    "TARGET_CONVENTIONS",
    "atp_loss",
    "noise_prediction_loss",
    "diffuse_batch",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "write_loss_csv",
]

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "adarecon.denoiser"
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    pass


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    for g in (8, 4, 2, 1):
        if ch % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Denoiser(nn.Module):
    """Small encoder-decoder predicting the noise in ``x_t`` at step ``t``.

    ``channel_mults`` sets the number of resolution levels; each level has one
    residual block on the way down and one on the way up, with skip
    connections between them.
    """

    def __init__(self, in_channels: int = 3, base_channels: int = 32,
                 channel_mults: Sequence[int] = (1, 2, 2), emb_dim: int | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.base_channels = base_channels
        self.channel_mults = tuple(channel_mults)
        self.emb_dim = emb_dim or base_channels * 4
        self.time_mlp = nn.Sequential(
            nn.Linear(self.emb_dim, self.emb_dim), nn.SiLU(), nn.Linear(self.emb_dim, self.emb_dim))
        self.stem = nn.Conv2d(in_channels, base_channels, 3, padding=1)

        chans = [base_channels * m for m in self.channel_mults]
        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        cin = base_channels
        for i, c in enumerate(chans):
            self.down_blocks.append(ResBlock(cin, c, self.emb_dim))
            last = i == len(chans) - 1
            self.downsamples.append(nn.Identity() if last else nn.Conv2d(c, c, 3, stride=2, padding=1))
            cin = c
        self.mid = ResBlock(cin, cin, self.emb_dim)
        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i, c in reversed(list(enumerate(chans))):
            self.up_blocks.append(ResBlock(cin + c, c, self.emb_dim))
            self.upsamples.append(nn.Identity() if i == 0 else nn.Conv2d(c, chans[i - 1], 3, padding=1))
            cin = chans[i - 1] if i else c
        self.out_norm = nn.GroupNorm(_groups(cin), cin)
        self.out = nn.Conv2d(cin, in_channels, 3, padding=1)

    def arch_config(self) -> dict:
        return {"in_channels": self.in_channels, "base_channels": self.base_channels,
                "channel_mults": list(self.channel_mults), "emb_dim": self.emb_dim}

    def forward(self, x_t: torch.Tensor, t) -> torch.Tensor:
        if not torch.is_tensor(t) or t.ndim == 0:
            t = torch.full((x_t.shape[0],), int(t), dtype=torch.long)
        emb = timestep_embedding(t, self.emb_dim).to(x_t.dtype)
        emb = self.time_mlp(emb)
        h = self.stem(x_t)
        skips = []
        for block, down in zip(self.down_blocks, self.downsamples):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        h = self.mid(h, emb)
        for block, up in zip(self.up_blocks, self.upsamples):
            h = block(torch.cat([h, skips.pop()], dim=1), emb)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.out(F.silu(self.out_norm(h)))

    @torch.no_grad()
    def predict(self, x_t, t):
        """Evaluation-mode noise prediction; accepts arrays or tensors, batched or not."""
        was_training = self.training
        self.eval()
        try:
            squeeze = False
            as_numpy = isinstance(x_t, np.ndarray)
            xt = torch.as_tensor(x_t, dtype=next(self.parameters()).dtype)
            if xt.ndim == 3:
                xt, squeeze = xt[None], True
            out = self(xt, t)
            if squeeze:
                out = out[0]
            return out.numpy() if as_numpy else out
        finally:
            self.train(was_training)


def _coef(schedule: NoiseSchedule, t, like: torch.Tensor, fn) -> torch.Tensor:
    ab = torch.tensor(schedule.alpha_bar, dtype=torch.float64)[t]
    return fn(ab).to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def _step_tensor(schedule: NoiseSchedule, t, low: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() and (int(t.min()) < low or int(t.max()) > schedule.t_max):
        raise ScheduleError(f"step outside [{low}, {schedule.t_max}]")
    return t


def diffuse_batch(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Per-sample forward noising; ``t`` is an int or a length-B tensor of steps."""
    if x0.shape != eps.shape:
        raise ScheduleError(f"noise shape {tuple(eps.shape)} != {tuple(x0.shape)}")
    t = _step_tensor(schedule, t, 0)
    a = _coef(schedule, t, x0, torch.sqrt)
    s = _coef(schedule, t, x0, lambda ab: torch.sqrt(1.0 - ab))
    return a * x0 + s * eps


def atp_target(eps, n, t, schedule: NoiseSchedule):
    """Noise target that maps an anomalous input back to its normal counterpart.

    ``eps - sqrt(abar_t) / sqrt(1 - abar_t) * n``. ``t`` may be a single step
    or one step per batch element (leading axis).
    """
    if tuple(eps.shape) != tuple(n.shape):
        raise ScheduleError(f"difference shape {tuple(n.shape)} != noise shape {tuple(eps.shape)}")
    if np.ndim(t) == 0 and not torch.is_tensor(t):
        ab = float(schedule.alpha_bar[schedule.check_step(t, low=1)])
        return eps - (math.sqrt(ab) / math.sqrt(1.0 - ab)) * n
    like = torch.as_tensor(eps)
    tt = _step_tensor(schedule, t, 1)
    c = _coef(schedule, tt, like, lambda ab: torch.sqrt(ab) / torch.sqrt(1.0 - ab))
    if isinstance(eps, np.ndarray):
        return eps - c.numpy() * n
    return eps - c * n


def restoring_target(eps, n, t, schedule: NoiseSchedule):
    """Target whose clean estimate from ``diffuse(x_a, t, eps)`` is ``x_a - n``.

    This is :func:`atp_target` with the difference negated,
    ``eps + sqrt(abar_t) / sqrt(1 - abar_t) * n``. Predicting it makes
    ``predict_x0`` return the normal image exactly; predicting
    :func:`atp_target` itself would return ``x_a + n``.
    """
    return atp_target(eps, -n, t, schedule)


TARGET_CONVENTIONS = {"restore": restoring_target, "literal": atp_target}


class PairBatch(NamedTuple):
    """Batched training pairs: anomalous images and their differences to normal."""
    x_a: torch.Tensor
    n: torch.Tensor


def _as_batch(pair) -> PairBatch:
    x_a, n = torch.as_tensor(pair.x_a), torch.as_tensor(pair.n)
    if x_a.ndim == 3:
        x_a, n = x_a[None], n[None]
    return PairBatch(x_a, n)


def atp_loss(model: nn.Module, pair: PairBatch | SynthPair, t, eps, schedule: NoiseSchedule,
             convention: str = "restore") -> torch.Tensor:
    """Mean squared error between the anomaly-aware target and the model's prediction.

    ``convention`` picks the target: ``"restore"`` (:func:`restoring_target`)
    or ``"literal"`` (:func:`atp_target`). Both reduce to ``eps`` when n = 0.
    """
    if convention not in TARGET_CONVENTIONS:
        raise ValueError(f"unknown target convention {convention!r}; use one of {sorted(TARGET_CONVENTIONS)}")
    pair = _as_batch(pair)
    eps = torch.as_tensor(eps).reshape(pair.x_a.shape)
    x_t = diffuse_batch(pair.x_a, t, eps, schedule)
    tt = _step_tensor(schedule, t, 1)
    if tt.numel() == 1:
        tt = tt.expand(x_t.shape[0])
    target = TARGET_CONVENTIONS[convention](eps, pair.n, tt, schedule)
    return F.mse_loss(model(x_t, tt), target)


def noise_prediction_loss(model: nn.Module, x0: torch.Tensor, t, eps, schedule: NoiseSchedule) -> torch.Tensor:
    """Standard diffusion objective on clean images."""
    x0 = torch.as_tensor(x0)
    if x0.ndim == 3:
        x0 = x0[None]
    eps = torch.as_tensor(eps).reshape(x0.shape)
    tt = _step_tensor(schedule, t, 1)
    if tt.numel() == 1:
        tt = tt.expand(x0.shape[0])
    return F.mse_loss(model(diffuse_batch(x0, tt, eps, schedule), tt), eps)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 4000
    batch_size: int = 32
    lr: float | None = None
    from_scratch: bool = True
    p_anom: float = 0.5
    grad_clip: float | None = 1.0
    target: str = "restore"
    ema_decay: float | None = None
    seed: int = 0

    FINETUNE_LR = 5e-6
    SCRATCH_LR = 1e-3

    def __post_init__(self):
        if not 0.0 <= self.p_anom <= 1.0:
            raise ValueError(f"p_anom must lie in [0, 1], got {self.p_anom}")
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.target not in TARGET_CONVENTIONS:
            raise ValueError(f"unknown target convention {self.target!r}")
        if self.ema_decay is not None and not 0.0 < self.ema_decay < 1.0:
            raise ValueError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")

    @property
    def resolved_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return self.SCRATCH_LR if self.from_scratch else self.FINETUNE_LR

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr"] = self.resolved_lr
        return d


SynthFn = Callable[[np.ndarray, np.random.Generator], SynthPair]


def _default_synth(params: SynthParams | None = None) -> SynthFn:
    params = params or SynthParams()
    return lambda x, rng: synthesize_anomaly(x, rng, params)


def train(model: Denoiser, normal_set, synth: SynthFn | None, cfg: TrainConfig,
          schedule: NoiseSchedule, *, progress: Callable[[int, float], None] | None = None):
    """Train ``model`` in place on normal images mixed with synthetic anomalies.

    ``normal_set`` is a float array or tensor ``(N, C, H, W)`` in model range.
    Every step draws a batch, swaps ``round(p_anom * batch)`` of it for
    synthetic anomalies, samples ``t ~ U{1..T}`` and standard-normal noise,
    and takes one Adam step on :func:`atp_loss`. Returns ``(model, losses)``.

    With ``cfg.ema_decay`` set, the returned weights are the exponential
    moving average of the trajectory instead of the last iterate.
    """
    data = torch.as_tensor(np.asarray(normal_set) if not torch.is_tensor(normal_set) else normal_set)
    if data.ndim != 4 or data.shape[0] == 0:
        raise TrainingError("normal_set must be a non-empty (N, C, H, W) batch")
    data = data.to(next(model.parameters()).dtype)
    synth = synth or _default_synth()
    gen = torch.Generator().manual_seed(cfg.seed)
    np_rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.resolved_lr)
    n_anom = int(round(cfg.p_anom * cfg.batch_size))
    ema = None
    if cfg.ema_decay is not None:
        ema = AveragedModel(model, multi_avg_fn=get_ema_multi_avg_fn(cfg.ema_decay), use_buffers=True)
    losses: list[float] = []
    model.train()
    for step in range(cfg.iterations):
        idx = torch.randint(data.shape[0], (cfg.batch_size,), generator=gen)
        x = data[idx]
        x_a = x.clone()
        n = torch.zeros_like(x)
        for i in range(n_anom):
            p = synth(x[i].numpy(), np_rng)
            x_a[i] = torch.from_numpy(np.ascontiguousarray(p.x_a)).to(x.dtype)
            n[i] = torch.from_numpy(np.ascontiguousarray(p.n)).to(x.dtype)
        t = torch.randint(1, schedule.t_max + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(x.shape, generator=gen, dtype=x.dtype)
        loss = atp_loss(model, PairBatch(x_a, n), t, eps, schedule, cfg.target)
        if not torch.isfinite(loss):
            raise TrainingError(
                f"non-finite loss {loss.item()} at step {step}; t={t.tolist()}, "
                f"input range [{x_a.min().item():.3g}, {x_a.max().item():.3g}]")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if ema is not None:
            ema.update_parameters(model)
        losses.append(float(loss.item()))
        if progress is not None:
            progress(step, losses[-1])
    if ema is not None:
        model.load_state_dict(ema.module.state_dict())
    model.eval()
    return model, losses


def write_loss_csv(losses: Sequence[float], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])


def save_checkpoint(path: str | Path, model: Denoiser, schedule: NoiseSchedule,
                    config: dict | None = None) -> None:
    """Write parameters, architecture, schedule and a config echo to ``path``."""
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": model.arch_config(),
        "state_dict": {k: v.detach().cpu() for k, v in model.state_dict().items()},
        "schedule": schedule.to_dict(),
        "config": config or {},
    }, path)


def load_checkpoint(path: str | Path) -> tuple[Denoiser, NoiseSchedule, dict]:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob.get('version')}")
    model = Denoiser(**blob["arch"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model, NoiseSchedule.from_dict(blob["schedule"]), blob["config"]
