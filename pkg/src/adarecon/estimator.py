"""Scikit-learn style detector wrapping training, reconstruction and scoring."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, check_random_state
from .data import to_storage_uint8
from .denoiser import Denoiser, TrainConfig, train
from .features import (AnomalyMap, FeatureExtractor, FinetuneConfig, anomaly_map,
                       extract_features, finetune_extractor, image_score)
from .reconstruction import ReconstructionTrace, StepSearchConfig, reconstruct
from .schedule import NoiseSchedule, default_schedule, make_schedule, subsample_schedule
from .synthesis import SynthParams, synthesize_anomaly

__all__ = ["AdaptiveDiffusionDetector", "DetectionResult"]

log = logging.getLogger(__name__)


@dataclass
class DetectionResult:
    scores: np.ndarray
    maps: np.ndarray
    reconstructions: np.ndarray
    traces: list[ReconstructionTrace]

    @property
    def proper_steps(self) -> np.ndarray:
        return np.array([t.proper_step for t in self.traces])


class AdaptiveDiffusionDetector(TransformerMixin, BaseEstimator):
    """Reconstruction-based anomaly detector with per-image adaptive restart steps.

    ``fit`` trains a noise-prediction network on normal images mixed with
    synthetic anomalies. ``transform`` returns per-pixel anomaly maps,
    ``anomaly_score`` per-image scores, and ``predict`` thresholds the scores
    (requires ``threshold``).

    Images are ``(n, H, W)`` or ``(n, H, W, C)`` arrays, ``uint8`` or floats
    in [0, 1]; they are resized to ``resolution``.
    """

    def __init__(self, resolution=64, base_channels=32, channel_mults=(1, 2, 2),
                 schedule_kind="linear", t_max=1000, beta_start=1e-4, beta_end=0.02,
                 iterations=4000, batch_size=32, lr=None, p_anom=0.5, target="restore", ema_decay=None,
                 synth_params=None,
                 t_start=750, t_min=350, delta=0.35, n_extra=0, stride=10,
                 fixed_step=None, saff=True, feature_channels=(16, 32, 48, 64),
                 feature_layers=(3, 6, 9, 12), diff_layer=12, diff_top_k=10,
                 sigma=6.0, top_k=None, mask_sharpness=4.0, finetune=False,
                 finetune_iterations=200, threshold=None, random_state=0):
        self.resolution = resolution
        self.base_channels = base_channels
        self.channel_mults = channel_mults
        self.schedule_kind = schedule_kind
        self.t_max = t_max
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.iterations = iterations
        self.batch_size = batch_size
        self.lr = lr
        self.p_anom = p_anom
        self.target = target
        self.ema_decay = ema_decay
        self.synth_params = synth_params
        self.t_start = t_start
        self.t_min = t_min
        self.delta = delta
        self.n_extra = n_extra
        self.stride = stride
        self.fixed_step = fixed_step
        self.saff = saff
        self.feature_channels = feature_channels
        self.feature_layers = feature_layers
        self.diff_layer = diff_layer
        self.diff_top_k = diff_top_k
        self.sigma = sigma
        self.top_k = top_k
        self.mask_sharpness = mask_sharpness
        self.finetune = finetune
        self.finetune_iterations = finetune_iterations
        self.threshold = threshold
        self.random_state = random_state

    # -- configuration views -------------------------------------------------

    def _make_schedule(self) -> NoiseSchedule:
        if self.schedule_kind == "linear" and (self.beta_start, self.beta_end) == (1e-4, 0.02):
            return default_schedule(self.t_max)
        full = make_schedule(self.schedule_kind, max(1000, self.t_max), self.beta_start, self.beta_end)
        return subsample_schedule(full, self.t_max)

    def search_config(self, **overrides) -> StepSearchConfig:
        params = dict(t_start=self.t_start, t_min=self.t_min, delta=self.delta, n_extra=self.n_extra,
                      stride=self.stride, diff_layer=self.diff_layer, diff_top_k=self.diff_top_k,
                      mask_sharpness=self.mask_sharpness, mask_sigma=self.sigma, saff=self.saff,
                      fixed_step=self.fixed_step)
        params.update(overrides)
        return StepSearchConfig(**params)

    def train_config(self) -> TrainConfig:
        return TrainConfig(iterations=self.iterations, batch_size=self.batch_size, lr=self.lr,
                           from_scratch=True, p_anom=self.p_anom, target=self.target,
                           ema_decay=self.ema_decay,
                           seed=check_random_state(self.random_state))

    def _make_extractor(self, channels: int) -> FeatureExtractor:
        return FeatureExtractor(channels, self.feature_channels, self.feature_layers,
                                seed=check_random_state(self.random_state))

    # -- fitting -------------------------------------------------------------

    def fit(self, X, y=None, *, progress=None):
        """Train the denoiser (and optionally fine-tune the extractor) on normal images."""
        seed = check_random_state(self.random_state)
        Xm = check_images(X, self.resolution)
        self.n_channels_in_ = Xm.shape[1]
        self.schedule_ = self._make_schedule()
        self.search_config()  # validates search parameters before the long part
        if self.t_start > self.schedule_.t_max:
            raise ValueError(f"t_start={self.t_start} exceeds t_max={self.t_max}")
        torch.manual_seed(seed)
        model = Denoiser(self.n_channels_in_, self.base_channels, self.channel_mults)
        params = self.synth_params or SynthParams()
        synth = lambda x, rng: synthesize_anomaly(x, rng, params)  # noqa: E731
        self.model_, self.loss_history_ = train(model, Xm, synth, self.train_config(),
                                                self.schedule_, progress=progress)
        self.extractor_ = self._make_extractor(self.n_channels_in_)
        if self.finetune:
            self.extractor_, self.finetune_history_ = finetune_extractor(
                self.extractor_, Xm, self._plain_reconstructions,
                FinetuneConfig(iterations=self.finetune_iterations, seed=seed))
        return self

    def set_components(self, model: Denoiser, schedule: NoiseSchedule,
                       extractor: FeatureExtractor | None = None):
        """Use an already trained denoiser (e.g. loaded from a checkpoint)."""
        self.model_ = model.eval()
        self.schedule_ = schedule
        self.n_channels_in_ = model.in_channels
        self.extractor_ = extractor or self._make_extractor(model.in_channels)
        self.loss_history_ = getattr(self, "loss_history_", [])
        return self

    def _plain_reconstructions(self, Xm: np.ndarray) -> np.ndarray:
        cfg = self.search_config(fixed_step=self.t_min, saff=False)
        seed = check_random_state(self.random_state)
        return np.stack([reconstruct(self.model_, x, self.schedule_, cfg, self.extractor_,
                                     np.random.default_rng([seed, i]))[0]
                         for i, x in enumerate(Xm)])

    # -- inference -----------------------------------------------------------

    def _prepare(self, X) -> np.ndarray:
        check_is_fitted(self, ["model_", "schedule_", "extractor_"])
        return check_images(X, self.resolution, self.n_channels_in_)

    def detect(self, X, search_config: StepSearchConfig | None = None) -> DetectionResult:
        """Reconstruct, map and score every image.

        Image ``i`` uses noise seeded by ``(random_state, i)``, so results
        depend only on the inputs, their order and the fitted state.
        """
        Xm = self._prepare(X)
        cfg = search_config or self.search_config()
        seed = check_random_state(self.random_state)
        recons, traces, maps, scores = [], [], [], []
        size = Xm.shape[-2:]
        for i, x in enumerate(Xm):
            rec, trace = reconstruct(self.model_, x, self.schedule_, cfg, self.extractor_,
                                     np.random.default_rng([seed, i]))
            amap = self.score_pair(x, rec)
            recons.append(rec)
            traces.append(trace)
            maps.append(amap.map)
            scores.append(image_score(amap))
        return DetectionResult(np.asarray(scores), np.stack(maps).astype(np.float32),
                               np.stack(recons), traces)

    def score_pair(self, x: np.ndarray, rec: np.ndarray) -> AnomalyMap:
        """Aggregate anomaly map of one model-range image against its reconstruction."""
        ft = extract_features(self.extractor_, x)
        fr = extract_features(self.extractor_, rec)
        return anomaly_map(ft, fr, size=tuple(x.shape[-2:]), sigma=self.sigma,
                           top_k=self.top_k, layers=tuple(self.feature_layers))

    def reconstruct(self, X):
        """Reconstructions as ``uint8`` images plus the per-image traces."""
        res = self.detect(X)
        return np.stack([to_storage_uint8(r) for r in res.reconstructions]), res.traces

    def transform(self, X):
        """Per-pixel anomaly maps, shape ``(n, H, W)``."""
        return self.detect(X).maps

    def anomaly_score(self, X):
        """Per-image anomaly scores (higher means more anomalous)."""
        return self.detect(X).scores

    def predict(self, X):
        """1 for anomalous, 0 for normal, by comparing scores to ``threshold``."""
        if self.threshold is None:
            raise ValueError("set `threshold` (e.g. via set_params) before calling predict")
        return (self.anomaly_score(X) > self.threshold).astype(int)
