import math

import numpy as np
import pytest
import torch
from torch import nn

from adarecon.data import to_model_range
from adarecon.denoiser import (Denoiser, PairBatch, TrainConfig, TrainingError, atp_loss, atp_target,
                               diffuse_batch, load_checkpoint, noise_prediction_loss, restoring_target,
                               save_checkpoint, train, write_loss_csv)
from adarecon.schedule import NoiseSchedule, ScheduleError, default_schedule, diffuse, predict_x0
from adarecon.synthesis import synthesize_anomaly
from adarecon.toy import make_toy_dataset


def schedule_with(abars):
    ab = np.asarray(abars, dtype=np.float64)
    return NoiseSchedule(t_max=len(ab) - 1, alpha_bar=ab, beta=1.0 - ab[1:] / ab[:-1])


def tiny_model(dtype=torch.float64, seed=0):
    torch.manual_seed(seed)
    m = Denoiser(in_channels=1, base_channels=2, channel_mults=(1,), emb_dim=4).to(dtype)
    assert sum(p.numel() for p in m.parameters()) <= 1000
    return m


class MockPredictor(nn.Module):
    """Returns a fixed tensor regardless of input (only the output matters)."""

    def __init__(self, out):
        super().__init__()
        self.out = out
        self.w = nn.Parameter(torch.zeros(()))

    def forward(self, x_t, t):
        return self.out + 0 * self.w


# -- target ----------------------------------------------------------------

def test_target_is_noise_when_difference_is_zero():
    eps = torch.randn(2, 3, 4, 4)
    out = atp_target(eps, torch.zeros_like(eps), 500, default_schedule())
    assert torch.equal(out, eps)


def test_target_direct_substitution():
    s = schedule_with([1.0, 0.81])
    out = atp_target(np.zeros((1, 1, 1)), np.full((1, 1, 1), 0.1), 1, s)
    assert out.item() == pytest.approx(-(0.9 / math.sqrt(0.19)) * 0.1, abs=1e-12)
    assert out.item() == pytest.approx(-0.206474, abs=1e-6)


def test_target_matches_elementwise_oracle():
    s = default_schedule()
    rng = np.random.default_rng(0)
    eps, n = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    t = 321
    ab = s.alpha_bar[t]
    expected = np.empty_like(eps)
    for idx in np.ndindex(eps.shape):
        expected[idx] = eps[idx] - math.sqrt(ab) / math.sqrt(1 - ab) * n[idx]
    np.testing.assert_allclose(atp_target(eps, n, t, s), expected, rtol=1e-12)
    # per-sample steps give the same values as one call per sample
    e2, n2 = torch.from_numpy(np.stack([eps, eps])), torch.from_numpy(np.stack([n, n]))
    both = atp_target(e2, n2, torch.tensor([t, 7]), s)
    np.testing.assert_allclose(both[0].numpy(), expected, rtol=1e-12)
    np.testing.assert_allclose(both[1].numpy(), atp_target(eps, n, 7, s), rtol=1e-12)


def test_target_rejects_step_zero_and_bad_shapes():
    s = default_schedule()
    with pytest.raises(ScheduleError):
        atp_target(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), 0, s)
    with pytest.raises(ScheduleError):
        atp_target(np.zeros((1, 2, 2)), np.zeros((1, 2, 3)), 5, s)


def test_restoring_target_recovers_normal_image_and_literal_overshoots():
    s = default_schedule()
    rng = np.random.default_rng(1)
    x = rng.uniform(-1, 1, (3, 8, 8))
    pair = synthesize_anomaly(x, rng)
    eps = rng.normal(size=x.shape)
    for t in (50, 400, 900):
        x_t = diffuse(pair.x_a, t, eps, s)
        back = predict_x0(x_t, t, restoring_target(eps, pair.n, t, s), s)
        np.testing.assert_allclose(back, x, atol=1e-9)
        literal = predict_x0(x_t, t, atp_target(eps, pair.n, t, s), s)
        np.testing.assert_allclose(literal, x + 2 * pair.n, atol=1e-9)


# -- loss ------------------------------------------------------------------

@pytest.mark.parametrize("convention", ["restore", "literal"])
def test_zero_difference_loss_is_bit_identical_to_standard_loss(convention):
    s = default_schedule()
    model = Denoiser(3, 8, (1, 2))
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        x = torch.rand(2, 3, 8, 8, generator=g) * 2 - 1
        eps = torch.randn(x.shape, generator=g)
        t = torch.randint(1, 1001, (2,), generator=g)
        a = atp_loss(model, PairBatch(x, torch.zeros_like(x)), t, eps, s, convention)
        b = noise_prediction_loss(model, x, t, eps, s)
        assert torch.equal(a, b)


def test_perfect_mock_predictor_has_zero_loss():
    s = default_schedule()
    rng = np.random.default_rng(2)
    x = rng.uniform(-1, 1, (3, 8, 8)).astype(np.float32)
    pair = synthesize_anomaly(x, rng)
    eps = torch.randn(1, 3, 8, 8)
    for conv, fn in (("restore", restoring_target), ("literal", atp_target)):
        target = fn(eps, torch.from_numpy(pair.n)[None], 300, s)
        assert atp_loss(MockPredictor(target), pair, 300, eps, s, conv).item() == 0.0


def test_random_mock_predictor_matches_independent_recomputation():
    s = default_schedule()
    rng = np.random.default_rng(3)
    x = rng.uniform(-1, 1, (1, 8, 8))
    pair = synthesize_anomaly(x, rng)
    eps = rng.normal(size=(1, 1, 8, 8))
    out = rng.normal(size=(1, 1, 8, 8))
    t = 123
    got = atp_loss(MockPredictor(torch.from_numpy(out)), pair, t, torch.from_numpy(eps), s, "literal").item()
    c = math.sqrt(s.alpha_bar[t]) / math.sqrt(1 - s.alpha_bar[t])
    total = 0.0
    for idx in np.ndindex(out.shape):
        target = eps[idx] - c * pair.n[idx[1:]]
        total += (target - out[idx]) ** 2
    assert got == pytest.approx(total / out.size, rel=1e-6)
    assert got >= 0


def test_unknown_convention_rejected():
    with pytest.raises(ValueError):
        atp_loss(MockPredictor(torch.zeros(1, 1, 4, 4)), PairBatch(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 4, 4)),
                 5, torch.zeros(1, 1, 4, 4), default_schedule(), "flipped")
    with pytest.raises(ValueError):
        TrainConfig(target="flipped")


def _gradient_check(convention, seed):
    s = default_schedule()
    model = tiny_model(seed=seed)
    g = torch.Generator().manual_seed(seed)
    x_a = torch.rand(2, 1, 4, 4, generator=g, dtype=torch.float64) * 2 - 1
    n = torch.zeros_like(x_a)
    n[0, 0, 1:3, 1:3] = torch.rand(2, 2, generator=g, dtype=torch.float64) - 0.5
    eps = torch.randn(x_a.shape, generator=g, dtype=torch.float64)
    t = torch.tensor([250, 700])
    loss_fn = lambda: atp_loss(model, PairBatch(x_a, n), t, eps, s, convention)  # noqa: E731
    params = list(model.parameters())
    grads = torch.autograd.grad(loss_fn(), params)
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    worst, h = 0.0, 1e-6
    for _ in range(50):
        which = int(rng.choice(len(params), p=sizes / sizes.sum()))
        idx = int(rng.integers(sizes[which]))
        flat = params[which].data.view(-1)
        orig = flat[idx].item()
        flat[idx] = orig + h
        up = loss_fn().item()
        flat[idx] = orig - h
        down = loss_fn().item()
        flat[idx] = orig
        fd = (up - down) / (2 * h)
        an = grads[which].view(-1)[idx].item()
        if max(abs(fd), abs(an)) > 1e-7:
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an)))
    return worst


@pytest.mark.parametrize("convention", ["restore", "literal"])
def test_loss_gradient_matches_finite_differences(convention):
    assert _gradient_check(convention, seed=0) < 1e-3


# -- model -----------------------------------------------------------------

def test_model_shapes_and_eval_determinism():
    model = Denoiser(3, 8, (1, 2, 2))
    x = np.random.default_rng(0).normal(size=(2, 3, 16, 16)).astype(np.float32)
    a = model.predict(x, 10)
    b = model.predict(x, 10)
    assert a.shape == x.shape and isinstance(a, np.ndarray)
    np.testing.assert_array_equal(a, b)
    single = model.predict(x[0], 10)
    assert single.shape == x[0].shape
    np.testing.assert_allclose(single, a[0], atol=1e-5)


def test_diffuse_batch_matches_scalar_diffuse():
    s = default_schedule()
    x = torch.rand(3, 1, 4, 4, dtype=torch.float64)
    e = torch.randn(3, 1, 4, 4, dtype=torch.float64)
    t = torch.tensor([0, 10, 999])
    out = diffuse_batch(x, t, e, s)
    for i in range(3):
        np.testing.assert_allclose(out[i].numpy(), diffuse(x[i].numpy(), int(t[i]), e[i].numpy(), s), rtol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    s = default_schedule(100)
    model = Denoiser(1, 4, (1, 2))
    save_checkpoint(tmp_path / "m.pt", model, s, {"note": "x"})
    loaded, s2, cfg = load_checkpoint(tmp_path / "m.pt")
    assert cfg == {"note": "x"}
    assert s2.t_max == 100
    np.testing.assert_array_equal(s2.alpha_bar, s.alpha_bar)
    x = torch.randn(1, 1, 8, 8)
    assert torch.equal(model.predict(x, 5), loaded.predict(x, 5))


# -- training --------------------------------------------------------------

def _normal_set(n=8, size=16, seed=0):
    ds = make_toy_dataset(size=size, n_train=n, n_test_normal=1, defect_count=0, seed=seed)
    return np.stack([to_model_range(x) for x in ds.train])


def test_training_is_deterministic():
    data = _normal_set()
    s = default_schedule()
    cfg = TrainConfig(iterations=5, batch_size=4, seed=3)
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        _, losses = train(Denoiser(3, 8, (1, 2)), data, None, cfg, s)
        runs.append(losses)
    assert runs[0] == runs[1]


def test_zero_anomaly_fraction_follows_standard_training_exactly():
    data = torch.from_numpy(_normal_set())
    s = default_schedule()
    cfg = TrainConfig(iterations=6, batch_size=4, p_anom=0.0, seed=5)
    torch.manual_seed(0)
    ours, _ = train(Denoiser(3, 8, (1, 2)), data, None, cfg, s)

    torch.manual_seed(0)
    ref = Denoiser(3, 8, (1, 2))
    gen = torch.Generator().manual_seed(5)
    opt = torch.optim.Adam(ref.parameters(), lr=cfg.resolved_lr)
    ref.train()
    for _ in range(cfg.iterations):
        x = data[torch.randint(data.shape[0], (4,), generator=gen)]
        t = torch.randint(1, s.t_max + 1, (4,), generator=gen)
        eps = torch.randn(x.shape, generator=gen)
        loss = noise_prediction_loss(ref, x, t, eps, s)
        opt.zero_grad()
        loss.backward()
        nn.utils.clip_grad_norm_(ref.parameters(), cfg.grad_clip)
        opt.step()
    for a, b in zip(ours.state_dict().values(), ref.state_dict().values()):
        assert torch.equal(a, b)


def test_training_makes_progress_on_toy_stripes():
    data = _normal_set(n=16, size=16)
    torch.manual_seed(0)
    cfg = TrainConfig(iterations=500, batch_size=16, seed=0)
    _, losses = train(Denoiser(3, 16, (1, 2)), data, None, cfg, default_schedule())
    assert np.mean(losses[-50:]) < np.mean(losses[:50])


def test_training_rejects_empty_data_and_reports_non_finite_loss():
    s = default_schedule()
    with pytest.raises(TrainingError):
        train(Denoiser(3, 8, (1,)), np.zeros((0, 3, 8, 8), np.float32), None, TrainConfig(iterations=1), s)
    bad = np.full((2, 3, 8, 8), np.nan, np.float32)
    with pytest.raises(TrainingError, match="non-finite"):
        train(Denoiser(3, 8, (1,)), bad, None, TrainConfig(iterations=1, batch_size=2, p_anom=0.0), s)


def test_train_config_defaults():
    assert TrainConfig().resolved_lr == 1e-3
    assert TrainConfig(from_scratch=False).resolved_lr == 5e-6
    assert TrainConfig(lr=0.1).resolved_lr == 0.1
    with pytest.raises(ValueError):
        TrainConfig(p_anom=1.5)


def test_loss_csv(tmp_path):
    write_loss_csv([0.5, 0.25], tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines() == ["step,loss", "0,0.5", "1,0.25"]


def test_ema_weights_match_hand_computed_average():
    data = _normal_set()
    s = default_schedule()
    d = 0.9
    torch.manual_seed(0)
    ours, _ = train(Denoiser(3, 8, (1, 2)), data, None, TrainConfig(iterations=5, batch_size=4, ema_decay=d), s)

    torch.manual_seed(0)
    ref = Denoiser(3, 8, (1, 2))
    avg = {}

    def track(step, loss):
        for k, v in ref.state_dict().items():
            avg[k] = v.clone() if step == 0 else d * avg[k] + (1 - d) * v

    train(ref, data, None, TrainConfig(iterations=5, batch_size=4), s, progress=track)
    for k, v in ours.state_dict().items():
        torch.testing.assert_close(v, avg[k], rtol=1e-5, atol=1e-6)
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)
