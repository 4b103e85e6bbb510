import numpy as np
import pytest

from replaysim import diffusion
from replaysim.diffusion import DenoiserModel, SamplerConfig, make_linear_schedule
from replaysim.errors import ConfigError, ContractError, DimensionError, ScheduleIndexError, TrainingError
from replaysim.optim import make_optimizer


class PointMass:
    """Exact noise predictor for data concentrated at ``mu``."""

    def __init__(self, mu, schedule):
        self.mu = np.asarray(mu, dtype=np.float64)
        self.data_dim = self.mu.size
        self.schedule = schedule

    def predict_noise(self, x_t, t, labels):
        ab = self.schedule.alpha_bar(t)
        return (x_t - np.sqrt(ab) * self.mu) / np.sqrt(1.0 - ab)


# =========================================================
# SCHEDULE
# =========================================================

def test_linear_schedule_shape():
    schedule = make_linear_schedule(1000, 1e-4, 0.02)
    assert schedule.num_steps == 1000
    assert schedule.alpha_bar(0) == 1.0
    assert schedule.alpha_bar(1) == pytest.approx(1 - 1e-4)
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert 0 < schedule.alpha_bar(1000) < 1e-3


def test_schedule_worked_values():
    schedule = diffusion.NoiseSchedule(np.array([0.1, 0.2]))
    np.testing.assert_allclose(schedule.alphas, [0.9, 0.8])
    np.testing.assert_allclose(schedule.alpha_bars, [0.9, 0.72])
    np.testing.assert_allclose(make_linear_schedule(3, 0.1, 0.1).alpha_bars, [0.9, 0.81, 0.729])
    np.testing.assert_allclose(make_linear_schedule(1, 0.3, 0.3).alpha_bars, [0.7])

    x_t = diffusion.q_sample(np.array([1.0]), 2, np.array([1.0]), schedule)
    assert x_t[0] == pytest.approx(np.sqrt(0.72) + np.sqrt(0.28), abs=1e-12)
    np.testing.assert_allclose(diffusion.predict_z0(x_t, 2, np.zeros(1), schedule), x_t / np.sqrt(0.72))
    # eps_hat = 0 from x_t = sqrt(ab_t) c lands on sqrt(ab_prev) c
    c = np.array([0.4])
    np.testing.assert_allclose(diffusion.ddim_step(np.sqrt(0.72) * c, 2, 1, np.zeros(1), schedule), np.sqrt(0.9) * c)


def test_random_schedules_keep_invariants():
    rng = np.random.default_rng(7)
    for _ in range(20):
        start, end = np.sort(rng.uniform(1e-5, 0.5, size=2))
        schedule = make_linear_schedule(int(rng.integers(1, 300)), start, end)
        np.testing.assert_allclose(schedule.alphas, 1 - schedule.betas)
        np.testing.assert_allclose(schedule.alpha_bars, np.cumprod(schedule.alphas))
        assert np.all(np.diff(schedule.alpha_bars) < 0)
        assert np.all((schedule.alpha_bars > 0) & (schedule.alpha_bars < 1))


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 0.05), (10, 0.1, 1.0)])
def test_invalid_schedule(args):
    with pytest.raises(ConfigError):
        make_linear_schedule(*args)


def test_time_outside_schedule():
    schedule = make_linear_schedule(10)
    with pytest.raises(ScheduleIndexError):
        schedule.alpha_bar(11)
    with pytest.raises(ScheduleIndexError):
        diffusion.q_sample(np.zeros(2), 0, np.zeros(2), schedule)


def test_ddim_timesteps():
    assert diffusion.ddim_timesteps(1000, 1) == [1000, 0]
    times = diffusion.ddim_timesteps(1000, 10)
    assert len(times) == 11 and times[0] == 1000 and times[-2] == 1 and times[-1] == 0
    assert all(a > b for a, b in zip(times, times[1:]))
    assert diffusion.ddim_timesteps(20, 20) == list(range(20, -1, -1))
    with pytest.raises(ConfigError):
        diffusion.ddim_timesteps(20, 21)
    with pytest.raises(ConfigError):
        SamplerConfig(ddim_steps=0)


# =========================================================
# CLOSED FORM
# =========================================================

def test_predict_z0_inverts_q_sample():
    schedule = make_linear_schedule(1000)
    rng = np.random.default_rng(0)
    x0 = rng.uniform(-1, 1, size=(64, 3))
    eps = rng.standard_normal((64, 3))
    t = rng.integers(1, 1001, size=64)
    x_t = diffusion.q_sample(x0, t, eps, schedule)
    np.testing.assert_allclose(diffusion.predict_z0(x_t, t, eps, schedule), x0, rtol=0, atol=1e-10)


def test_ddim_step_contracts():
    schedule = make_linear_schedule(10)
    x = np.zeros((1, 2))
    with pytest.raises(ContractError):
        diffusion.ddim_step(x, 5, 5, x, schedule)
    with pytest.raises(DimensionError):
        diffusion.predict_z0(x, 5, np.zeros((1, 3)), schedule)


@pytest.mark.parametrize("ddim_steps", [10, 50, 200])
def test_exact_predictor_recovers_point_mass(ddim_steps):
    schedule = make_linear_schedule(1000)
    mu = np.array([0.3, -0.7])
    out = diffusion.sample(PointMass(mu, schedule), 0, SamplerConfig(ddim_steps=ddim_steps, seed=1),
                           schedule, num_samples=16)
    np.testing.assert_allclose(out, np.tile(mu, (16, 1)), atol=1e-6)


# =========================================================
# DENOISER
# =========================================================

def test_denoiser_forward_contracts():
    model = DenoiserModel(data_dim=2, num_classes=3, hidden=8, depth=2, time_embed_dim=4, class_embed_dim=4)
    out = model.predict_noise(np.zeros((5, 2)), 7, np.array([0, 1, 2, 3, 0]))
    assert out.shape == (5, 2)
    assert model.null_class == 3
    with pytest.raises(DimensionError):
        model.predict_noise(np.zeros((5, 3)), 7, 0)
    with pytest.raises(ContractError):
        model.predict_noise(np.zeros((1, 2)), 7, 4)


def test_timestep_embedding_odd_width():
    emb = diffusion.timestep_embedding(np.array([0, 5]), 5)
    assert emb.shape == (2, 5)
    np.testing.assert_array_equal(emb[0], [0, 0, 1, 1, 0])


def test_sampling_is_deterministic():
    schedule = make_linear_schedule(50)
    model = DenoiserModel(2, 2, hidden=8, depth=2, time_embed_dim=4, class_embed_dim=4, seed=5)
    config = SamplerConfig(ddim_steps=5, seed=11)
    a = diffusion.sample(model, [0, 1, 1], config, schedule)
    b = diffusion.sample(model, [0, 1, 1], config, schedule)
    assert a.tobytes() == b.tobytes()
    c = diffusion.sample(model, [0, 1, 1], SamplerConfig(ddim_steps=5, seed=12), schedule)
    assert not np.array_equal(a, c)


def test_label_count_mismatch():
    schedule = make_linear_schedule(10)
    with pytest.raises(ContractError):
        diffusion.sample(PointMass([0.0, 0.0], schedule), [0, 1], SamplerConfig(ddim_steps=2), schedule,
                         num_samples=3)


def test_checkpoint_round_trip(tmp_path):
    schedule = make_linear_schedule(30, 1e-3, 0.05)
    model = DenoiserModel(2, 3, hidden=8, depth=2, time_embed_dim=4, class_embed_dim=4, seed=2)
    path = str(tmp_path / "denoiser.json")
    model.save(path, schedule)

    loaded, loaded_schedule = DenoiserModel.from_checkpoint(path)
    np.testing.assert_array_equal(loaded_schedule.betas, schedule.betas)
    x = np.random.default_rng(0).standard_normal((4, 2))
    np.testing.assert_array_equal(loaded.predict_noise(x, 9, 1), model.predict_noise(x, 9, 1))


def test_training_reduces_loss():
    schedule = make_linear_schedule(100)
    rng = np.random.default_rng(0)
    x = np.tile([[0.5, -0.5]], (256, 1)) + 0.05 * rng.standard_normal((256, 2))
    y = np.zeros(256, dtype=np.int64)
    model = DenoiserModel(2, 1, hidden=32, depth=2, time_embed_dim=8, class_embed_dim=4)
    optimizer = make_optimizer("adamw", model.parameters(), learning_rate=1e-3)

    losses = diffusion.train_diffusion(model, x, y, schedule, optimizer, steps=400, batch_size=64, rng=rng)
    assert len(losses) == 400
    assert np.mean(losses[-50:]) < np.mean(losses[:50])



def test_non_finite_loss_stops_training():
    model = DenoiserModel(2, 1, hidden=8, depth=2, time_embed_dim=4, class_embed_dim=4)
    model.parameters()[0].data[...] = np.nan
    optimizer = make_optimizer("adamw", model.parameters(), learning_rate=1e-3)
    with pytest.raises(TrainingError) as info:
        diffusion.diffusion_train_step(model, np.zeros((4, 2)), np.zeros(4, dtype=np.int64),
                                       make_linear_schedule(10), optimizer, np.random.default_rng(0), task=2, step=7)
    assert info.value.phase == "diffusion"
    assert "task=2, step=7" in str(info.value)

@pytest.mark.slow
def test_trained_sampler_matches_gaussian():
    schedule = make_linear_schedule(1000)
    rng = np.random.default_rng(0)
    mu, sigma = np.array([0.4, -0.2]), 0.1
    x = mu + sigma * rng.standard_normal((20000, 2))
    y = np.zeros(len(x), dtype=np.int64)
    model = DenoiserModel(2, 1, hidden=128, depth=3)
    optimizer = make_optimizer("adamw", model.parameters(), learning_rate=1e-3)
    diffusion.train_diffusion(model, x, y, schedule, optimizer, steps=20000, batch_size=256, rng=rng)

    out = diffusion.sample(model, 0, SamplerConfig(ddim_steps=50, seed=3), schedule, num_samples=5000)
    np.testing.assert_allclose(out.mean(axis=0), mu, atol=0.05)
    assert np.all(np.abs(out.std(axis=0) - sigma) <= 0.25 * sigma)
