import numpy as np
import pytest

from replaysim import guidance
from replaysim.classifier import ClassifierModel
from replaysim.diffusion import DenoiserModel, SamplerConfig, make_linear_schedule, predict_z0, sample
from replaysim.errors import ConfigError, ContractError
from replaysim.guidance import DualGuidanceConfig, GuidanceConfig, GuidanceVariant
from replaysim.tensor import Tensor, cross_entropy, no_grad

SCHEDULE = make_linear_schedule(100)


def _denoiser(seed=0, num_classes=4):
    return DenoiserModel(2, num_classes, hidden=16, depth=2, time_embed_dim=4, class_embed_dim=4, seed=seed)


def _classifier(seed=0, num_classes=4):
    return ClassifierModel(2, num_classes, hidden=16, depth=2, seed=seed)


def _state(seed=0, n=6):
    rng = np.random.default_rng(seed)
    x_t = rng.standard_normal((n, 2))
    eps = rng.standard_normal((n, 2))
    return x_t, eps


def _summed_loss(classifier, z0, target):
    with no_grad():
        return cross_entropy(classifier(Tensor(z0)), target, reduction="sum").item()


# =========================================================
# CONFIG
# =========================================================

def test_variant_signs_and_classifiers():
    assert GuidanceVariant.GUIDE.sign == 1
    assert GuidanceVariant.PREV_PLUS.sign == 1
    assert GuidanceVariant.PREV_MINUS.sign == -1
    assert GuidanceVariant.CURR_MINUS.sign == -1
    assert GuidanceVariant.CURR_MINUS.uses_current_classifier
    assert GuidanceVariant.PREV_PLUS.uses_previous_classifier
    assert not GuidanceVariant.NONE.uses_current_classifier


def test_guidance_config_parsing():
    assert GuidanceConfig("prev_minus", 1.0).variant is GuidanceVariant.PREV_MINUS
    assert not GuidanceConfig("GUIDE", 0.0).active
    assert not GuidanceConfig("NONE", 1.0).active
    with pytest.raises(ConfigError):
        GuidanceConfig("SIDEWAYS", 1.0)
    with pytest.raises(ConfigError):
        GuidanceConfig("GUIDE", -0.1)
    assert GuidanceConfig("GUIDE", 1.0).window == 1.0
    for window in (0.0, -0.5, 1.5):
        with pytest.raises(ConfigError):
            GuidanceConfig("GUIDE", 1.0, window=window)


def test_dual_config_validation():
    with pytest.raises(ConfigError):
        DualGuidanceConfig(1, 1)
    with pytest.raises(ConfigError):
        DualGuidanceConfig(0, 1, s1=-1.0)


# =========================================================
# EPS UPDATE
# =========================================================

def test_zero_scale_is_bit_exact():
    x_t, eps = _state()
    z0 = predict_z0(x_t, 40, eps, SCHEDULE)
    out = guidance.guide_epsilon(eps, x_t, 40, z0, _classifier(), 1, 0.0, 1, SCHEDULE)
    assert out.tobytes() == eps.tobytes()


def test_shift_is_linear_in_scale():
    x_t, eps = _state(1)
    z0 = predict_z0(x_t, 30, eps, SCHEDULE)
    clf = _classifier(1)
    for sign in (1, -1):
        unit = guidance.guidance_shift(x_t, 30, z0, clf, 2, 1.0, sign, SCHEDULE)
        for scale in (0.1, 2.0, 17.5):
            shifted = guidance.guidance_shift(x_t, 30, z0, clf, 2, scale, sign, SCHEDULE)
            np.testing.assert_array_equal(shifted, scale * unit)


def test_minus_variant_mirrors_plus():
    x_t, eps = _state(2)
    z0 = predict_z0(x_t, 30, eps, SCHEDULE)
    clf = _classifier(2)
    plus = guidance.guide_epsilon(eps, x_t, 30, z0, clf, 0, 0.5, 1, SCHEDULE)
    minus = guidance.guide_epsilon(eps, x_t, 30, z0, clf, 0, 0.5, -1, SCHEDULE)
    np.testing.assert_allclose(plus - eps, eps - minus, atol=1e-12)


def test_stopped_gradient_matches_finite_differences():
    x_t, eps = _state(3, n=3)
    t, target, h = 25, np.array([0, 3, 1]), 1e-6
    clf = _classifier(3)
    ab = SCHEDULE.alpha_bar(t)

    def loss(x):
        return _summed_loss(clf, (x - np.sqrt(1 - ab) * eps) / np.sqrt(ab), target)

    analytic = guidance.guidance_gradient(clf, x_t, t, predict_z0(x_t, t, eps, SCHEDULE), target, SCHEDULE)
    for index in np.ndindex(x_t.shape):
        up, down = x_t.copy(), x_t.copy()
        up[index] += h
        down[index] -= h
        numeric = (loss(up) - loss(down)) / (2 * h)
        assert analytic[index] == pytest.approx(numeric, rel=1e-4, abs=1e-7)


def test_full_backprop_matches_finite_differences():
    x_t, _ = _state(4, n=3)
    t, target, h = 60, np.array([2, 2, 0]), 1e-6
    clf, denoiser = _classifier(4), _denoiser(4)
    labels = np.array([0, 1, 3])
    ab = SCHEDULE.alpha_bar(t)

    def loss(x):
        eps = denoiser.predict_noise(x, t, labels)
        return _summed_loss(clf, (x - np.sqrt(1 - ab) * eps) / np.sqrt(ab), target)

    eps = denoiser.predict_noise(x_t, t, labels)
    z0 = predict_z0(x_t, t, eps, SCHEDULE)
    analytic = guidance.guidance_gradient(clf, x_t, t, z0, target, SCHEDULE, denoiser=denoiser, labels=labels)
    for index in np.ndindex(x_t.shape):
        up, down = x_t.copy(), x_t.copy()
        up[index] += h
        down[index] -= h
        numeric = (loss(up) - loss(down)) / (2 * h)
        assert analytic[index] == pytest.approx(numeric, rel=1e-4, abs=1e-7)
    assert all(p.grad is None for p in denoiser.parameters() + clf.parameters())


def test_positive_guidance_lowers_target_loss():
    x_t, eps = _state(5, n=32)
    t, target = 10, 1
    clf = _classifier(5)
    z0 = predict_z0(x_t, t, eps, SCHEDULE)
    guided = guidance.guide_epsilon(eps, x_t, t, z0, clf, target, 0.1, 1, SCHEDULE)
    targets = np.full(32, target)
    assert _summed_loss(clf, predict_z0(x_t, t, guided, SCHEDULE), targets) < _summed_loss(clf, z0, targets)


def test_scalar_target_applies_to_every_row():
    x_t, eps = _state(6, n=4)
    z0 = predict_z0(x_t, 30, eps, SCHEDULE)
    clf = _classifier(6)
    scalar = guidance.guide_epsilon(eps, x_t, 30, z0, clf, 1, 0.5, 1, SCHEDULE)
    per_row = guidance.guide_epsilon(eps, x_t, 30, z0, clf, np.ones(4, dtype=np.int64), 0.5, 1, SCHEDULE)
    assert scalar.shape == (4, 2)
    np.testing.assert_array_equal(scalar, per_row)


def test_guide_epsilon_contracts():
    x_t, eps = _state()
    z0 = predict_z0(x_t, 10, eps, SCHEDULE)
    with pytest.raises(ContractError):
        guidance.guide_epsilon(eps, x_t, 10, z0, _classifier(), 4, 1.0, 1, SCHEDULE)
    with pytest.raises(ContractError):
        guidance.guide_epsilon(eps, x_t, 10, z0, _classifier(), 0, 1.0, 2, SCHEDULE)


def test_select_target_class_prefers_lowest_on_ties():
    clf = _classifier()
    for p in clf.parameters():
        p.data[...] = 0.0
    assert guidance.select_target_class(clf, np.zeros(2), [3, 2]) == 2
    np.testing.assert_array_equal(guidance.select_target_class(clf, np.zeros((3, 2)), [1, 3]), [1, 1, 1])


# =========================================================
# REHEARSAL
# =========================================================

def test_rehearsal_without_guidance_equals_plain_sampling():
    denoiser = _denoiser(6)
    config = SamplerConfig(ddim_steps=5, seed=3)
    labels = np.array([0, 0, 1, 1])
    plain = sample(denoiser, labels, config, SCHEDULE)
    for guide in (GuidanceConfig("GUIDE", 0.0), GuidanceConfig("NONE", 3.0)):
        out = guidance.sample_rehearsal(denoiser, None, None, labels, [2, 3], guide, config, SCHEDULE)
        assert out.tobytes() == plain.tobytes()


@pytest.mark.parametrize("variant", ["GUIDE", "PREV_PLUS", "PREV_MINUS", "CURR_MINUS"])
def test_each_variant_moves_samples(variant):
    denoiser = _denoiser(7)
    config = SamplerConfig(ddim_steps=5, seed=3)
    labels = np.array([0, 1, 0, 1])
    plain = sample(denoiser, labels, config, SCHEDULE)
    out = guidance.sample_rehearsal(denoiser, _classifier(8), _classifier(9), labels, [2, 3],
                                    GuidanceConfig(variant, 1.0), config, SCHEDULE)
    assert out.shape == plain.shape
    assert not np.allclose(out, plain)


def test_window_leaves_noisy_steps_unguided():
    x_t, eps = _state(4)
    labels = np.array([0, 1, 0, 1, 0, 1])
    config = GuidanceConfig("PREV_PLUS", 1.0, window=0.3)
    hook = guidance.make_rehearsal_hook(config, SCHEDULE, [2, 3], prev_classifier=_classifier(5))
    assert np.array_equal(hook(x_t, 100, eps, labels), eps)
    assert np.array_equal(hook(x_t, 31, eps, labels), eps)
    assert not np.allclose(hook(x_t, 30, eps, labels), eps)


def test_window_changes_only_the_late_trajectory():
    denoiser = _denoiser(7)
    config = SamplerConfig(ddim_steps=5, seed=3)
    labels = np.array([0, 1, 0, 1])
    plain = sample(denoiser, labels, config, SCHEDULE)
    outputs = {}
    for window in (0.3, 1.0):
        outputs[window] = guidance.sample_rehearsal(
            denoiser, None, _classifier(9), labels, [2, 3],
            GuidanceConfig("GUIDE", 1.0, full_backprop=True, window=window), config, SCHEDULE)
    assert not np.allclose(outputs[0.3], plain)
    assert not np.allclose(outputs[0.3], outputs[1.0])
    assert np.isfinite(outputs[0.3]).all()


def test_rehearsal_contracts():
    denoiser = _denoiser()
    config = SamplerConfig(ddim_steps=2)
    with pytest.raises(ContractError, match="current task"):
        guidance.sample_rehearsal(denoiser, None, _classifier(), [0], [], GuidanceConfig(), config, SCHEDULE)
    with pytest.raises(ContractError, match="previous tasks"):
        guidance.sample_rehearsal(denoiser, None, _classifier(), [0, 2], [2, 3], GuidanceConfig(), config, SCHEDULE)
    with pytest.raises(ContractError, match="previous classifier"):
        guidance.sample_rehearsal(denoiser, None, _classifier(), [0], [2, 3],
                                  GuidanceConfig("PREV_PLUS", 1.0), config, SCHEDULE)
    with pytest.raises(ContractError, match="current classifier"):
        guidance.sample_rehearsal(denoiser, _classifier(), None, [0], [2, 3],
                                  GuidanceConfig("GUIDE", 1.0), config, SCHEDULE)


# =========================================================
# DUAL GUIDANCE
# =========================================================

def test_dual_with_zero_second_scale_is_single_class_guidance():
    denoiser, clf = _denoiser(10), _classifier(10)
    config = SamplerConfig(ddim_steps=5, seed=4)

    def single(x_t, t, eps, labels):
        z0 = predict_z0(x_t, t, eps, SCHEDULE)
        return guidance.guide_epsilon(eps, x_t, t, z0, clf, 0, 10.0, 1, SCHEDULE)

    expected = sample(denoiser, denoiser.null_class, config, SCHEDULE, guidance=single, num_samples=8)
    out = guidance.dual_guided_sample(denoiser, clf, DualGuidanceConfig(0, 2, 10.0, 0.0), config, SCHEDULE, 8)
    assert out.tobytes() == expected.tobytes()


def test_dual_with_zero_scales_is_unconditional():
    denoiser, clf = _denoiser(11), _classifier(11)
    config = SamplerConfig(ddim_steps=5, seed=4)
    plain = sample(denoiser, denoiser.null_class, config, SCHEDULE, num_samples=5)
    out = guidance.dual_guided_sample(denoiser, clf, DualGuidanceConfig(0, 2, 0.0, 0.0), config, SCHEDULE, 5)
    assert out.tobytes() == plain.tobytes()


def test_dual_guidance_on_a_batch():
    denoiser, clf = _denoiser(12), _classifier(12)
    config = SamplerConfig(ddim_steps=5, seed=4)
    plain = sample(denoiser, denoiser.null_class, config, SCHEDULE, num_samples=16)
    out = guidance.dual_guided_sample(denoiser, clf, DualGuidanceConfig(0, 2, 10.0, 10.0), config, SCHEDULE, 16)
    assert out.shape == (16, 2)
    assert np.all(np.isfinite(out))
    assert not np.array_equal(out, plain)
