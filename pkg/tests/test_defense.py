"""Tests for defense module: FedEM perturbations, local noise and client strategies."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.data import NormalizationTransform, normalize
from src.defense import (
    PIXEL_SCALE,
    DefenseConfig,
    DefenseMethod,
    FedEMDefense,
    GaussianSampler,
    LaplaceSampler,
    NoDefense,
    NoiseDefense,
    NoiseMechanism,
    NoiseSpec,
    PerturbationConfig,
    PerturbationError,
    add_noise,
    build_defense,
    clip_gradient,
    generate_perturbation,
    privatize,
    project_annulus,
    sample_batch,
)
from src.federation import SeedStreams
from src.harness.selftest import CLT_BOUND
from src.models import GradientVector, Model, ModelSpec, ParameterSet


# Fixtures
@pytest.fixture
def model():
    return Model(ModelSpec(input_shape=(1, 2, 2), num_classes=2, layer_widths=[4, 3, 2]))


@pytest.fixture
def theta(model):
    return model.init_params(0)


@pytest.fixture
def batch():
    rng = np.random.default_rng(4)
    return rng.uniform(0.2, 0.8, size=(3, 1, 2, 2)), np.array([0, 1, 1])


@pytest.fixture
def transform():
    return NormalizationTransform.for_dataset("mnist", 1)


@pytest.fixture
def gradient():
    return GradientVector([("w", np.array([[3.0, 0.0], [0.0, 4.0]])), ("b", np.array([0.0, 0.0]))])


# Annulus Tests
class TestProjectAnnulus:
    """Projection onto rho_min <= ||delta||_inf <= rho_max."""

    def test_clamps_to_outer_radius(self):
        cfg = PerturbationConfig(rho_max=8.0, rho_min=0.0)
        out = project_annulus(np.array([-20.0, 3.0, 9.0]), cfg)
        np.testing.assert_array_equal(out, [-8.0, 3.0, 8.0])

    def test_scales_up_small_delta(self):
        cfg = PerturbationConfig(rho_max=8.0, rho_min=2.0)
        out = project_annulus(np.array([0.5, -1.0]), cfg)
        assert np.max(np.abs(out)) == 2.0
        np.testing.assert_allclose(out, [1.0, -2.0])

    def test_zero_delta_gets_inner_radius(self):
        cfg = PerturbationConfig(rho_max=8.0, rho_min=1.0)
        out = project_annulus(np.zeros(3), cfg)
        np.testing.assert_array_equal(out, [1.0, 0.0, 0.0])

    def test_inside_annulus_is_unchanged(self):
        cfg = PerturbationConfig(rho_max=8.0, rho_min=1.0)
        delta = np.array([0.2, -5.0, 7.9])
        np.testing.assert_array_equal(project_annulus(delta, cfg), delta)

    def test_randomized_bounds(self):
        rng = np.random.default_rng(0)
        cfg = PerturbationConfig(rho_max=4.0, rho_min=3.0)
        for _ in range(500):
            peak = np.max(np.abs(project_annulus(rng.uniform(-10, 10, size=7) * rng.uniform(), cfg)))
            assert cfg.rho_min <= peak <= cfg.rho_max

    def test_inverted_radii_rejected(self):
        with pytest.raises(ValidationError):
            PerturbationConfig(rho_max=1.0, rho_min=2.0)

    def test_default_step_is_quarter_radius(self):
        assert PerturbationConfig(rho_max=8.0).step_size == 2.0
        assert PerturbationConfig(rho_max=8.0, alpha_u=0.5).step_size == 0.5


class TestGeneratePerturbation:
    """Alternating delta / theta_u optimisation."""

    def test_delta_stays_in_annulus(self, model, theta, batch, transform):
        x, y = batch
        cfg = PerturbationConfig(rho_max=8.0, rho_min=2.0, iterations=6)
        result = generate_perturbation(theta, x, y, cfg, 0, model, transform)
        peak = np.max(np.abs(result.delta))
        assert cfg.rho_min <= peak <= cfg.rho_max
        assert result.delta.shape == x.shape
        assert len(result.losses) == 6

    def test_perturbation_lowers_loss(self, model, theta, batch, transform):
        x, y = batch
        cfg = PerturbationConfig(rho_max=16.0, iterations=10, eta_u=0.0)
        result = generate_perturbation(theta, x, y, cfg, 1, model, transform)
        assert result.losses[-1] <= result.losses[0]

    def test_x_perturbed_is_normalized_shift(self, model, theta, batch, transform):
        x, y = batch
        result = generate_perturbation(theta, x, y, PerturbationConfig(), 2, model, transform)
        np.testing.assert_allclose(result.x_perturbed, normalize(transform, x + result.delta / PIXEL_SCALE))

    def test_deterministic_per_seed(self, model, theta, batch, transform):
        x, y = batch
        a = generate_perturbation(theta, x, y, PerturbationConfig(), 5, model, transform)
        b = generate_perturbation(theta, x, y, PerturbationConfig(), 5, model, transform)
        np.testing.assert_array_equal(a.delta, b.delta)
        assert a.theta_u.equals(b.theta_u)

    @pytest.mark.parametrize("scale", [0.125, 8.0, 1024.0])
    def test_sign_steps_ignore_loss_scale(self, model, theta, batch, transform, scale):
        x, y = batch
        cfg = PerturbationConfig(rho_max=8.0, iterations=5)
        plain = generate_perturbation(theta, x, y, cfg, 6, model, transform)
        scaled = generate_perturbation(theta, x, y, cfg, 6, model, transform, loss_scale=scale)
        np.testing.assert_array_equal(scaled.delta, plain.delta)
        assert scaled.theta_u.equals(plain.theta_u)

    def test_global_model_not_mutated(self, model, theta, batch, transform):
        x, y = batch
        before = theta.flatten().copy()
        result = generate_perturbation(theta, x, y, PerturbationConfig(eta_u=0.5), 0, model, transform)
        np.testing.assert_array_equal(theta.flatten(), before)
        assert not result.theta_u.equals(theta)

    def test_zero_radius_is_clean_input(self, model, theta, batch, transform):
        x, y = batch
        cfg = PerturbationConfig(rho_max=0.0)
        result = generate_perturbation(theta, x, y, cfg, 0, model, transform)
        np.testing.assert_array_equal(result.x_perturbed, normalize(transform, x))

    def test_non_finite_model_aborts(self, model, theta, batch, transform):
        x, y = batch
        broken = ParameterSet.from_flat(theta, np.full(theta.size, np.inf))
        with pytest.raises(PerturbationError) as info:
            generate_perturbation(broken, x, y, PerturbationConfig(), 0, model, transform, client_id=3)
        assert info.value.client_id == 3
        assert info.value.step == 0


# Noise Tests
class TestClip:
    """L2 clipping."""

    def test_clip_scales_down(self, gradient):
        clipped = clip_gradient(gradient, 1.0)
        assert clipped.norm() <= 1.0
        np.testing.assert_allclose(clipped["w"], gradient["w"] / 5.0, rtol=1e-12)

    def test_small_gradient_untouched(self, gradient):
        assert clip_gradient(gradient, 10.0) is gradient

    def test_non_positive_bound(self, gradient):
        with pytest.raises(ValueError):
            clip_gradient(gradient, 0.0)

    def test_bound_holds_for_many_vectors(self):
        rng = np.random.default_rng(0)
        template = GradientVector([("v", np.zeros(17))])
        for _ in range(1000):
            g = GradientVector.from_flat(template, rng.normal(scale=rng.uniform(0.1, 50), size=17))
            bound = rng.uniform(0.01, 3.0)
            assert clip_gradient(g, bound).norm() <= bound


class TestSamplers:
    """Noise moments."""

    DRAWS = 200_000

    def test_gaussian_moments(self):
        z = GaussianSampler(2.0).sample((self.DRAWS,), np.random.default_rng(0))
        assert abs(z.mean()) < 3.9 * 2.0 / math.sqrt(self.DRAWS)
        assert abs(np.mean(z * z) - 4.0) < 3.9 * math.sqrt(2.0 * 16.0 / self.DRAWS)

    def test_laplace_moments(self):
        b = 0.5
        z = LaplaceSampler(b).sample((self.DRAWS,), np.random.default_rng(1))
        assert abs(z.mean()) < 3.9 * math.sqrt(2.0 * b ** 2 / self.DRAWS)
        assert abs(np.mean(z * z) - 2.0 * b ** 2) < 3.9 * math.sqrt(20.0 * b ** 4 / self.DRAWS)

    def test_odd_count_shape(self):
        assert GaussianSampler(1.0).sample((3, 5), np.random.default_rng(0)).shape == (3, 5)

    def test_negative_scale(self):
        with pytest.raises(ValueError):
            LaplaceSampler(-1.0)


class TestPrivatize:
    """Clip-then-noise pipeline."""

    def test_zero_scale_is_identity(self, gradient):
        spec = NoiseSpec(mechanism=NoiseMechanism.GAUSSIAN, scale=0.0)
        assert add_noise(gradient, spec, np.random.default_rng(0)) is gradient

    def test_same_generator_state_same_noise(self, gradient):
        spec = NoiseSpec(mechanism=NoiseMechanism.LAPLACE, scale=0.1)
        a = add_noise(gradient, spec, np.random.default_rng(3))
        b = add_noise(gradient, spec, np.random.default_rng(3))
        assert a.equals(b)
        assert not a.equals(gradient)

    @pytest.mark.parametrize("mechanism", [NoiseMechanism.GAUSSIAN, NoiseMechanism.LAPLACE])
    def test_client_noise_is_uncorrelated(self, mechanism):
        spec = NoiseSpec(mechanism=mechanism, scale=0.5)
        zero = GradientVector([("w", np.zeros(50))])
        streams = SeedStreams(11)
        rounds = range(1, 2001)
        first = np.concatenate(
            [add_noise(zero, spec, streams.generator("train/noise", 0, r, 0)).flatten() for r in rounds]
        )
        second = np.concatenate(
            [add_noise(zero, spec, streams.generator("train/noise", 1, r, 0)).flatten() for r in rounds]
        )
        correlation = np.corrcoef(first, second)[0, 1]
        assert abs(correlation) < CLT_BOUND / math.sqrt(first.size)

    def test_clip_without_noise(self, gradient):
        spec = NoiseSpec(mechanism=NoiseMechanism.NONE, clip=2.5)
        assert privatize(gradient, spec, np.random.default_rng(0)).norm() == pytest.approx(2.5)


# Strategy Tests
class TestDefenseConfig:
    """Method and noise settings."""

    def test_mechanism_follows_method(self):
        config = DefenseConfig(method=DefenseMethod.LDP_LAPLACE, noise=NoiseSpec(scale=0.1))
        assert config.noise.mechanism == NoiseMechanism.LAPLACE

    def test_dp_clip_needs_bound(self):
        with pytest.raises(ValidationError):
            DefenseConfig(method=DefenseMethod.DP_CLIP, noise=NoiseSpec(scale=0.1))

    def test_conflicting_mechanism(self):
        with pytest.raises(ValidationError):
            DefenseConfig(
                method=DefenseMethod.LDP_GAUSSIAN,
                noise=NoiseSpec(mechanism=NoiseMechanism.LAPLACE, scale=0.1),
            )

    def test_build_defense_types(self, model, transform):
        streams = SeedStreams(0)
        cases = {
            DefenseMethod.NONE: NoDefense,
            DefenseMethod.FEDEM: FedEMDefense,
            DefenseMethod.LDP_GAUSSIAN: NoiseDefense,
        }
        for method, cls in cases.items():
            assert isinstance(build_defense(DefenseConfig(method=method), model, transform, streams), cls)


class TestUploads:
    """Client uploads under each defense."""

    def test_no_defense_is_plain_gradient(self, model, theta, batch, transform):
        x, y = batch
        upload = build_defense(DefenseConfig(), model, transform, SeedStreams(0)).upload(theta, x, y, 0, 1)
        expected, _ = model.gradient(theta, normalize(transform, x), y)
        assert upload.gradient.equals(expected)
        assert upload.delta is None
        assert upload.num_examples == 3

    def test_fedem_upload_keeps_delta(self, model, theta, batch, transform):
        x, y = batch
        defense = build_defense(DefenseConfig(method=DefenseMethod.FEDEM), model, transform, SeedStreams(0))
        upload = defense.upload(theta, x, y, 2, 1)
        assert upload.delta.shape == x.shape
        expected, _ = model.gradient(theta, upload.inputs, y)
        assert upload.gradient.equals(expected)

    def test_fedem_streams_differ_per_round(self, model, theta, batch, transform):
        x, y = batch
        defense = build_defense(DefenseConfig(method=DefenseMethod.FEDEM), model, transform, SeedStreams(0))
        first = defense.upload(theta, x, y, 0, 1)
        again = defense.upload(theta, x, y, 0, 1)
        later = defense.upload(theta, x, y, 0, 2)
        np.testing.assert_array_equal(first.delta, again.delta)
        assert not np.array_equal(first.delta, later.delta)

    def test_probe_noise_is_independent_of_training_noise(self, model, theta, batch, transform):
        x, y = batch
        config = DefenseConfig(method=DefenseMethod.LDP_GAUSSIAN, noise=NoiseSpec(scale=0.1))
        defense = build_defense(config, model, transform, SeedStreams(0))
        train = defense.upload(theta, x, y, 0, 1)
        probe = defense.upload(theta, x, y, 0, 1, purpose="probe")
        assert not train.gradient.equals(probe.gradient)

    def test_noise_differs_between_clients(self, model, theta, batch, transform):
        x, y = batch
        config = DefenseConfig(method=DefenseMethod.LDP_LAPLACE, noise=NoiseSpec(scale=0.1))
        defense = build_defense(config, model, transform, SeedStreams(0))
        assert not defense.upload(theta, x, y, 0, 1).gradient.equals(defense.upload(theta, x, y, 1, 1).gradient)

    def test_dp_clip_bounds_before_noise(self, model, theta, batch, transform):
        x, y = batch
        config = DefenseConfig(method=DefenseMethod.DP_CLIP, noise=NoiseSpec(scale=0.0, clip=1e-3))
        upload = build_defense(config, model, transform, SeedStreams(0)).upload(theta, x, y, 0, 1)
        assert upload.gradient.norm() <= 1e-3


class TestSampleBatch:
    """Per-round batch selection."""

    def test_full_shard_when_unset(self):
        indices = np.array([5, 2, 9])
        np.testing.assert_array_equal(sample_batch(indices, None, np.random.default_rng(0)), indices)

    def test_subset_is_sorted_and_unique(self):
        out = sample_batch(np.arange(100), 10, np.random.default_rng(0))
        assert len(set(out.tolist())) == 10
        assert np.all(np.diff(out) > 0)
