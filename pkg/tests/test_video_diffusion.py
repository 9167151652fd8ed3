"""Tests for the noise schedule, reverse sampler, codec, denoiser and one-step features."""

import math

import numpy as np
import pytest

from svam import tensor_autograd as ta
from svam.config import RunConfig
from svam.errors import NumericalError, ShapeError, SvamError
from svam.tensor_autograd import AdamState, Tensor
from svam.video_diffusion import (PatchCodec, ddpm_sample, future_clip_indices, initial_noise, latent_shape,
                                  make_noise_schedule, make_video_batch, merge_2x2, noise_digest,
                                  one_step_features, reverse_process, train_vdm_step, unmerge_2x2)
from svam.world_sim import TabletopWorld


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    return 10.0 * math.log10(1.0 / mse)


class TestNoiseSchedule:
    def test_alpha_bar_decreasing_and_small_at_end(self):
        schedule = make_noise_schedule(20)
        assert np.all(np.diff(schedule.alpha_bars) < 0)
        assert schedule.alpha_bar(20) < 0.1

    def test_full_length_is_plain_linear_schedule(self):
        schedule = make_noise_schedule(1000)
        np.testing.assert_allclose(schedule.betas, np.linspace(1e-4, 0.02, 1000), atol=1e-9)

    def test_step_outside_range_raises(self):
        with pytest.raises(SvamError):
            make_noise_schedule(4).alpha(5)


class TestReverseProcess:
    def test_oracle_noise_recovers_clean_latent(self):
        schedule = make_noise_schedule(20)
        rng = np.random.default_rng(0)
        z0 = rng.standard_normal((2, 4, 4, 4))
        noise = rng.standard_normal(z0.shape)
        z_start = math.sqrt(schedule.alpha_bar(20)) * z0 + math.sqrt(1 - schedule.alpha_bar(20)) * noise

        def oracle(z, s):
            ab = schedule.alpha_bar(s)
            return (z - math.sqrt(ab) * z0) / math.sqrt(1 - ab)

        out = reverse_process(oracle, z_start, schedule, deterministic=True)
        assert np.abs(out - z0).max() < 1e-4

    def test_single_step_is_one_update(self):
        schedule = make_noise_schedule(1)
        calls = []

        def eps_fn(z, s):
            calls.append(s)
            return np.ones_like(z)

        x = np.full((3,), 2.0)
        out = reverse_process(eps_fn, x, schedule, noise_fn=lambda s: np.zeros(3))
        a, ab = schedule.alpha(1), schedule.alpha_bar(1)
        np.testing.assert_allclose(out, (x - (1 - a) / math.sqrt(1 - ab)) / math.sqrt(a))
        assert calls == [1]

    def test_nan_names_step(self):
        schedule = make_noise_schedule(5)

        def eps_fn(z, s):
            return np.full_like(z, np.nan) if s == 3 else np.zeros_like(z)

        with pytest.raises(NumericalError) as info:
            reverse_process(eps_fn, np.zeros(2), schedule, noise_fn=lambda s: np.zeros(2))
        assert info.value.step == 3


class TestPatchCodec:
    @pytest.fixture(scope="class")
    def codec_and_frames(self):
        config = RunConfig()
        codec = PatchCodec.fitted(config)
        world = TabletopWorld(config.world)
        frames = world.rollout_expert(12345, 1, 16).frames
        return codec, frames

    def test_reconstruction_psnr(self, codec_and_frames):
        codec, _ = codec_and_frames
        world = TabletopWorld(RunConfig().world)
        episodes = [world.rollout_expert(500 + i, task, 16).frames for task in (0, 1, 2) for i in range(2)]
        scores = [psnr(codec.decode(codec.encode(frames)), frames) for frames in episodes]
        pooled = np.concatenate(episodes)
        assert psnr(codec.decode(codec.encode(pooled)), pooled) > 21.0
        assert min(scores) > 19.5, scores

    def test_zero_frames_zero_latent(self, codec_and_frames):
        codec, _ = codec_and_frames
        z = codec.encode(np.zeros((2, 32, 32, 3)))
        assert z.shape == (2, 8, 8, 8)
        assert not z.any()
        assert not codec.decode(z).any()

    def test_basis_orthonormal_and_deterministic(self, codec_and_frames):
        codec, frames = codec_and_frames
        np.testing.assert_allclose(codec.basis.T @ codec.basis, np.eye(8), atol=1e-5)
        np.testing.assert_array_equal(PatchCodec.fitted(RunConfig()).encode(frames), codec.encode(frames))

    def test_wrong_frame_size_raises(self, codec_and_frames):
        codec, _ = codec_and_frames
        with pytest.raises(ShapeError):
            codec.encode(np.zeros((16, 16, 3)))


class TestDenoiser:
    def test_output_and_tap_shapes(self, micro_config, video_model):
        denoiser, _, _ = video_model
        z = Tensor(np.zeros((3,) + latent_shape(micro_config)))
        eps, taps = denoiser(z, [1, 2, 4], np.zeros((3, 4, 4, 4)), [0, 1, 2])
        assert eps.shape == z.shape
        assert [t.shape for t in taps] == [(3, 2, 8, 2, 2), (3, 2, 8, 4, 4), (3, 2, 4, 4, 4)]

    def test_invalid_step_raises(self, micro_config, video_model):
        denoiser, _, _ = video_model
        z = Tensor(np.zeros((1,) + latent_shape(micro_config)))
        with pytest.raises(SvamError):
            denoiser(z, [5], np.zeros((1, 4, 4, 4)), [1])

    def test_merge_then_unmerge_is_identity(self):
        x = Tensor(np.random.default_rng(1).standard_normal((1, 2, 16, 3)))
        np.testing.assert_array_equal(unmerge_2x2(merge_2x2(x, 4, 4), 4, 4).data, x.data)

    def test_gradient_check_micro(self, micro_config, video_model):
        denoiser, _, _ = video_model
        rng = np.random.default_rng(2)
        z = rng.standard_normal((1,) + latent_shape(micro_config))
        obs = rng.standard_normal((1, 4, 4, 4))
        target = rng.standard_normal(z.shape)

        def loss_fn():
            eps, _ = denoiser(Tensor(z), [4], Tensor(obs), [1])
            return ta.mse(eps, Tensor(target))

        report = ta.grad_check(loss_fn, denoiser.parameters(), tol=1e-3, max_entries=4)
        assert report.passed, report.errors


class TestTrainVdmStep:
    def _batch(self, dataset, config):
        return make_video_batch(dataset, np.array([0, 1, 2, 3]), np.array([0, 3, 7, 14]),
                                config.vdm.frames, config.world.frame_stride)

    def test_initial_loss_near_one(self, micro_config, video_model, micro_dataset):
        denoiser, codec, schedule = video_model
        optimizer = AdamState.for_parameters(denoiser.parameters())
        loss = train_vdm_step(denoiser, codec, schedule, self._batch(micro_dataset, micro_config), optimizer,
                              ta.rng_stream(0, "test"))
        assert 0.7 < loss < 1.3
        assert optimizer.step_count == 1

    def test_deterministic_given_seed(self, micro_config, micro_dataset):
        from svam.video_diffusion import build_video_model

        losses = []
        for _ in range(2):
            denoiser, codec, schedule = build_video_model(micro_config, seed=3)
            optimizer = AdamState.for_parameters(denoiser.parameters())
            batch = self._batch(micro_dataset, micro_config)
            losses.append([train_vdm_step(denoiser, codec, schedule, batch, optimizer, ta.rng_stream(3, "t", i))
                           for i in range(2)])
        assert losses[0] == losses[1]

    def test_future_clip_indices_clamp(self):
        np.testing.assert_array_equal(future_clip_indices(10, 4, 2, 16), [12, 14, 15, 15])


class TestSampling:
    def test_ddpm_sample_calls_denoiser_s_times(self, micro_dataset, video_model):
        denoiser, codec, schedule = video_model
        obs = micro_dataset.frames[0, 0]
        denoiser.reset_calls()
        video, z0 = ddpm_sample(denoiser, codec, schedule, obs, 1, seed=9)
        assert denoiser.calls == schedule.steps
        assert video.shape == (2, 16, 16, 3)
        assert z0.shape == (2, 4, 4, 4)

    def test_same_seed_same_video(self, micro_dataset, video_model):
        denoiser, codec, schedule = video_model
        obs = micro_dataset.frames[0, 0]
        first, _ = ddpm_sample(denoiser, codec, schedule, obs, 1, seed=9)
        second, _ = ddpm_sample(denoiser, codec, schedule, obs, 1, seed=9)
        np.testing.assert_array_equal(first, second)

    def test_one_step_features_single_call(self, micro_config, micro_dataset, video_model):
        denoiser, codec, schedule = video_model
        denoiser.reset_calls()
        features = one_step_features(denoiser, codec, schedule, micro_dataset.frames[0, 0], 1, seed=9,
                                     size=micro_config.vdm.feature_size)
        assert denoiser.calls == 1
        assert features.shape == (2, micro_config.feature_channels, 2, 2)
        assert micro_config.feature_channels == 20

    def test_feature_and_sample_share_initial_noise(self, micro_config):
        shape = latent_shape(micro_config)
        assert noise_digest(initial_noise(5, shape)) == noise_digest(initial_noise(5, shape))
        assert noise_digest(initial_noise(5, shape)) != noise_digest(initial_noise(6, shape))
