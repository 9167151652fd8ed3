"""Tests for the decouplers, their inputs and targets, the teacher cache and stage 2."""

import numpy as np
import pytest

from svam import tensor_autograd as ta
from svam.config import DecouplerSettings
from svam.decouplers import (BRANCHES, Decoupler, TeacherCache, build_decouplers, build_distillation_bank,
                             decoupler_step, distill_loss, distill_targets, fuse_input, model_hash,
                             reference_anchor, register_target_encoder, sample_seed, train_decouplers,
                             unregister_target_encoder)
from svam.errors import ConfigError, DatasetError, GradientError, ShapeError, SvamError
from svam.tensor_autograd import AdamState, Tensor
from svam.video_diffusion import initial_noise, noise_digest
from svam.world_sim import phi_geo, semantic_embeddings


def random_tensor(shape, seed=0):
    return Tensor(np.random.default_rng(seed).standard_normal(shape))


class TestAnchors:
    def test_empty_scene_geometry_is_outside(self):
        anchor = reference_anchor(np.zeros((16, 16, 3)), "geo", 2)
        assert anchor.shape == (1, 4, 2, 2)
        assert (anchor.data[0, 0] > 0).all()

    def test_empty_scene_semantics_is_background_embedding(self):
        anchor = reference_anchor(np.zeros((16, 16, 3)), "sem", 2)
        expected = semantic_embeddings(6)[0]
        np.testing.assert_allclose(anchor.data[0].reshape(8, -1).T, np.tile(expected, (4, 1)), atol=1e-6)

    def test_unknown_branch_raises(self):
        with pytest.raises(ConfigError):
            reference_anchor(np.zeros((16, 16, 3)), "depth", 2)

    @pytest.fixture
    def scratch_encoders(self):
        names = []

        def register(name, fn, channels):
            names.append(name)
            register_target_encoder(name, fn, channels)

        yield register
        for name in names:
            unregister_target_encoder(name)

    def test_registered_encoder_is_used(self, scratch_encoders):
        def constant(frames, target, n_classes):
            return Tensor(np.ones((len(frames), 2) + tuple(target)))

        scratch_encoders("flat", constant, 2)
        anchor = reference_anchor(np.zeros((16, 16, 3)), "flat", 2)
        assert anchor.shape == (1, 2, 2, 2)
        assert (anchor.data == 1).all()

    def test_encoder_channel_mismatch_raises(self, scratch_encoders):
        scratch_encoders("wrong", lambda frames, target, n_classes: Tensor(np.ones((1, 3) + target)), 2)
        with pytest.raises(ShapeError):
            reference_anchor(np.zeros((16, 16, 3)), "wrong", 2)

    def test_unregistered_encoder_is_gone(self):
        register_target_encoder("temp", lambda frames, target, n_classes: Tensor(np.ones((1, 1) + target)), 1)
        unregister_target_encoder("temp")
        with pytest.raises(ConfigError):
            reference_anchor(np.zeros((16, 16, 3)), "temp", 2)

    def test_builtin_encoders_cannot_be_removed(self):
        with pytest.raises(ConfigError):
            unregister_target_encoder("geo")
        assert reference_anchor(np.zeros((16, 16, 3)), "geo", 2).shape == (1, 4, 2, 2)


class TestFuseInput:
    def test_appends_anchor_to_every_frame(self):
        features = random_tensor((1, 2, 20, 2, 2))
        anchor = random_tensor((1, 1, 4, 2, 2), seed=1)
        fused = fuse_input(features, anchor)
        assert fused.shape == (1, 2, 24, 2, 2)
        for t in range(2):
            np.testing.assert_array_equal(fused.data[:, t, 20:], anchor.data[:, 0])
            np.testing.assert_array_equal(fused.data[:, t, :20], features.data[:, t])

    def test_single_frame(self):
        fused = fuse_input(random_tensor((1, 1, 20, 2, 2)), random_tensor((1, 1, 8, 2, 2)))
        assert fused.shape == (1, 1, 28, 2, 2)

    def test_spatial_mismatch_raises(self):
        with pytest.raises(ShapeError):
            fuse_input(random_tensor((1, 2, 20, 2, 2)), random_tensor((1, 1, 4, 4, 4)))


class TestDecoupler:
    @pytest.fixture
    def decouplers(self, micro_config):
        return build_decouplers(micro_config, seed=0)

    def test_output_shapes(self, decouplers):
        assert decouplers["geo"](random_tensor((3, 2, 24, 2, 2))).shape == (3, 2, 4, 2, 2)
        assert decouplers["sem"](random_tensor((3, 2, 28, 2, 2))).shape == (3, 2, 8, 2, 2)

    def test_unbatched_input(self, decouplers):
        assert decouplers["geo"](random_tensor((2, 24, 2, 2))).shape == (2, 4, 2, 2)

    def test_branches_have_independent_parameters(self, decouplers):
        geo_ids = {id(p) for p in decouplers["geo"].parameters().values()}
        sem_ids = {id(p) for p in decouplers["sem"].parameters().values()}
        assert not geo_ids & sem_ids

    def test_spatial_permutation_equivariance_without_positions(self):
        settings = DecouplerSettings(blocks=1, hidden=8, heads=2)
        decoupler = Decoupler(12, 4, settings, frames=2, size=4, rng=ta.rng_stream(0, "test"))
        decoupler.pos.data[...] = 0.0
        x = random_tensor((1, 2, 12, 4, 4), seed=3)
        flipped = Tensor(x.data[..., ::-1].copy())
        out = decoupler(x).data
        out_flipped = decoupler(flipped).data
        np.testing.assert_allclose(out_flipped, out[..., ::-1], atol=1e-5)

    def test_anchor_changes_output(self, decouplers):
        features = random_tensor((1, 2, 20, 2, 2))
        a = decouplers["geo"](fuse_input(features, random_tensor((1, 1, 4, 2, 2), seed=4))).data
        b = decouplers["geo"](fuse_input(features, random_tensor((1, 1, 4, 2, 2), seed=5))).data
        assert not np.allclose(a, b)

    def test_gradient_check(self, decouplers):
        decoupler = decouplers["geo"]
        fused, target = random_tensor((2, 2, 24, 2, 2), seed=6), random_tensor((2, 2, 4, 2, 2), seed=7)

        def loss_fn():
            return distill_loss(decoupler(Tensor(fused.data)), Tensor(target.data))

        report = ta.grad_check(loss_fn, decoupler.parameters(), tol=1e-3, max_entries=6)
        assert report.passed, report.errors


class TestDistillLoss:
    def test_identical_inputs_give_zero(self):
        x = random_tensor((2, 2, 4, 2, 2))
        assert distill_loss(x, x).item() == 0.0

    def test_zero_against_ones(self):
        assert distill_loss(Tensor(np.zeros((2, 4))), Tensor(np.ones((2, 4)))).item() == pytest.approx(1.0)

    def test_symmetric(self):
        a, b = random_tensor((3, 5), seed=1), random_tensor((3, 5), seed=2)
        assert distill_loss(a, b).item() == pytest.approx(distill_loss(b, a).item())

    def test_gradient_is_scaled_residual(self):
        rng = np.random.default_rng(8)
        prediction = Tensor(rng.standard_normal((2, 2, 4, 2, 2)), requires_grad=True)
        target = Tensor(rng.standard_normal((2, 2, 4, 2, 2)))
        distill_loss(prediction, target).backward()
        expected = 2.0 * (prediction.data - target.data) / prediction.data.size
        np.testing.assert_allclose(prediction.grad, expected, rtol=1e-5, atol=1e-7)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(9)
        with ta.float64_mode():
            prediction = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
            target = Tensor(rng.standard_normal((3, 4)))
            report = ta.grad_check(lambda: distill_loss(prediction, target), {"prediction": prediction}, tol=1e-6)
        assert report.passed, report.errors


class TestDistillTargets:
    def test_ground_truth_mode_encodes_future_frames(self, micro_dataset):
        future = micro_dataset.frames[0, [2, 4]]
        target = distill_targets(micro_dataset.frames[0, 0], 1, "gt", "geo", seed=0, size=2, future_frames=future)
        np.testing.assert_array_equal(target.data, phi_geo(future, (2, 2)).data)

    def test_ground_truth_without_frames_raises(self, micro_dataset):
        with pytest.raises(DatasetError):
            distill_targets(micro_dataset.frames[0, 0], 1, "gt", "geo", seed=0, size=2)

    def test_unknown_mode_raises(self, micro_dataset):
        with pytest.raises(ConfigError):
            distill_targets(micro_dataset.frames[0, 0], 1, "oracle", "geo", seed=0, size=2)

    def test_self_mode_needs_model(self, micro_dataset):
        with pytest.raises(SvamError):
            distill_targets(micro_dataset.frames[0, 0], 1, "self", "sem", seed=0, size=2)

    def test_self_mode_shape(self, micro_dataset, video_model):
        denoiser, codec, schedule = video_model
        target = distill_targets(micro_dataset.frames[0, 0], 1, "self", "sem", seed=11, size=2,
                                 denoiser=denoiser, codec=codec, schedule=schedule)
        assert target.shape == (2, 8, 2, 2)


class TestTeacherCache:
    def test_hit_after_store(self, tmp_path):
        cache = TeacherCache(tmp_path, model_hash=42, video_shape=(2, 16, 16, 3))
        video = np.random.default_rng(0).random((2, 16, 16, 3)).astype(np.float32)
        digest = noise_digest(initial_noise(99, (2, 4, 4, 4)))
        cache.store(3, 7, 99, video, digest)
        cached, cached_digest = cache.load(3, 7, 99)
        np.testing.assert_array_equal(cached, video)
        assert cached_digest == digest
        assert (cache.hits, cache.misses) == (1, 0)

    def test_miss_on_absent_seed_or_model(self, tmp_path):
        cache = TeacherCache(tmp_path, model_hash=42, video_shape=(2, 16, 16, 3))
        cache.store(0, 0, 5, np.zeros((2, 16, 16, 3)), "00" * 8)
        assert cache.load(0, 1, 5) is None
        assert cache.load(0, 0, 6) is None
        other_model = TeacherCache(tmp_path, model_hash=43, video_shape=(2, 16, 16, 3))
        assert other_model.load(0, 0, 5) is None
        assert cache.misses == 2 and other_model.misses == 1

    def test_model_hash_tracks_parameters(self, video_model):
        denoiser, _, _ = video_model
        before = model_hash(denoiser)
        denoiser.head.weight.data = denoiser.head.weight.data + 1.0
        assert model_hash(denoiser) != before


class TestDistillationBank:
    def test_self_mode_shares_trajectories(self, micro_config, micro_dataset, video_model, tmp_path):
        denoiser, codec, schedule = video_model
        cache = TeacherCache(tmp_path / "cache", model_hash(denoiser), (2, 16, 16, 3))
        bank = build_distillation_bank(denoiser, codec, schedule, micro_dataset, micro_config, "self", cache)
        assert len(bank) == micro_config.decouplers.pool
        assert bank.teacher_generated >= 1
        assert bank.teacher_generated + bank.teacher_cache_verified == len(bank)
        assert bank.features.shape == (8, 2, 20, 2, 2)
        assert bank.anchors["geo"].shape == (8, 1, 4, 2, 2)
        assert bank.targets["sem"].shape == (8, 2, 8, 2, 2)

        again = TeacherCache(tmp_path / "cache", model_hash(denoiser), (2, 16, 16, 3))
        rebuilt = build_distillation_bank(denoiser, codec, schedule, micro_dataset, micro_config, "self", again)
        assert again.hits == len(bank) and again.misses == 0
        assert (rebuilt.teacher_generated, rebuilt.teacher_cache_verified) == (0, len(bank))
        for branch in BRANCHES:
            np.testing.assert_array_equal(rebuilt.targets[branch], bank.targets[branch])

    def test_teacher_video_matches_sampler_from_feature_noise(self, micro_config, micro_dataset, video_model):
        denoiser, codec, schedule = video_model
        bank = build_distillation_bank(denoiser, codec, schedule, micro_dataset, micro_config, "self")
        e, a, seed = int(bank.episodes[0]), int(bank.anchors_t[0]), int(bank.seeds[0])
        target = distill_targets(micro_dataset.frames[e, a], int(micro_dataset.task_ids[e]), "self", "sem",
                                 seed=seed, size=2, denoiser=denoiser, codec=codec, schedule=schedule)
        np.testing.assert_allclose(bank.targets["sem"][0], target.data, atol=1e-5)

    def test_cached_video_from_other_noise_raises(self, micro_config, micro_dataset, video_model, tmp_path):
        denoiser, codec, schedule = video_model
        cache = TeacherCache(tmp_path / "cache", model_hash(denoiser), (2, 16, 16, 3))
        build_distillation_bank(denoiser, codec, schedule, micro_dataset, micro_config, "self", cache)
        for path in (tmp_path / "cache").iterdir():
            payload = bytearray(path.read_bytes())
            payload[24:32] = bytes(8)
            path.write_bytes(bytes(payload))
        stale = TeacherCache(tmp_path / "cache", model_hash(denoiser), (2, 16, 16, 3))
        with pytest.raises(SvamError):
            build_distillation_bank(denoiser, codec, schedule, micro_dataset, micro_config, "self", stale)

    def test_ground_truth_mode(self, micro_config, micro_dataset, video_model):
        denoiser, codec, schedule = video_model
        bank = build_distillation_bank(denoiser, codec, schedule, micro_dataset, micro_config, "gt")
        assert (bank.teacher_generated, bank.teacher_cache_verified) == (0, 0)
        assert bank.targets["geo"].shape == (8, 2, 4, 2, 2)

    def test_sample_seed_is_stable(self):
        assert sample_seed(0, 1, 2) == sample_seed(0, 1, 2)
        assert sample_seed(0, 1, 2) != sample_seed(0, 1, 3)


class TestStage2Training:
    def test_step_leaves_other_branch_untouched(self, micro_config):
        decouplers = build_decouplers(micro_config, seed=0)
        geo, sem = decouplers["geo"], decouplers["sem"]
        optimizer = AdamState.for_parameters(geo.parameters())
        loss = decoupler_step(geo, optimizer, random_tensor((2, 2, 24, 2, 2)), random_tensor((2, 2, 4, 2, 2)), [sem])
        assert np.isfinite(loss)
        assert all(p.grad is None for p in sem.parameters().values())

    def test_gradient_in_other_branch_raises(self, micro_config):
        decouplers = build_decouplers(micro_config, seed=0)
        geo, sem = decouplers["geo"], decouplers["sem"]
        next(iter(sem.parameters().values())).grad = np.zeros(1)
        optimizer = AdamState.for_parameters(geo.parameters())
        with pytest.raises(GradientError):
            decoupler_step(geo, optimizer, random_tensor((2, 2, 24, 2, 2)), random_tensor((2, 2, 4, 2, 2)), [sem])
        assert optimizer.step_count == 0

    def test_train_runs_to_step_count(self, micro_config, micro_dataset, video_model):
        denoiser, codec, schedule = video_model
        bank = build_distillation_bank(denoiser, codec, schedule, micro_dataset, micro_config, "gt")
        decouplers = build_decouplers(micro_config, seed=0)
        optimizers = {b: AdamState.for_parameters(decouplers[b].parameters()) for b in BRANCHES}
        losses = train_decouplers(decouplers, bank, micro_config, optimizers, steps=3)
        assert [step for step, _ in losses["geo"]] == [0, 1, 2]
        assert all(opt.step_count == 3 for opt in optimizers.values())
