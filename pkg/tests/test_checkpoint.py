"""Tests for the checkpoint container and its file format."""

import numpy as np
import pytest

from svam import nn
from svam.checkpoint import CHECKPOINT_MAGIC, Checkpoint, load_checkpoint
from svam.errors import CheckpointMismatchError
from svam.tensor_autograd import AdamState, rng_stream


@pytest.fixture
def layer():
    return nn.Linear(4, 3, rng_stream(0, "test", "ckpt"))


class TestCheckpointFile:
    def test_saved_module_loads_into_fresh_module(self, layer, tmp_path):
        ckpt = Checkpoint(config_hash=123)
        ckpt.add_module("layer", layer)
        ckpt.save(tmp_path / "a.ckpt")

        fresh = nn.Linear(4, 3, rng_stream(1, "other"))
        load_checkpoint(tmp_path / "a.ckpt", expected_hash=123).load_module("layer", fresh)
        assert fresh.checksum() == layer.checksum()

    def test_file_starts_with_magic(self, layer, tmp_path):
        ckpt = Checkpoint(config_hash=1)
        ckpt.add_module("layer", layer)
        ckpt.save(tmp_path / "a.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes()[:8] == CHECKPOINT_MAGIC

    def test_hash_mismatch_reports_both_hashes(self, layer, tmp_path):
        ckpt = Checkpoint(config_hash=7)
        ckpt.add_module("layer", layer)
        ckpt.save(tmp_path / "a.ckpt")
        with pytest.raises(CheckpointMismatchError) as info:
            load_checkpoint(tmp_path / "a.ckpt", expected_hash=8)
        assert info.value.expected_hash == 8
        assert info.value.found_hash == 7

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(tmp_path / "absent.ckpt")

    def test_truncated_file_raises(self, layer, tmp_path):
        ckpt = Checkpoint(config_hash=7)
        ckpt.add_module("layer", layer)
        ckpt.save(tmp_path / "a.ckpt")
        payload = (tmp_path / "a.ckpt").read_bytes()
        (tmp_path / "b.ckpt").write_bytes(payload[:len(payload) // 2])
        with pytest.raises(CheckpointMismatchError):
            load_checkpoint(tmp_path / "b.ckpt")


class TestCheckpointContents:
    def test_missing_prefix_raises(self, layer):
        with pytest.raises(CheckpointMismatchError):
            Checkpoint(config_hash=0).load_module("layer", layer)

    def test_has_prefix(self, layer):
        ckpt = Checkpoint(config_hash=0)
        ckpt.add_module("decoupler.geo", layer)
        assert ckpt.has("decoupler.geo")
        assert not ckpt.has("decoupler.sem")

    def test_optimizer_state_round_trip(self, layer, tmp_path):
        state = AdamState.for_parameters(layer.parameters())
        state.step_count = 5
        for name in state.first_moment:
            state.first_moment[name] = np.full_like(state.first_moment[name], 0.25)
        ckpt = Checkpoint(config_hash=0)
        ckpt.add_optimizer("vdm", state)
        ckpt.save(tmp_path / "o.ckpt")

        restored = AdamState.for_parameters(layer.parameters())
        load_checkpoint(tmp_path / "o.ckpt").load_optimizer("vdm", restored)
        assert restored.step_count == 5
        for name in state.first_moment:
            np.testing.assert_array_equal(restored.first_moment[name], state.first_moment[name])

    def test_missing_optimizer_state_raises(self, layer):
        with pytest.raises(CheckpointMismatchError):
            Checkpoint(config_hash=0).load_optimizer("vdm", AdamState.for_parameters(layer.parameters()))
