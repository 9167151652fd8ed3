"""
Shared pytest fixtures: micro-scale configs, a tiny demonstration set and an
untrained video model, all rooted in a per-test temporary output directory.
"""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parent
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from svam.config import load_config  # noqa: E402
from svam.video_diffusion import build_video_model  # noqa: E402
from svam.world_sim import TabletopWorld, generate_dataset  # noqa: E402

MICRO_CONFIG = ROOT / "config" / "micro.json"


@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    for name in ("SVAM_CONFIG", "SVAM_SEED", "SVAM_OUT_DIR", "SVAM_LOG_LEVEL"):
        monkeypatch.delenv(name, raising=False)


@pytest.fixture
def micro_config(tmp_path):
    return load_config(str(MICRO_CONFIG), seed=0, out_dir=str(tmp_path / "run"))


@pytest.fixture
def world(micro_config):
    return TabletopWorld(micro_config.world)


@pytest.fixture(scope="session")
def micro_dataset():
    config = load_config(str(MICRO_CONFIG), seed=0)
    return generate_dataset(TabletopWorld(config.world), 4, config.world.dataset_tasks, seed=0)


@pytest.fixture
def video_model(micro_config):
    return build_video_model(micro_config, seed=0)
