#!/usr/bin/env python3
"""
Test the MCP tools by calling them directly (no transport).
"""

import json
from pathlib import Path

import pytest

from svam import mcp_server

MICRO = str(Path(__file__).resolve().parent.parent / "config" / "micro.json")


@pytest.fixture(autouse=True)
def _fresh_config_cache():
    mcp_server._config_cache.clear()
    yield
    mcp_server._config_cache.clear()


def test_health_check():
    result = json.loads(mcp_server.health_check())
    assert result["success"]
    assert set(result["checkpoints"]) == {"stage1", "stage2", "stage3"}


def test_generate_dataset(tmp_path):
    result = json.loads(mcp_server.generate_dataset(config_path=MICRO, out_dir=str(tmp_path)))
    assert result["success"], result["message"]
    assert Path(result["path"]).exists()


def test_train_stage_reports_missing_checkpoint(tmp_path):
    result = json.loads(mcp_server.train_stage(stage=2, config_path=MICRO, out_dir=str(tmp_path)))
    assert not result["success"]
    assert result["exit_code"] == 3


def test_bad_config_reports_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"policy": {"width": 30, "heads": 4}}))
    result = json.loads(mcp_server.generate_dataset(config_path=str(path), out_dir=str(tmp_path)))
    assert not result["success"]
    assert result["exit_code"] == 2


def test_config_is_cached_per_override(tmp_path):
    first = mcp_server.get_config(MICRO, 0, str(tmp_path))
    assert mcp_server.get_config(MICRO, 0, str(tmp_path)) is first
    assert mcp_server.get_config(MICRO, 1, str(tmp_path)) is not first
