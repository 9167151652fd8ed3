#!/usr/bin/env python3
"""
S-VAM Pipeline MCP Server
Exposes dataset generation, training, evaluation and benchmarking as MCP tools
so an agent can drive a run without a shell.
"""

import argparse
import json
import logging
import os
from typing import Optional

from mcp.server.fastmcp import FastMCP

from svam import pipeline_cli
from svam.action_expert import VARIANTS
from svam.config import RunConfig, load_config
from svam.errors import SvamError

logger = logging.getLogger(__name__)

mcp = FastMCP("svam-pipeline")

# Loaded configs keyed by (path, seed, out_dir)
_config_cache = {}


def get_config(config_path: Optional[str] = None, seed: Optional[int] = None,
               out_dir: Optional[str] = None) -> RunConfig:
    """Load a run config once per (path, seed, out_dir)."""
    key = (config_path or os.getenv("SVAM_CONFIG"), seed, out_dir)
    if key not in _config_cache:
        logger.info(f"Loading run config {key[0] or '<defaults>'}")
        _config_cache[key] = load_config(config_path, seed=seed, out_dir=out_dir)
    return _config_cache[key]


def _ok(message: str, **payload) -> str:
    return json.dumps({"success": True, "message": message, **payload}, default=str)


def _fail(action: str, error: Exception) -> str:
    logger.error(f"Error during {action}: {error}", exc_info=True)
    body = {"success": False, "message": f"{action} failed: {error}"}
    if isinstance(error, SvamError):
        body["exit_code"] = pipeline_cli.exit_code_for(error)
    return json.dumps(body)


@mcp.tool()
def generate_dataset(config_path: Optional[str] = None, episodes: Optional[int] = None,
                     seed: Optional[int] = None, out_dir: Optional[str] = None) -> str:
    """
    Generate scripted-expert demonstrations.

    Args:
        config_path: JSON run config (defaults to SVAM_CONFIG or built-in defaults)
        episodes: Number of episodes; defaults to world.n_episodes
        seed: Run seed override
        out_dir: Output directory override

    Returns:
        JSON with success flag and the dataset path
    """
    try:
        path = pipeline_cli.cmd_gen_data(get_config(config_path, seed, out_dir), episodes)
        return _ok(f"Dataset written to {path}", path=str(path))
    except (SvamError, OSError) as e:
        return _fail("dataset generation", e)


@mcp.tool()
def train_stage(stage: int, variant: str = "full", resume: bool = False, config_path: Optional[str] = None,
                seed: Optional[int] = None, out_dir: Optional[str] = None) -> str:
    """
    Run one training stage (1 video model, 2 decouplers, 3 action expert).

    Args:
        stage: 1, 2 or 3
        variant: Ablation variant for stages 2 and 3
        resume: Continue from the stage checkpoint
        config_path: JSON run config
        seed: Run seed override
        out_dir: Output directory override

    Returns:
        JSON with success flag, checkpoint path and the stage summary
    """
    try:
        config = get_config(config_path, seed, out_dir)
        path = pipeline_cli.cmd_train(config, stage, variant, resume)
        summary_path = path.with_name(path.stem + "_summary.json")
        summary = json.loads(summary_path.read_text(encoding="utf-8")) if summary_path.exists() else {}
        return _ok(f"Stage {stage} trained; checkpoint {path}", checkpoint=str(path), summary=summary)
    except (SvamError, OSError) as e:
        return _fail(f"stage {stage} training", e)


@mcp.tool()
def evaluate_policy(variant: str = "full", episodes: Optional[int] = None, seeds: Optional[int] = None,
                    untrained_policy: bool = False, config_path: Optional[str] = None,
                    seed: Optional[int] = None, out_dir: Optional[str] = None) -> str:
    """
    Closed-loop success rate of the trained controller.

    Args:
        variant: Ablation variant to evaluate
        episodes: Episodes per task and seed
        seeds: Number of evaluation seeds
        untrained_policy: Evaluate a freshly initialized action expert instead
        config_path: JSON run config
        seed: Run seed override
        out_dir: Output directory override

    Returns:
        JSON with success flag and the evaluation report
    """
    try:
        report = pipeline_cli.cmd_eval(get_config(config_path, seed, out_dir), episodes, seeds, variant,
                                       untrained_policy)
        overall = report["overall"]
        return _ok(f"Success {overall['success_mean']:.3f} ± {overall['success_std']:.3f}", report=report)
    except (SvamError, OSError) as e:
        return _fail("evaluation", e)


@mcp.tool()
def run_ablation(variant: str = "all", episodes: Optional[int] = None, seeds: Optional[int] = None,
                 config_path: Optional[str] = None, seed: Optional[int] = None,
                 out_dir: Optional[str] = None) -> str:
    """
    Train and evaluate ablation variants against the full model.

    Args:
        variant: One variant name or "all"
        episodes: Episodes per task and seed
        seeds: Number of evaluation seeds
        config_path: JSON run config
        seed: Run seed override
        out_dir: Output directory override

    Returns:
        JSON with success flag and the ablation matrix
    """
    try:
        variants = list(VARIANTS) if variant == "all" else [variant]
        result = pipeline_cli.cmd_ablate(get_config(config_path, seed, out_dir), variants, episodes, seeds)
        return _ok(f"Ablation over {len(result['matrix'])} variants", result=result)
    except (SvamError, OSError) as e:
        return _fail("ablation", e)


@mcp.tool()
def benchmark_latency(trials: Optional[int] = None, untrained: bool = False, config_path: Optional[str] = None,
                      seed: Optional[int] = None, out_dir: Optional[str] = None) -> str:
    """
    Median latency of multi-step generation versus the one-step shortcut.

    Args:
        trials: Timed trials per component
        untrained: Allow missing checkpoints
        config_path: JSON run config
        seed: Run seed override
        out_dir: Output directory override

    Returns:
        JSON with success flag and the latency report
    """
    try:
        report = pipeline_cli.cmd_bench_latency(get_config(config_path, seed, out_dir), trials, None, untrained)
        return _ok(f"Generation is {report['sampler_ratio']:.1f}x the one-step pass", report=report)
    except (SvamError, OSError) as e:
        return _fail("latency benchmark", e)


@mcp.tool()
def gradient_check(tol: float = 1e-3, inject_fault: bool = False, config_path: Optional[str] = None,
                   out_dir: Optional[str] = None) -> str:
    """Finite-difference gradient check of every parametric block."""
    try:
        result = pipeline_cli.cmd_gradcheck(get_config(config_path, None, out_dir), tol, inject_fault)
        worst = max(block["worst"] for block in result["blocks"].values())
        if not result["passed"]:
            return json.dumps({"success": False, "message": f"gradient check failed (worst {worst:.2e})",
                               "result": result})
        return _ok(f"All blocks within {tol:g} (worst {worst:.2e})", result=result)
    except (SvamError, OSError) as e:
        return _fail("gradient check", e)


@mcp.tool()
def health_check() -> str:
    """Report the active config location and which stage checkpoints exist."""
    try:
        config = get_config()
        stages = {f"stage{s}": pipeline_cli.checkpoint_path(config, s).exists() for s in (1, 2, 3)}
        return _ok("svam-pipeline is running", out_dir=str(config.out_dir),
                   dataset=config.path(config.paths.dataset).exists(), checkpoints=stages)
    except SvamError as e:
        return _fail("health check", e)


def main():
    """Entry point for the MCP server"""
    parser = argparse.ArgumentParser(description="S-VAM pipeline MCP server")
    parser.add_argument("--transport", choices=["stdio", "sse"], default=os.getenv("SVAM_MCP_TRANSPORT", "stdio"))
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)
    logger.info(f"Starting S-VAM pipeline MCP server ({args.transport})...")
    mcp.run(transport=args.transport)


if __name__ == "__main__":
    main()
