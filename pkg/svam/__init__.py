"""
S-VAM: shortcut video-action pipeline.

A frozen video diffusion backbone read once per control step, two decouplers
that turn its one-step features into geometric and semantic foresight, and a
diffusion action expert conditioned on both.
"""

__version__ = "0.1.0"
