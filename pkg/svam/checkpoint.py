"""
Named-tensor checkpoint container and its binary file format.

Layout: magic "SVAMCK1\\0", u32 tensor count, then per tensor a u16 name
length, the UTF-8 name, a u8 rank, u32 dims and little-endian f32 data; a
trailing u64 holds the FNV-1a hash of the config sections the checkpoint
depends on.
"""

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from svam.errors import CheckpointMismatchError
from svam.nn import Module
from svam.tensor_autograd import AdamState

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SVAMCK1\0"


@dataclass
class Checkpoint:
    config_hash: int
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    # -- modules ------------------------------------------------------------

    def add_module(self, prefix: str, module: Module):
        for name, value in module.state_dict().items():
            self.tensors[f"{prefix}.{name}"] = value

    def module_state(self, prefix: str) -> Dict[str, np.ndarray]:
        head = f"{prefix}."
        return {name[len(head):]: value for name, value in self.tensors.items() if name.startswith(head)}

    def load_module(self, prefix: str, module: Module):
        state = self.module_state(prefix)
        if not state:
            raise CheckpointMismatchError(f"checkpoint holds no tensors for '{prefix}'")
        module.load_state_dict(state)

    def has(self, prefix: str) -> bool:
        head = f"{prefix}."
        return any(name.startswith(head) for name in self.tensors)

    # -- optimizer ----------------------------------------------------------

    def add_optimizer(self, prefix: str, state: AdamState):
        self.tensors[f"adam.{prefix}.step"] = np.asarray(float(state.step_count))
        for name in state.first_moment:
            self.tensors[f"adam.{prefix}.{name}.m"] = state.first_moment[name]
            self.tensors[f"adam.{prefix}.{name}.v"] = state.second_moment[name]

    def load_optimizer(self, prefix: str, state: AdamState):
        """Restore moments and step count into an AdamState built for the same parameters."""
        step_key = f"adam.{prefix}.step"
        if step_key not in self.tensors:
            raise CheckpointMismatchError(f"checkpoint holds no optimizer state for '{prefix}'")
        state.step_count = int(self.tensors[step_key])
        for name in state.first_moment:
            try:
                state.first_moment[name] = self.tensors[f"adam.{prefix}.{name}.m"].astype(np.float32)
                state.second_moment[name] = self.tensors[f"adam.{prefix}.{name}.v"].astype(np.float32)
            except KeyError:
                raise CheckpointMismatchError(f"optimizer state for '{prefix}' lacks parameter {name}")

    # -- persistence --------------------------------------------------------

    def save(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        chunks = [CHECKPOINT_MAGIC, struct.pack("<I", len(self.tensors))]
        for name in sorted(self.tensors):
            value = np.asarray(self.tensors[name])
            encoded = name.encode("utf-8")
            chunks.append(struct.pack("<H", len(encoded)))
            chunks.append(encoded)
            chunks.append(struct.pack("<B", value.ndim))
            chunks.append(struct.pack(f"<{value.ndim}I", *value.shape))
            chunks.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
        chunks.append(struct.pack("<Q", self.config_hash))
        path.write_bytes(b"".join(chunks))
        logger.info(f"Saved checkpoint {path} ({len(self.tensors)} tensors, hash {self.config_hash:016x})")


def load_checkpoint(path: Path, expected_hash: Optional[int] = None) -> Checkpoint:
    """
    Read a checkpoint file.

    Args:
        path: Checkpoint path
        expected_hash: When given, the stored config hash must equal it

    Returns:
        Checkpoint with float32 tensors

    Raises:
        CheckpointMismatchError: file missing, malformed, or written under another config
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointMismatchError(f"checkpoint not found: {path}")
    payload = path.read_bytes()
    if payload[:8] != CHECKPOINT_MAGIC:
        raise CheckpointMismatchError(f"{path} is not a checkpoint file")
    try:
        (count,) = struct.unpack_from("<I", payload, 8)
        offset = 12
        tensors: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", payload, offset)
            offset += 2
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", payload, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", payload, offset)
            offset += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(payload, "<f4", size, offset).astype(np.float32)
            offset += 4 * size
            tensors[name] = data.reshape(shape)
        (config_hash,) = struct.unpack_from("<Q", payload, offset)
    except (struct.error, ValueError, UnicodeDecodeError):
        raise CheckpointMismatchError(f"{path} is truncated or corrupt")

    if expected_hash is not None and config_hash != expected_hash:
        raise CheckpointMismatchError(f"checkpoint {path} was written under another config",
                                      expected_hash=expected_hash, found_hash=config_hash)
    logger.info(f"Loaded checkpoint {path} ({count} tensors, hash {config_hash:016x})")
    return Checkpoint(config_hash=config_hash, tensors=tensors)
