"""The grid network: a plain strided conv backbone, three detection heads and a flat classifier head.

Head k (k = 0, 1, 2) works at stride 32, 16, 8 and emits a [W_k, H_k, 1 + N_c]
grid of logits; channel 0 is objectness, channels 1..N_c are class logits.
"""
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from .constants import (
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    DimensionError,
    TruncatedContainerError,
)
from .diffcore import Tensor, conv2d, leaky_relu, linear, mean, reshape, transpose
from .settings import NetworkConfig

logger = logging.getLogger(__name__)

# Backbone stage feeding each head: stage 4 is S/32, stage 3 is S/16, stage 2 is S/8
HEAD_TAPS = (4, 3, 2)

_HEADER_LENGTH = struct.Struct("<Q")


def parameter_shapes(config: NetworkConfig) -> Dict[str, Tuple[int, ...]]:
    """Names and shapes of every parameter, in checkpoint order."""
    shapes: Dict[str, Tuple[int, ...]] = {}
    c_in = 3
    for stage, width in enumerate(config.widths):
        shapes[f"backbone.{stage}.weight"] = (width, c_in, 3, 3)
        shapes[f"backbone.{stage}.bias"] = (width,)
        c_in = width
    hw = config.head_width
    for k, tap in enumerate(HEAD_TAPS):
        shapes[f"head.{k}.conv1.weight"] = (hw, config.widths[tap], 3, 3)
        shapes[f"head.{k}.conv1.bias"] = (hw,)
        shapes[f"head.{k}.conv2.weight"] = (hw, hw, 3, 3)
        shapes[f"head.{k}.conv2.bias"] = (hw,)
        shapes[f"head.{k}.pred.weight"] = (1 + config.num_classes, hw, 1, 1)
        shapes[f"head.{k}.pred.bias"] = (1 + config.num_classes,)
    shapes["flat.weight"] = (config.num_classes, config.widths[-1])
    shapes["flat.bias"] = (config.num_classes,)
    return shapes


def init_weights(config: NetworkConfig, seed: int) -> Dict[str, Tensor]:
    """He-normal weights (std sqrt(2 / fan_in)) and zero biases, deterministic in ``seed``."""
    rng = np.random.Generator(np.random.PCG64(seed))
    params = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".bias"):
            values = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = Tensor(values, requires_grad=True, name=name)
    return params


@dataclass(frozen=True)
class CandidateGrids:
    """Raw logit grids of the three heads, ordered by stride 32, 16, 8."""
    grids: Tuple[Tensor, ...]

    @property
    def batched(self) -> bool:
        return self.grids[0].ndim == 4

    @property
    def num_classes(self) -> int:
        return self.grids[0].shape[-1] - 1

    @property
    def num_candidates(self) -> int:
        return sum(g.shape[-3] * g.shape[-2] for g in self.grids)

    def arrays(self) -> Tuple[np.ndarray, ...]:
        return tuple(g.data for g in self.grids)

    def sample(self, b: int) -> "CandidateGrids":
        """Grids of one batch element, detached from any graph."""
        return CandidateGrids(tuple(Tensor(g.data[b]) for g in self.grids))


class GridNet:
    def __init__(self, config: NetworkConfig, params: Dict[str, Tensor] | None = None, seed: int = 0) -> None:
        self.config = config
        self.params = params if params is not None else init_weights(config, seed)

    def _check_input(self, image: Tensor) -> Tensor:
        s = self.config.image_size
        if image.ndim not in (3, 4) or image.shape[-3:] != (3, s, s):
            raise DimensionError(f"Expected image of shape [3,{s},{s}] (optionally batched), got {list(image.shape)}")
        return image

    def backbone(self, image: Tensor) -> List[Tensor]:
        """Outputs of the five stride-2 stages (S/2 ... S/32)."""
        x = self._check_input(image)
        stages = []
        for stage in range(len(self.config.widths)):
            x = conv2d(x, self.params[f"backbone.{stage}.weight"], self.params[f"backbone.{stage}.bias"],
                       stride=2, padding=1)
            x = leaky_relu(x, self.config.leaky_slope)
            stages.append(x)
        return stages

    def _head(self, k: int, features: Tensor) -> Tensor:
        p, slope = self.params, self.config.leaky_slope
        x = leaky_relu(conv2d(features, p[f"head.{k}.conv1.weight"], p[f"head.{k}.conv1.bias"], 1, 1), slope)
        x = leaky_relu(conv2d(x, p[f"head.{k}.conv2.weight"], p[f"head.{k}.conv2.bias"], 1, 1), slope)
        x = conv2d(x, p[f"head.{k}.pred.weight"], p[f"head.{k}.pred.bias"], 1, 0)
        # [C, H, W] -> [W, H, C] so that grid[i, j] is column i, row j
        return transpose(x, (0, 3, 2, 1) if x.ndim == 4 else (2, 1, 0))

    def forward(self, image: Tensor) -> CandidateGrids:
        stages = self.backbone(image)
        return CandidateGrids(tuple(self._head(k, stages[tap]) for k, tap in enumerate(HEAD_TAPS)))

    def forward_flat(self, image: Tensor) -> Tensor:
        """Multi-label logits [N_c] (or [B, N_c]) from the pooled deepest feature map."""
        deepest = self.backbone(image)[-1]
        pooled = mean(deepest, axis=(1, 2) if deepest.ndim == 3 else (2, 3))
        if pooled.ndim == 1:
            logits = linear(reshape(pooled, (1, -1)), self.params["flat.weight"], self.params["flat.bias"])
            return reshape(logits, (-1,))
        return linear(pooled, self.params["flat.weight"], self.params["flat.bias"])

    def backbone_parameters(self) -> Dict[str, Tensor]:
        return {name: p for name, p in self.params.items() if name.startswith("backbone.")}

    def head_parameters(self, mode: str = "yolood") -> Dict[str, Tensor]:
        prefix = "head." if mode == "yolood" else "flat."
        return {name: p for name, p in self.params.items() if name.startswith(prefix)}

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    @classmethod
    def from_checkpoint(cls, checkpoint: "Checkpoint") -> "GridNet":
        params = {name: Tensor(values, requires_grad=True, name=name) for name, values in checkpoint.params.items()}
        return cls(checkpoint.config, params)


@dataclass
class Checkpoint:
    config: NetworkConfig
    params: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    @property
    def mode(self) -> str:
        return self.metadata.get("mode", "yolood")


def save_checkpoint(path: str | Path, checkpoint: Checkpoint) -> None:
    """Write the GRIDOOD1 container: magic, length-prefixed JSON header, little-endian float64 payloads."""
    shapes = parameter_shapes(checkpoint.config)
    directory, payloads, offset = [], [], 0
    for name, shape in shapes.items():
        values = np.asarray(checkpoint.params[name], dtype="<f8")
        if values.shape != shape:
            raise CheckpointShapeError(f"Parameter {name} has shape {values.shape}, config expects {shape}")
        blob = values.tobytes(order="C")
        directory.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(blob)})
        payloads.append(blob)
        offset += len(blob)
    header = {
        "format_version": checkpoint.version,
        "network": checkpoint.config.model_dump(mode="json"),
        "metadata": checkpoint.metadata,
        "tensors": directory,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(_HEADER_LENGTH.pack(len(header_bytes)))
        f.write(header_bytes)
        for blob in payloads:
            f.write(blob)
    logger.debug(f"Saved checkpoint with {len(directory)} tensors to {path}")


def _tensor_directory(path, tensors) -> Dict[str, dict]:
    if not isinstance(tensors, list):
        raise CheckpointFormatError(f"{path}: tensor directory must be a list")
    entries = {}
    for entry in tensors:
        if not isinstance(entry, dict) or not isinstance(entry.get("name"), str):
            raise CheckpointFormatError(f"{path}: malformed tensor entry {entry!r}")
        missing = [key for key in ("shape", "offset", "nbytes") if key not in entry]
        if missing:
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} lacks {missing}")
        shape = entry["shape"]
        if not isinstance(shape, list) or not all(isinstance(d, int) for d in shape) \
                or not isinstance(entry["offset"], int) or not isinstance(entry["nbytes"], int):
            raise CheckpointFormatError(f"{path}: tensor {entry['name']} has non-integer shape, offset or nbytes")
        entries[entry["name"]] = entry
    return entries


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Read and validate a GRIDOOD1 container.

    :raises CheckpointFormatError: bad magic or unreadable header
    :raises CheckpointVersionError: unsupported format version
    :raises TruncatedContainerError: file ends before the data it announces
    :raises CheckpointShapeError: tensor directory disagrees with the network config
    """
    raw = Path(path).read_bytes()
    prefix = len(CHECKPOINT_MAGIC) + _HEADER_LENGTH.size
    if len(raw) < len(CHECKPOINT_MAGIC) or (raw[:len(CHECKPOINT_MAGIC)] == CHECKPOINT_MAGIC and len(raw) < prefix):
        raise TruncatedContainerError(f"{path}: truncated container (only {len(raw)} bytes)")
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: not a GRIDOOD1 checkpoint")
    (header_length,) = _HEADER_LENGTH.unpack_from(raw, len(CHECKPOINT_MAGIC))
    if prefix + header_length > len(raw):
        raise TruncatedContainerError(f"{path}: truncated container (header needs {header_length} bytes)")
    try:
        header = json.loads(raw[prefix:prefix + header_length].decode("utf-8"))
    except ValueError as e:
        raise CheckpointFormatError(f"{path}: unreadable header: {e}")

    if not isinstance(header, dict):
        raise CheckpointFormatError(f"{path}: header must be a JSON object, got {type(header).__name__}")
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    try:
        config = NetworkConfig.parse(**header["network"])
    except (ConfigError, KeyError, TypeError) as e:
        raise CheckpointFormatError(f"{path}: invalid network config in header: {e}")

    expected = parameter_shapes(config)
    entries = _tensor_directory(path, header.get("tensors", []))
    if set(entries) != set(expected):
        raise CheckpointShapeError(f"{path}: tensor names differ from the network config "
                                   f"(missing {sorted(set(expected) - set(entries))}, "
                                   f"unexpected {sorted(set(entries) - set(expected))})")
    payload = memoryview(raw)[prefix + header_length:]
    params = {}
    for name, shape in expected.items():
        entry = entries[name]
        if tuple(entry["shape"]) != shape or entry["nbytes"] != int(np.prod(shape)) * 8:
            raise CheckpointShapeError(f"{path}: tensor {name} has shape {entry['shape']}, config expects {list(shape)}")
        start, stop = entry["offset"], entry["offset"] + entry["nbytes"]
        if start < 0 or stop > len(payload):
            raise TruncatedContainerError(f"{path}: truncated container (tensor {name} ends at byte {stop}, "
                                          f"payload has {len(payload)})")
        params[name] = np.frombuffer(payload[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
    return Checkpoint(config=config, params=params, metadata=header.get("metadata", {}), version=version)
