"""The two-part projection network: 3D volume -> 2D map -> class probabilities.

Volumes enter the compression part depth-first as ``[N, D, H, W]``, i.e.
depth slices are treated as input channels and every convolution is 2-D.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import BadMagicError, ContractError, ShapeError, TruncatedFileError
from .layers import BatchNorm2d, Conv2d, Module, global_avg_pool, max_pool2d, relu, sigmoid, softmax
from .optim import AdamConfig, ParamGroup, make_groups
from .tensor import Tensor

N_CLASSES = 3
DEFAULT_COMPRESSION = (32, 16, 8, 4)  # hidden widths between D and the single output map
DEFAULT_CLASSIFICATION = (1, 16, 32, 64, 64, 64)
N_POOLS = 5


@dataclass(frozen=True)
class BlockSpec:
    in_channels: int
    out_channels: int
    has_pool: bool = False
    activation: str = "relu"


class Block(Module):
    """3x3 same-padded conv -> batch norm -> activation (-> 2x2 max pool)."""

    def __init__(self, spec: BlockSpec):
        if spec.activation not in ("relu", "sigmoid"):
            raise ContractError(f"unknown activation {spec.activation!r}")
        self.spec = spec
        self.conv = Conv2d(spec.in_channels, spec.out_channels, 3, stride=1, padding=1)
        self.bn = BatchNorm2d(spec.out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.bn(self.conv(x))
        y = sigmoid(y) if self.spec.activation == "sigmoid" else relu(y)
        return max_pool2d(y) if self.spec.has_pool else y


class CompressionNet(Module):
    def __init__(self, schedule: Sequence[int]):
        self.schedule = tuple(int(c) for c in schedule)
        last = len(self.schedule) - 2
        self.blocks = [
            Block(BlockSpec(cin, cout, activation="sigmoid" if i == last else "relu"))
            for i, (cin, cout) in enumerate(zip(self.schedule, self.schedule[1:]))
        ]

    @property
    def depth(self) -> int:
        return self.schedule[0]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.depth:
            raise ShapeError(f"compression expects [N, {self.depth}, H, W], got {x.shape}")
        for block in self.blocks:
            x = block(x)
        return x


class ClassificationNet(Module):
    def __init__(self, height: int, width: int, channels: Sequence[int] = DEFAULT_CLASSIFICATION):
        self.channels = tuple(int(c) for c in channels)
        self.height, self.width = height, width
        self.blocks = [
            Block(BlockSpec(cin, cout, has_pool=True)) for cin, cout in zip(self.channels, self.channels[1:])
        ]
        self.head = Conv2d(self.channels[-1], N_CLASSES, 1)

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (self.channels[0], self.height, self.width):
            raise ShapeError(
                f"classification expects [N, {self.channels[0]}, {self.height}, {self.width}], got {x.shape}"
            )
        for block in self.blocks:
            x = block(x)
        logits = self.head(global_avg_pool(x))
        return softmax(logits.reshape(x.shape[0], N_CLASSES))


def spatial_trace(size: int, n_pools: int = N_POOLS) -> list[int]:
    trace = [size]
    for _ in range(n_pools):
        trace.append(trace[-1] // 2)
    return trace


def build_compression(depth: int, schedule: Sequence[int] | None = None) -> CompressionNet:
    if schedule is None:
        schedule = (depth, *DEFAULT_COMPRESSION, 1)
    schedule = [int(c) for c in schedule]
    if len(schedule) != 6:
        raise ContractError(f"compression schedule needs 6 entries (5 blocks), got {len(schedule)}")
    if schedule[0] != depth:
        raise ContractError(f"schedule starts at {schedule[0]} but the volume depth is {depth}")
    if schedule[-1] != 1:
        raise ContractError("compression schedule must end in a single output channel")
    if min(schedule) < 1:
        raise ContractError("channel counts must be >= 1")
    return CompressionNet(schedule)


def build_classification(
    height: int, width: int, channels: Sequence[int] = DEFAULT_CLASSIFICATION
) -> ClassificationNet:
    if height // 2**N_POOLS < 1 or width // 2**N_POOLS < 1:
        raise ContractError(
            f"{height}x{width} maps vanish under {N_POOLS} poolings "
            f"(traces {spatial_trace(height)} / {spatial_trace(width)})"
        )
    if len(channels) != N_POOLS + 1 or channels[0] != 1 or min(channels) < 1:
        raise ContractError("classification channels need 6 positive entries starting at 1")
    return ClassificationNet(height, width, channels)


class Dpnn(Module):
    def __init__(self, compression: CompressionNet, classification: ClassificationNet):
        self.compression = compression
        self.classification = classification

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        proj = self.compression(x)
        return proj, self.classification(proj)


def build_dpnn(
    depth: int,
    height: int,
    width: int,
    schedule: Sequence[int] | None = None,
    channels: Sequence[int] = DEFAULT_CLASSIFICATION,
) -> Dpnn:
    return Dpnn(build_compression(depth, schedule), build_classification(height, width, channels))


def forward(model: Dpnn, volumes) -> tuple[Tensor, Tensor]:
    x = volumes if isinstance(volumes, Tensor) else Tensor(volumes)
    return model(x)


def xavier_init(model: Module, seed: int) -> Module:
    """Glorot-uniform conv weights, zero biases, unit BN scale, reset running stats."""
    rng = np.random.default_rng(seed)
    for name, p in model.named_parameters():
        if name.endswith(".weight"):
            c_out, c_in, kh, kw = p.shape
            limit = np.sqrt(6.0 / (c_in * kh * kw + c_out * kh * kw))
            p.data[...] = rng.uniform(-limit, limit, size=p.shape)
        elif name.endswith(".gamma"):
            p.data[...] = 1.0
        else:
            p.data[...] = 0.0
    for m in model.modules():
        if isinstance(m, BatchNorm2d):
            m.reset_running_stats()
    return model


def param_groups(model: Dpnn, mode: str = "finetune", base: AdamConfig = AdamConfig(), pretrain_decay: bool = False) -> list[ParamGroup]:
    comp = dict(model.compression.named_parameters("compression."))
    if mode == "pretrain":
        groups = make_groups(comp, None, "pretrain", base, pretrain_decay)
        covered = set(map(id, comp.values()))
        expected = model.compression.parameters()
    else:
        cls = dict(model.classification.named_parameters("classification."))
        groups = make_groups(comp, cls, "finetune", base)
        covered = set(map(id, comp.values())) | set(map(id, cls.values()))
        expected = model.parameters()
    if any(id(p) not in covered for p in expected):
        raise ContractError("a trainable parameter is not assigned to any group")
    return groups


# -- checkpoints --------------------------------------------------------------

MAGIC = b"DPNN"
FORMAT_VERSION = 1


def state_dict(model: Module, prefix: str = "") -> dict[str, np.ndarray]:
    state = {n: p.data.copy() for n, p in model.named_parameters(prefix)}
    state.update({n: b.copy() for n, b in model.named_buffers(prefix)})
    return state


def load_state(model: Module, state: dict[str, np.ndarray], prefix: str = "") -> None:
    targets = {n: p.data for n, p in model.named_parameters(prefix)}
    targets.update(dict(model.named_buffers(prefix)))
    missing = [n for n in targets if n not in state]
    if missing:
        raise ContractError(f"checkpoint lacks {missing[:3]}")
    for n, arr in targets.items():
        src = np.asarray(state[n], dtype=np.float64)
        if src.shape != arr.shape:
            raise ShapeError(f"{n}: checkpoint shape {src.shape} != model shape {arr.shape}")
        arr[...] = src


def encode_checkpoint(state: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype="<f8")
        if arr.ndim == 0:
            arr = arr.reshape(1)
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)))
        out.append(raw)
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {buf[:4]!r})")
    if len(buf) < 8:
        raise TruncatedFileError("checkpoint header truncated")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise ContractError(f"unsupported checkpoint version {version}")
    pos, state = 8, {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFileError("checkpoint record truncated")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        state[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return state


def save_checkpoint(state: dict[str, np.ndarray], path) -> None:
    Path(path).write_bytes(encode_checkpoint(state))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    return decode_checkpoint(Path(path).read_bytes())
