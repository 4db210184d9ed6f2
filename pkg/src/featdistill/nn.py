"""Desk-scale CNN teachers/students with named feature taps.

A model is a stem (conv-BN-ReLU), a sequence of groups that share one
spatial size, and a global-average-pool + linear head.  Each group ends in a
ReLU; the tap for the group is the tensor right before that ReLU
(``pre_relu``) or right after it (``block_end``).
"""

from __future__ import annotations

import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import (
    EVALUATION,
    TRAINING,
    DimensionError,
    Tensor,
    add,
    batchnorm2d,
    conv2d,
    linear,
    pad2d,
    pool2d,
    relu,
    reshape,
)

logger = logging.getLogger(__name__)

PRE_RELU = "pre_relu"
BLOCK_END = "block_end"
SIMPLE = "simple"
RESIDUAL = "residual"

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5


class ConfigurationError(ValueError):
    """A model, loss or run configuration is invalid."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed or does not match the model."""


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    in_channels: int
    out_channels: int
    stride: int = 1

    @property
    def has_projection(self) -> bool:
        return self.kind == RESIDUAL and (self.in_channels != self.out_channels or self.stride != 1)


@dataclass
class ModelSpec:
    """Architecture of a teacher or student network.

    ``groups`` lists base channel widths; every group after the first halves
    the spatial size with a stride-2 first block.
    """

    groups: tuple[int, ...] = (16, 32, 64)
    blocks_per_group: int = 1
    width_multiplier: float = 1.0
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (1, 28, 28)
    block_kind: str = SIMPLE

    def __post_init__(self):
        self.groups = tuple(int(g) for g in self.groups)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.validate()

    def validate(self) -> None:
        if not self.groups or any(g < 1 for g in self.groups):
            raise ConfigurationError("groups: need at least one positive channel width")
        if self.blocks_per_group < 1:
            raise ConfigurationError("blocks_per_group: must be >= 1")
        if self.width_multiplier <= 0:
            raise ConfigurationError("width_multiplier: must be positive")
        if self.num_classes < 2:
            raise ConfigurationError("num_classes: must be >= 2")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError("input_shape: expected (C, H, W) with positive extents")
        if self.block_kind not in (SIMPLE, RESIDUAL):
            raise ConfigurationError(f"block_kind: unknown kind {self.block_kind!r}")

    @property
    def widths(self) -> list[int]:
        return [max(1, int(round(g * self.width_multiplier))) for g in self.groups]

    def group_blocks(self) -> list[list[BlockSpec]]:
        widths = self.widths
        out, cin = [], widths[0]
        for gi, width in enumerate(widths):
            blocks = []
            for bi in range(self.blocks_per_group):
                stride = 2 if gi > 0 and bi == 0 else 1
                blocks.append(BlockSpec(self.block_kind, cin, width, stride))
                cin = width
            out.append(blocks)
        return out

    def spatial_sizes(self) -> list[tuple[int, int]]:
        _, h, w = self.input_shape
        sizes = []
        for gi in range(len(self.groups)):
            if gi > 0:
                h, w = (h - 1) // 2 + 1, (w - 1) // 2 + 1
            sizes.append((h, w))
        return sizes


@dataclass(frozen=True)
class FeatureTap:
    name: str
    group_index: int
    channels: int
    position: str = PRE_RELU


def tap_positions(spec: ModelSpec, position: str = PRE_RELU) -> list[FeatureTap]:
    """One tap per group, shallow to deep, at the group's final ReLU."""
    if position not in (PRE_RELU, BLOCK_END):
        raise ConfigurationError(f"tap position: unknown value {position!r}")
    return [
        FeatureTap(f"group{gi}", gi, width, position) for gi, width in enumerate(spec.widths)
    ]


class _Ctx:
    __slots__ = ("mode", "update_stats")

    def __init__(self, mode, update_stats):
        self.mode = mode
        self.update_stats = update_stats


class Conv:
    def __init__(self, name, cin, cout, k, stride, rng, bias=False):
        fan_in = cin * k * k
        self.weight = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin, k, k)),
            requires_grad=True,
            name=f"{name}.weight",
        )
        self.bias = (
            Tensor(np.zeros(cout), requires_grad=True, name=f"{name}.bias") if bias else None
        )
        self.stride = stride
        self.padding = k // 2

    def parameters(self):
        yield self.weight
        if self.bias is not None:
            yield self.bias

    def buffers(self):
        return iter(())

    def __call__(self, x, ctx=None):
        s, p, k = self.stride, self.padding, self.weight.shape[2]
        if s == 1:
            return conv2d(x, self.weight, self.bias, 1, p)
        # output ceil(H / s): pad k//2 in front, trim or pad the far edge to fit
        h, w = x.shape[2:]
        far_h = (-(-h // s) - 1) * s + k - h - p
        far_w = (-(-w // s) - 1) * s + k - w - p
        if far_h == p and far_w == p:
            return conv2d(x, self.weight, self.bias, s, p)
        return conv2d(pad2d(x, p, far_h, p, far_w), self.weight, self.bias, s, 0)


class BatchNorm:
    def __init__(self, name, channels):
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.name = name

    def parameters(self):
        yield self.gamma
        yield self.beta

    def buffers(self):
        yield f"{self.name}.running_mean", self.running_mean
        yield f"{self.name}.running_var", self.running_var

    def __call__(self, x, ctx):
        return batchnorm2d(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            mode=ctx.mode,
            momentum=BN_MOMENTUM,
            epsilon=BN_EPSILON,
            update_stats=ctx.update_stats,
        )


class Block:
    """Layer block; ``__call__`` returns the tensor right before the block's last ReLU."""

    def __init__(self, name: str, bspec: BlockSpec, rng):
        self.spec = bspec
        cin, cout, s = bspec.in_channels, bspec.out_channels, bspec.stride
        self.conv1 = Conv(f"{name}.conv1", cin, cout, 3, s, rng)
        self.bn1 = BatchNorm(f"{name}.bn1", cout)
        self.layers = [self.conv1, self.bn1]
        if bspec.kind == RESIDUAL:
            self.conv2 = Conv(f"{name}.conv2", cout, cout, 3, 1, rng)
            self.bn2 = BatchNorm(f"{name}.bn2", cout)
            self.layers += [self.conv2, self.bn2]
            if bspec.has_projection:
                self.proj = Conv(f"{name}.proj", cin, cout, 1, s, rng)
                self.proj_bn = BatchNorm(f"{name}.proj_bn", cout)
                self.layers += [self.proj, self.proj_bn]

    def __call__(self, x: Tensor, ctx: _Ctx) -> Tensor:
        h = self.bn1(self.conv1(x), ctx)
        if self.spec.kind == SIMPLE:
            return h
        h = self.bn2(self.conv2(relu(h)), ctx)
        short = self.proj_bn(self.proj(x), ctx) if self.spec.has_projection else x
        return add(h, short)


class Model:
    """A built network: parameters, BN buffers, input statistics and taps."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        spec.validate()
        self.spec = spec
        self.seed = seed
        rng = np.random.default_rng(seed)
        cin, _, _ = spec.input_shape
        widths = spec.widths
        self.stem_conv = Conv("stem.conv", cin, widths[0], 3, 1, rng)
        self.stem_bn = BatchNorm("stem.bn", widths[0])
        self.groups: list[list[Block]] = []
        for gi, blocks in enumerate(spec.group_blocks()):
            self.groups.append(
                [Block(f"group{gi}.block{bi}", b, rng) for bi, b in enumerate(blocks)]
            )
        fan_in = widths[-1]
        self.fc = Linear("fc", fan_in, spec.num_classes, rng)
        # per-channel input normalization, fixed by whoever trains the model
        self.input_mean = np.zeros(cin)
        self.input_std = np.ones(cin)
        self.taps = tap_positions(spec, PRE_RELU)

    def _layers(self):
        yield self.stem_conv
        yield self.stem_bn
        for blocks in self.groups:
            for block in blocks:
                yield from block.layers
        yield self.fc

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        return OrderedDict((p.name, p) for layer in self._layers() for p in layer.parameters())

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        out = OrderedDict()
        out["input.mean"] = self.input_mean
        out["input.std"] = self.input_std
        for layer in self._layers():
            out.update(layer.buffers())
        return out

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        state = OrderedDict((k, p.data) for k, p in self.named_parameters().items())
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state) -> None:
        targets = OrderedDict((k, p.data) for k, p in self.named_parameters().items())
        targets.update(self.named_buffers())
        missing = set(targets) - set(state)
        extra = set(state) - set(targets)
        if missing or extra:
            raise CheckpointError(
                f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}"
            )
        for k, dst in targets.items():
            src = np.asarray(state[k], dtype=np.float64)
            if src.shape != dst.shape:
                raise CheckpointError(f"{k}: shape {src.shape} != {dst.shape}")
            dst[...] = src

    def normalize_input(self, images) -> Tensor:
        """Map raw pixel values to the model's normalized input tensor."""
        x = np.asarray(images, dtype=np.float64)
        x = (x - self.input_mean.reshape(1, -1, 1, 1)) / self.input_std.reshape(1, -1, 1, 1)
        return Tensor._wrap(x)

    def forward_with_taps(
        self,
        x: Tensor,
        bn_mode: str = EVALUATION,
        update_stats: bool = True,
        position: str = PRE_RELU,
    ) -> tuple[Tensor, "OrderedDict[str, Tensor]"]:
        """Run the network and capture one feature map per group.

        ``update_stats=False`` keeps BN running statistics untouched even in
        training mode; this is how a frozen teacher is queried.
        """
        expected = (self.spec.input_shape[0],) + tuple(self.spec.input_shape[1:])
        if x.ndim != 4 or x.shape[1:] != expected:
            raise DimensionError(f"input shape {x.shape} does not match spec {expected}")
        if position not in (PRE_RELU, BLOCK_END):
            raise ConfigurationError(f"tap position: unknown value {position!r}")
        ctx = _Ctx(bn_mode, update_stats)
        h = relu(self.stem_bn(self.stem_conv(x), ctx))
        taps: OrderedDict[str, Tensor] = OrderedDict()
        for gi, blocks in enumerate(self.groups):
            for bi, block in enumerate(blocks):
                pre = block(h, ctx)
                h = relu(pre)
                if bi == len(blocks) - 1:
                    taps[f"group{gi}"] = pre if position == PRE_RELU else h
        n, c, hh, ww = h.shape
        if hh != ww:
            raise DimensionError(f"global pooling needs square feature maps, got {hh}x{ww}")
        pooled = reshape(pool2d("avg", h, hh, 1), (n, c))
        return self.fc(pooled), taps

    def __call__(self, x: Tensor, bn_mode: str = EVALUATION) -> Tensor:
        return self.forward_with_taps(x, bn_mode)[0]


class Linear:
    def __init__(self, name, fin, fout, rng):
        self.weight = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / fin), size=(fout, fin)),
            requires_grad=True,
            name=f"{name}.weight",
        )
        self.bias = Tensor(np.zeros(fout), requires_grad=True, name=f"{name}.bias")

    def parameters(self):
        yield self.weight
        yield self.bias

    def buffers(self):
        return iter(())

    def __call__(self, x, ctx=None):
        return linear(x, self.weight, self.bias)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    model = Model(spec, seed)
    logger.info(
        "built %s model groups=%s width=%.2f params=%d",
        spec.block_kind,
        spec.widths,
        spec.width_multiplier,
        model.parameter_count,
    )
    return model


def forward_with_taps(model: Model, x: Tensor, bn_mode: str = EVALUATION, **kwargs):
    return model.forward_with_taps(x, bn_mode, **kwargs)


class Regressor:
    """Student-side transform: 1x1 convolution to teacher width, then BN.

    The BN always runs on batch statistics.
    """

    def __init__(self, name: str, student_channels: int, teacher_channels: int, seed: int = 0):
        if student_channels < 1 or teacher_channels < 1:
            raise ConfigurationError("regressor channel counts must be >= 1")
        rng = np.random.default_rng(seed)
        self.name = name
        self.student_channels = student_channels
        self.teacher_channels = teacher_channels
        self.conv = Conv(f"{name}.conv", student_channels, teacher_channels, 1, 1, rng)
        self.bn = BatchNorm(f"{name}.bn", teacher_channels)

    def parameters(self) -> list[Tensor]:
        return [self.conv.weight, self.bn.gamma, self.bn.beta]

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.student_channels:
            raise DimensionError(
                f"regressor {self.name}: expected {self.student_channels} channels, got {x.shape}"
            )
        return self.bn(self.conv(x), _Ctx(TRAINING, True))


def build_regressor(
    student_channels: int, teacher_channels: int, seed: int = 0, name: str = "regressor"
) -> Regressor:
    return Regressor(name, student_channels, teacher_channels, seed)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"DFRG"
VERSION = 1


def save_checkpoint(state, path) -> None:
    """Write named float64 arrays (e.g. ``model.state_dict()``) to ``path``."""
    if isinstance(state, Model):
        state = state.state_dict()
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(state))]
    for name, arr in state.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 255:
            raise CheckpointError(f"cannot encode record {name!r}")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:4]!r} at offset 0")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at offset {pos}")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<IQ", take(12))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes at offset {pos}")
    return out
