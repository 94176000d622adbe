"""The three network families (U-Net generator, strided discriminator,
residual task classifier) plus gradient access and the checkpoint block
format.

All parameter tensors are float32. Builders take an integer seed and
produce bit-identical weights for identical (config, seed) pairs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn

from .errors import (
    ConfigError,
    FormatError,
    IoError,
    NonFiniteGradientError,
    ShapeMismatchError,
    VersionError,
)

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchConfig:
    """Shared architecture knobs. `depth` counts stride-2 levels (generator,
    discriminator) or residual stages (task network)."""

    size: int = 64
    in_channels: int = 3
    base_width: int = 32
    depth: int = 4
    kernel: int = 4
    negative_slope: float = 0.2
    out_channels: int = 1

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.size % (2**self.depth):
            raise ConfigError(
                f"input size {self.size} not divisible by 2^{self.depth}"
            )
        if self.kernel % 2:
            raise ConfigError("stride-2 kernels must be even for exact halving")


def default_generator_config(size: int = 64) -> ArchConfig:
    return ArchConfig(size=size, in_channels=2, base_width=32, depth=4, out_channels=3)


def default_discriminator_config(size: int = 64) -> ArchConfig:
    # five stride-2 levels at full scale, four at desk scale
    return ArchConfig(
        size=size,
        in_channels=3,
        base_width=32,
        depth=5 if size >= 128 else 4,
        out_channels=1,
    )


def default_task_config(size: int = 64, in_channels: int = 3) -> ArchConfig:
    return ArchConfig(
        size=size, in_channels=in_channels, base_width=16, depth=3, kernel=4
    )


def _conv_block(in_ch: int, out_ch: int, kernel: int) -> nn.Sequential:
    pad = (kernel - 2) // 2
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, kernel, stride=2, padding=pad, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


def _upconv_block(in_ch: int, out_ch: int, kernel: int) -> nn.Sequential:
    pad = (kernel - 2) // 2
    return nn.Sequential(
        nn.ConvTranspose2d(in_ch, out_ch, kernel, stride=2, padding=pad, bias=False),
        nn.BatchNorm2d(out_ch),
        nn.ReLU(inplace=True),
    )


class GeneratorUNet(nn.Module):
    """Stride-2 conv encoder, mirrored transposed-conv decoder with skip
    concatenations, sigmoid RGB output."""

    kind = "generator"

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        self.encoders = nn.ModuleList()
        prev = cfg.in_channels
        for w in widths:
            self.encoders.append(_conv_block(prev, w, cfg.kernel))
            prev = w
        self.decoders = nn.ModuleList()
        for i in range(cfg.depth):
            in_ch = widths[-1] if i == 0 else 2 * widths[cfg.depth - 1 - i]
            out_ch = widths[cfg.depth - 2 - i] if i < cfg.depth - 1 else widths[0]
            self.decoders.append(_upconv_block(in_ch, out_ch, cfg.kernel))
        self.head = nn.Conv2d(widths[0], cfg.out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatchError(
                f"generator expects (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        if x.shape[2] % 2**self.cfg.depth or x.shape[3] % 2**self.cfg.depth:
            raise ShapeMismatchError(
                f"spatial size {tuple(x.shape[2:])} not divisible by 2^{self.cfg.depth}"
            )
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
        for i, dec in enumerate(self.decoders):
            x = dec(x)
            skip_idx = self.cfg.depth - 2 - i
            if skip_idx >= 0:
                x = torch.cat([skips[skip_idx], x], dim=1)
        return torch.sigmoid(self.head(x))


class Discriminator(nn.Module):
    """Stride-2 leaky conv stack, flatten, one fully connected sigmoid unit."""

    kind = "discriminator"

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        pad = (cfg.kernel - 2) // 2
        layers = []
        prev = cfg.in_channels
        for w in widths:
            layers += [
                nn.Conv2d(prev, w, cfg.kernel, stride=2, padding=pad, bias=False),
                nn.BatchNorm2d(w),
                nn.LeakyReLU(cfg.negative_slope, inplace=True),
            ]
            prev = w
        self.features = nn.Sequential(*layers)
        feat_side = cfg.size // 2**cfg.depth
        self.head = nn.Linear(widths[-1] * feat_side * feat_side, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatchError(
                f"discriminator expects (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        if x.shape[2] != self.cfg.size or x.shape[3] != self.cfg.size:
            raise ShapeMismatchError(
                f"discriminator expects {self.cfg.size}x{self.cfg.size} input"
            )
        feats = self.features(x).flatten(1)
        return torch.sigmoid(self.head(feats)).squeeze(1)


class ResidualBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.relu = nn.ReLU(inplace=True)
        if stride != 1 or in_ch != out_ch:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride=stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )
        else:
            self.shortcut = nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class TaskNet(nn.Module):
    """Small residual classifier: stem, `depth` stages of two blocks with
    stride-2 transitions, global average pool, sigmoid head."""

    kind = "task"

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, widths[0], 3, padding=1, bias=False),
            nn.BatchNorm2d(widths[0]),
            nn.ReLU(inplace=True),
        )
        stages = []
        prev = widths[0]
        for w in widths:
            stages.append(ResidualBlock(prev, w, stride=2))
            stages.append(ResidualBlock(w, w, stride=1))
            prev = w
        self.stages = nn.Sequential(*stages)
        self.head = nn.Linear(widths[-1], 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != self.cfg.in_channels:
            raise ShapeMismatchError(
                f"task net expects (B, {self.cfg.in_channels}, H, W), got {tuple(x.shape)}"
            )
        feats = self.stages(self.stem(x))
        pooled = feats.mean(dim=(2, 3))
        return torch.sigmoid(self.head(pooled)).squeeze(1)


def _init_params(module: nn.Module, seed: int) -> None:
    """Conv/linear weights ~ N(0, 0.02), BN scales ~ N(1, 0.02), offsets 0."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
                m.weight.normal_(0.0, 0.02, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.BatchNorm2d):
                m.weight.normal_(1.0, 0.02, generator=gen)
                m.bias.zero_()


def build_generator(cfg: ArchConfig, seed: int) -> GeneratorUNet:
    net = GeneratorUNet(cfg)
    _init_params(net, seed)
    return net


def build_discriminator(cfg: ArchConfig, seed: int) -> Discriminator:
    net = Discriminator(cfg)
    _init_params(net, seed)
    return net


def build_task_net(cfg: ArchConfig, seed: int) -> TaskNet:
    net = TaskNet(cfg)
    _init_params(net, seed)
    return net


_BUILDERS = {
    "generator": GeneratorUNet,
    "discriminator": Discriminator,
    "task": TaskNet,
}


def param_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def float_blocks(module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    """Named float tensors (parameters then buffers) in stable order.

    Integer buffers (batch-norm step counters) are excluded; they do not
    affect any forward or update path at fixed batch-norm momentum.
    """
    blocks = list(module.named_parameters())
    blocks += [(n, b) for n, b in module.named_buffers() if b.is_floating_point()]
    return blocks


def gradients(
    module: nn.Module, loss_fn: Callable[[], torch.Tensor]
) -> dict[str, torch.Tensor]:
    """d loss / d parameter for every parameter block of `module`.

    Parameters the loss never touches get zero gradients; any non-finite
    gradient raises.
    """
    named = list(module.named_parameters())
    loss = loss_fn()
    if not loss.requires_grad:
        return {n: torch.zeros_like(p) for n, p in named}
    grads = torch.autograd.grad(
        loss, [p for _, p in named], allow_unused=True
    )
    out = {}
    for (name, p), g in zip(named, grads):
        if g is None:
            g = torch.zeros_like(p)
        elif not torch.isfinite(g).all():
            raise NonFiniteGradientError(f"non-finite gradient in block {name}")
        out[name] = g
    return out


def to_nchw(images: np.ndarray) -> torch.Tensor:
    """(B, H, W, C) float numpy stack -> (B, C, H, W) float32 tensor."""
    return torch.from_numpy(
        np.ascontiguousarray(images.transpose(0, 3, 1, 2).astype(np.float32))
    )


# ---------------------------------------------------------------------------
# Checkpoint container: magic, 8-byte little-endian header length, JSON
# header, then raw little-endian float32 blocks in header order.
# ---------------------------------------------------------------------------


def write_checkpoint(
    path: str | Path, header: dict, blocks: list[tuple[str, torch.Tensor]]
) -> None:
    header = dict(header)
    header["format_version"] = CHECKPOINT_VERSION
    header["blocks"] = [
        {"name": n, "shape": list(t.shape)} for n, t in blocks
    ]
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(len(payload).to_bytes(8, "little"))
            fh.write(payload)
            for _, t in blocks:
                arr = t.detach().cpu().numpy().astype("<f4", copy=False)
                fh.write(np.ascontiguousarray(arr).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a stainforge checkpoint")
    header_len = int.from_bytes(raw[4:12], "little")
    if len(raw) < 12 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad header: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise VersionError(
            f"{path}: unsupported format version {header.get('format_version')}"
        )
    offset = 12 + header_len
    blocks: dict[str, np.ndarray] = {}
    for spec in header["blocks"]:
        count = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise FormatError(f"{path}: truncated block {spec['name']}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        blocks[spec["name"]] = arr.reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return header, blocks


def load_blocks_into(module: nn.Module, blocks: dict[str, np.ndarray]) -> None:
    """Copy named float blocks into a module, bit-exactly."""
    targets = dict(float_blocks(module))
    missing = set(targets) - set(blocks)
    if missing:
        raise FormatError(f"checkpoint missing blocks: {sorted(missing)}")
    with torch.no_grad():
        for name, tensor in targets.items():
            arr = blocks[name]
            if tuple(arr.shape) != tuple(tensor.shape):
                raise FormatError(
                    f"block {name}: shape {arr.shape} != {tuple(tensor.shape)}"
                )
            tensor.copy_(torch.from_numpy(arr))


def save_net(
    module: nn.Module, path: str | Path, seed: int | None = None, stage: int | None = None
) -> None:
    header = {
        "kind": module.kind,
        "arch": asdict(module.cfg),
        "seed": seed,
        "stage": stage,
    }
    write_checkpoint(path, header, float_blocks(module))


def load_net(path: str | Path) -> nn.Module:
    header, blocks = read_checkpoint(path)
    kind = header.get("kind")
    if kind not in _BUILDERS:
        raise FormatError(f"{path}: unknown network kind {kind!r}")
    module = _BUILDERS[kind](ArchConfig(**header["arch"]))
    load_blocks_into(module, blocks)
    return module
