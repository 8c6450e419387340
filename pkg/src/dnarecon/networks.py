"""Refinement U-nets, the Wasserstein critic, and the two-generator DNA model."""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backprojection import PointwiseBackprojection, fbp_reconstruct
from .filtration import FilterStack, ramp_filter
from .geometry import GeometryConfig, circle_mask

CHECKPOINT_MAGIC = b"DNA1"
PAPER_CRITIC_CHANNELS = (64, 64, 128, 128, 256, 256)


# --------------------------------------------------------------------------
# U-net


class ResNeXtBlock(nn.Module):
    """Aggregated residual transform: 1x1 -> grouped 3x3 -> 1x1, added to the input."""

    def __init__(self, width: int, cardinality: int):
        super().__init__()
        if width % cardinality:
            raise ValueError(f"width {width} is not divisible by cardinality {cardinality}")
        self.reduce = nn.Conv2d(width, width, 1)
        self.grouped = nn.Conv2d(width, width, 3, padding=1, groups=cardinality)
        self.expand = nn.Conv2d(width, width, 1)

    def forward(self, x):
        h = F.relu(self.reduce(x))
        h = F.relu(self.grouped(h))
        return F.relu(x + self.expand(h))


class UNet(nn.Module):
    """Four stride-2 down-sampling and four stride-2 up-sampling stages with skip concatenation.

    Every down/up layer is a 3x3 (transpose) convolution followed by ReLU;
    each encoder stage ends in a ResNeXt block. The final 3x3 head is linear
    and predicts a one-channel correction.
    """

    depth = 4

    def __init__(self, in_channels: int = 1, width: int = 36, cardinality: int = 4):
        super().__init__()
        self.in_channels = in_channels
        self.width = width
        self.cardinality = cardinality
        w = width
        self.stem = nn.Conv2d(in_channels, w, 3, padding=1)
        self.down = nn.ModuleList(nn.Conv2d(w, w, 3, stride=2, padding=1) for _ in range(self.depth))
        self.blocks = nn.ModuleList(ResNeXtBlock(w, cardinality) for _ in range(self.depth))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(w, w, 3, stride=2, padding=1, output_padding=1) for _ in range(self.depth)
        )
        self.fuse = nn.ModuleList(nn.Conv2d(2 * w, w, 3, padding=1) for _ in range(self.depth))
        self.head = nn.Conv2d(w, 1, 3, padding=1)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None, head_std: float = 1e-3) -> None:
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                    fan_in = m.weight[0].numel() if isinstance(m, nn.Conv2d) else m.weight.shape[0] * 9 // 4
                    m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * math.sqrt(2.0 / fan_in))
                    m.bias.zero_()
            self.head.weight.copy_(torch.randn(self.head.weight.shape, generator=generator) * head_std)

    def zero_(self) -> "UNet":
        with torch.no_grad():
            for p in self.parameters():
                p.zero_()
        return self

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        n = x.shape[-1]
        if x.shape[-2] != n or n % (2**self.depth):
            raise ValueError(f"U-net input must be square with size divisible by {2**self.depth}, got {tuple(x.shape)}")
        if x.shape[1] != self.in_channels:
            raise ValueError(f"U-net expects {self.in_channels} channels, got {x.shape[1]}")
        h = F.relu(self.stem(x))
        skips = []
        for down, block in zip(self.down, self.blocks):
            skips.append(h)
            h = block(F.relu(down(h)))
        for up, fuse in zip(self.up, self.fuse):
            h = F.relu(up(h))
            h = F.relu(fuse(torch.cat([h, skips.pop()], dim=1)))
        return self.head(h)


# --------------------------------------------------------------------------
# critic


class Critic(nn.Module):
    """Six 3x3 convolutions (strides 1, 2, 1, 2, 1, 2) and two dense layers, leaky ReLU 0.2.

    The last dense layer is linear: the Wasserstein critic's score is unbounded.
    """

    strides = (1, 2, 1, 2, 1, 2)

    def __init__(self, image_size: int, channels=PAPER_CRITIC_CHANNELS, hidden: int = 1024, slope: float = 0.2):
        super().__init__()
        channels = tuple(channels)
        if len(channels) != 6:
            raise ValueError("critic needs exactly six convolution widths")
        if image_size % 8:
            raise ValueError("critic input size must be divisible by 8")
        self.image_size = image_size
        self.channels = channels
        self.hidden = hidden
        self.slope = slope
        ins = (1,) + channels[:-1]
        self.convs = nn.ModuleList(
            nn.Conv2d(ci, co, 3, stride=s, padding=1) for ci, co, s in zip(ins, channels, self.strides)
        )
        flat = channels[-1] * (image_size // 8) ** 2
        self.fc1 = nn.Linear(flat, hidden)
        self.fc2 = nn.Linear(hidden, 1)
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None) -> None:
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    fan_in = m.weight[0].numel()
                    gain = math.sqrt(2.0 / (1 + self.slope**2))
                    m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * gain / math.sqrt(fan_in))
                    m.bias.zero_()

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return critic_forward(img, self)


def critic_forward(img: torch.Tensor, critic: Critic) -> torch.Tensor:
    """One unbounded score per batch item for ``img[B, 1, N, N]``."""
    if img.dim() != 4 or img.shape[1] != 1 or img.shape[-1] != critic.image_size or img.shape[-2] != critic.image_size:
        n = critic.image_size
        raise ValueError(f"critic expects [B, 1, {n}, {n}], got {tuple(img.shape)}")
    h = img
    for conv in critic.convs:
        h = F.leaky_relu(conv(h), critic.slope)
    h = F.leaky_relu(critic.fc1(h.flatten(1)), critic.slope)
    return critic.fc2(h).squeeze(1)


# --------------------------------------------------------------------------
# DNA


@dataclass
class DNAConfig:
    """Architecture hyper-parameters; the geometry fields define the projector."""

    image_size: int = 64
    num_views: int = 16
    angular_span: float = math.pi
    supersample: int = 2
    branches: int = 23
    merge: str = "mean"
    filter_channels: tuple[int, ...] = (1, 8, 8, 1)
    unet_width: int = 36
    cardinality: int = 4
    critic_channels: tuple[int, ...] = PAPER_CRITIC_CHANNELS
    critic_hidden: int = 1024

    @property
    def geometry(self) -> GeometryConfig:
        return GeometryConfig(self.image_size, self.num_views, self.angular_span, supersample=self.supersample)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["filter_channels"] = list(self.filter_channels)
        d["critic_channels"] = list(self.critic_channels)
        return d


class DNA(nn.Module):
    """Filtration, point-wise backprojection and two refinement U-nets, plus the critic.

    ``G1``: ramp -> learned filter -> point-wise backprojection -> circle mask
    -> U-net correction. ``G2``: U-net correction of ``G1`` given the
    concatenation of the analytic FBP image and the ``G1`` image.
    """

    def __init__(self, config: DNAConfig | None = None, seed: int | None = 0):
        super().__init__()
        self.config = config = config or DNAConfig()
        self.geo = config.geometry
        self.filter = FilterStack(config.image_size, config.filter_channels)
        self.bp = PointwiseBackprojection(self.geo, config.branches, config.merge)
        self.unet_g1 = UNet(self.bp.out_channels, config.unet_width, config.cardinality)
        self.unet_g2 = UNet(2, config.unet_width, config.cardinality)
        self.critic = Critic(config.image_size, config.critic_channels, config.critic_hidden)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int | None = 0) -> None:
        gen = torch.Generator()
        gen.manual_seed(0 if seed is None else seed)
        self.filter.reset_parameters(gen)
        self.bp.reset_parameters(gen)
        self.unet_g1.reset_parameters(gen)
        self.unet_g2.reset_parameters(gen)
        self.critic.reset_parameters(gen)

    def set_identity(self) -> "DNA":
        """Zero U-nets, identity filter stack, unit backprojection weights: output == FBP."""
        self.filter.set_identity()
        self.bp.set_identity()
        self.unet_g1.zero_()
        self.unet_g2.zero_()
        return self

    def generator_parameters(self) -> "OrderedDict[str, nn.Parameter]":
        return OrderedDict((k, p) for k, p in self.named_parameters() if not k.startswith("critic."))

    def critic_parameters(self) -> "OrderedDict[str, nn.Parameter]":
        return OrderedDict((k, p) for k, p in self.named_parameters() if k.startswith("critic."))

    def parameter_counts(self) -> dict[str, int]:
        counts = {
            name: sum(p.numel() for p in getattr(self, name).parameters())
            for name in ("filter", "bp", "unet_g1", "unet_g2", "critic")
        }
        counts["total"] = sum(counts.values())
        return counts

    def _batch(self, sino: torch.Tensor) -> torch.Tensor:
        sino = torch.as_tensor(sino, dtype=self.bp.weights.dtype)
        if sino.dim() == 2:
            sino = sino[None]
        if sino.dim() == 3:
            sino = sino[:, None]
        if sino.dim() != 4 or sino.shape[1] != 1:
            raise ValueError(f"sinograms must be [B, 1, V, N], got {tuple(sino.shape)}")
        if tuple(sino.shape[-2:]) != self.geo.sinogram_shape:
            raise ValueError(f"sinogram shape {tuple(sino.shape[-2:])} does not match geometry {self.geo.sinogram_shape}")
        return sino

    def fbp(self, sino: torch.Tensor) -> torch.Tensor:
        return fbp_reconstruct(self._batch(sino), self.geo)

    def g1(self, sino: torch.Tensor) -> torch.Tensor:
        return g1_forward(self._batch(sino), self)

    def g2(self, fbp_img: torch.Tensor, g1_img: torch.Tensor) -> torch.Tensor:
        return g2_forward(fbp_img, g1_img, self)

    def forward(self, sino: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Return ``(fbp, g1, g2)`` images, each ``[B, 1, N, N]``."""
        sino = self._batch(sino)
        fbp_img = fbp_reconstruct(sino, self.geo)
        g1_img = g1_forward(sino, self)
        return fbp_img, g1_img, g2_forward(fbp_img, g1_img, self)


def g1_forward(sino: torch.Tensor, model: DNA) -> torch.Tensor:
    filtered = model.filter(ramp_filter(sino))
    bp = circle_mask(model.bp(filtered))
    base = bp if bp.shape[1] == 1 else bp.mean(dim=1, keepdim=True)
    return base + model.unet_g1(bp)


def g2_forward(fbp_img: torch.Tensor, g1_img: torch.Tensor, model: DNA) -> torch.Tensor:
    if fbp_img.shape != g1_img.shape or fbp_img.dim() != 4 or fbp_img.shape[1] != 1:
        raise ValueError(f"G2 inputs must both be [B, 1, N, N], got {tuple(fbp_img.shape)} and {tuple(g1_img.shape)}")
    return g1_img + model.unet_g2(torch.cat([fbp_img, g1_img], dim=1))


# --------------------------------------------------------------------------
# checkpoints


def write_tensors(path, tensors: Mapping[str, np.ndarray | torch.Tensor]) -> None:
    """Write named float32 tensors in the DNA1 layout."""
    parts = [CHECKPOINT_MAGIC]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
        arr = np.asarray(arr, dtype="<f4").copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        raw_name = name.encode("utf-8")
        if len(raw_name) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    """Read a DNA1 file; rejects unknown magic and truncated records."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: unknown checkpoint magic {data[:4]!r}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    pos = 4
    while pos < len(data):
        try:
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + nlen > len(data):
                raise struct.error("name")
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
        except struct.error as exc:
            raise ValueError(f"{path}: truncated tensor header at byte offset {pos}") from exc
        size = 4 * math.prod(dims)
        if pos + size > len(data):
            raise ValueError(f"{path}: tensor {name!r} needs {size} bytes at offset {pos}, file ends at {len(data)}")
        out[name] = np.frombuffer(data, dtype="<f4", count=math.prod(dims), offset=pos).reshape(dims).astype(np.float32)
        pos += size
    return out


_META_INT = ("image_size", "num_views", "supersample", "branches", "unet_width", "cardinality", "critic_hidden")


def config_tensors(config: DNAConfig) -> "OrderedDict[str, np.ndarray]":
    meta: OrderedDict[str, np.ndarray] = OrderedDict()
    for key in _META_INT:
        meta[f"meta.{key}"] = np.array(getattr(config, key), dtype=np.float32)
    meta["meta.angular_span_over_pi"] = np.array(config.angular_span / math.pi, dtype=np.float32)
    meta["meta.merge_channels"] = np.array(config.merge == "channels", dtype=np.float32)
    meta["meta.filter_channels"] = np.array(config.filter_channels, dtype=np.float32)
    meta["meta.critic_channels"] = np.array(config.critic_channels, dtype=np.float32)
    return meta


def config_from_tensors(tensors: Mapping[str, np.ndarray]) -> DNAConfig:
    try:
        kw = {key: int(tensors[f"meta.{key}"]) for key in _META_INT}
        kw["angular_span"] = float(tensors["meta.angular_span_over_pi"]) * math.pi
        kw["merge"] = "channels" if float(tensors["meta.merge_channels"]) else "mean"
        kw["filter_channels"] = tuple(int(c) for c in tensors["meta.filter_channels"])
        kw["critic_channels"] = tuple(int(c) for c in tensors["meta.critic_channels"])
    except KeyError as exc:
        raise ValueError(f"checkpoint lacks architecture record {exc}") from exc
    return DNAConfig(**kw)


def save_checkpoint(path, model: DNA, extra: Mapping[str, np.ndarray | torch.Tensor] | None = None) -> None:
    tensors: OrderedDict = config_tensors(model.config)
    for name, p in model.state_dict().items():
        tensors[name] = p
    if extra:
        tensors.update(extra)
    write_tensors(path, tensors)


def load_checkpoint(path) -> tuple[DNA, "OrderedDict[str, np.ndarray]"]:
    """Rebuild the model from a checkpoint; returns it and any non-model tensors."""
    tensors = read_tensors(path)
    model = DNA(config_from_tensors(tensors))
    state = model.state_dict()
    missing = [k for k in state if k not in tensors]
    if missing:
        raise ValueError(f"{path}: checkpoint lacks tensors {missing[:5]}")
    for k in state:
        if tuple(tensors[k].shape) != tuple(state[k].shape):
            raise ValueError(f"{path}: tensor {k} has shape {tensors[k].shape}, model expects {tuple(state[k].shape)}")
    model.load_state_dict({k: torch.from_numpy(tensors[k].copy()) for k in state})
    extra = OrderedDict((k, v) for k, v in tensors.items() if k not in state and not k.startswith("meta."))
    return model, extra
