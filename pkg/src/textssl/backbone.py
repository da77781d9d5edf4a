"""Sequence models for text lines: patch/VGG front-ends, Transformer encoder, heads.

Both front-ends map a (B, 40, W) batch to (B, ceil(W/8), dim) frames. Inputs
are right-padded with background to a multiple of 8 and inverted so that ink
is positive and blank paper is zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import torch
from torch import nn
import torch.nn.functional as F

from .dataset import BACKGROUND, LINE_HEIGHT, SUBSAMPLE, LineImage, pad_batch


@dataclass(frozen=True)
class HeadSpec:
    """``Linear(output_size)`` or ``MLP(mlp_layers, mlp_width)`` ending in ``output_size``."""

    kind: str = "linear"
    output_size: int = 512
    mlp_layers: int = 3
    mlp_width: int = 2048

    def __post_init__(self):
        if self.kind not in ("linear", "mlp"):
            raise ValueError(f"unknown head kind {self.kind!r}")
        if self.output_size < 1:
            raise ValueError("head output_size must be >= 1")
        if self.kind == "mlp" and self.mlp_layers < 2:
            raise ValueError("an MLP head needs at least 2 layers")

    @classmethod
    def linear(cls, size: int) -> "HeadSpec":
        return cls("linear", size)

    @classmethod
    def mlp(cls, layers: int, width: int, output_size: Optional[int] = None) -> "HeadSpec":
        return cls("mlp", output_size or width, layers, width)

    def __str__(self):
        if self.kind == "linear":
            return f"Linear({self.output_size})"
        return f"MLP({self.mlp_layers}, {self.mlp_width})"


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "vggt"
    dim: int = 512
    layers: int = 6
    heads: int = 8
    mlp_ratio: int = 4
    head: HeadSpec = field(default_factory=HeadSpec)
    conv_channels: tuple[int, ...] = (64, 128, 256, 512)
    dropout: float = 0.0
    use_pe: bool = True

    def __post_init__(self):
        if self.backbone not in ("vit", "vggt"):
            raise ValueError(f"unknown backbone {self.backbone!r}; expected 'vit' or 'vggt'")
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.dim % 2:
            raise ValueError("dim must be even for sinusoidal positional encoding")
        if isinstance(self.head, dict):
            object.__setattr__(self, "head", HeadSpec(**self.head))
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "head" in d and isinstance(d["head"], dict):
            d["head"] = HeadSpec(**d["head"])
        return cls(**d)


def positional_encoding(length: int, dim: int) -> torch.Tensor:
    """Sinusoidal table: PE[p, 2i] = sin(p / 10000^(2i/dim)), PE[p, 2i+1] = cos(...)."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dim, got {dim}")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    rate = torch.pow(10000.0, torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos / rate)
    pe[:, 1::2] = torch.cos(pos / rate)
    return pe


def prepare_input(x: torch.Tensor) -> torch.Tensor:
    """(B, 40, W) or (B, 1, 40, W) pixels -> padded, inverted (B, 1, 40, W8)."""
    if x.dim() == 3:
        x = x.unsqueeze(1)
    if x.dim() != 4 or x.shape[2] != LINE_HEIGHT:
        raise ValueError(f"expected line images of height {LINE_HEIGHT}, got shape {tuple(x.shape)}")
    pad = (-x.shape[-1]) % SUBSAMPLE
    if pad:
        x = F.pad(x, (0, pad), value=BACKGROUND)
    return 1.0 - x


def _init_projection(linear: nn.Linear):
    # fan-in scaled so image content is not drowned by the positional encoding at init
    nn.init.trunc_normal_(linear.weight, std=linear.in_features ** -0.5)
    nn.init.zeros_(linear.bias)


class PatchEmbed(nn.Module):
    """Linear projection of each 40x8 vertical slice."""

    subsample_factor = SUBSAMPLE

    def __init__(self, dim: int):
        super().__init__()
        self.proj = nn.Linear(LINE_HEIGHT * SUBSAMPLE, dim)
        _init_projection(self.proj)

    def forward(self, x):
        x = prepare_input(x)
        b, _, h, w = x.shape
        slices = x.reshape(b, h, w // SUBSAMPLE, SUBSAMPLE).permute(0, 2, 1, 3).reshape(b, w // SUBSAMPLE, h * SUBSAMPLE)
        return self.proj(slices)


def _conv_block(cin, cout, n):
    layers = []
    for i in range(n):
        layers += [nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
    return layers


class VggEncoder(nn.Module):
    """Ten 3x3 conv layers (2-2-3-3) with batch norm and ReLU, 2x2 max-pool after
    the first three blocks. The remaining 5 rows are folded into channels and
    projected to ``dim``."""

    subsample_factor = SUBSAMPLE

    def __init__(self, dim: int, channels: Sequence[int] = (64, 128, 256, 512), block_sizes=(2, 2, 3, 3)):
        super().__init__()
        if len(channels) != 4:
            raise ValueError("VggEncoder takes four channel widths")
        layers, cin = [], 1
        for k, (c, n) in enumerate(zip(channels, block_sizes)):
            layers += _conv_block(cin, c, n)
            if k < 3:
                layers.append(nn.MaxPool2d(2))
            cin = c
        self.convs = nn.Sequential(*layers)
        for m in self.convs.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)
        self.proj = nn.Linear(channels[-1] * (LINE_HEIGHT // SUBSAMPLE), dim)
        _init_projection(self.proj)

    def forward(self, x):
        y = self.convs(prepare_input(x))
        b, c, h, l = y.shape
        return self.proj(y.permute(0, 3, 1, 2).reshape(b, l, c * h))


class TransformerEncoder(nn.Module):
    """Pre-norm Transformer encoder; sinusoidal positions are added once at the input."""

    def __init__(self, dim, layers, heads, mlp_ratio=4, dropout=0.0, use_pe=True, max_len=4096):
        super().__init__()
        self.dim = dim
        self.use_pe = use_pe
        layer = nn.TransformerEncoderLayer(
            dim, heads, dim * mlp_ratio, dropout=dropout, activation="gelu", batch_first=True, norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.register_buffer("pe", positional_encoding(max_len, dim).float(), persistent=False)

    def forward(self, frames, padding_mask=None):
        if frames.shape[-1] != self.dim:
            raise ValueError(f"feature dim {frames.shape[-1]} != model dim {self.dim}")
        length = frames.shape[1]
        if self.use_pe:
            if length > self.pe.shape[0]:
                self.pe = positional_encoding(length, self.dim).to(frames)
            frames = frames + self.pe[:length].to(frames.dtype)
        return self.norm(self.blocks(frames, src_key_padding_mask=padding_mask))


def build_head(spec: HeadSpec, dim: int) -> nn.Module:
    if spec.kind == "linear":
        return nn.Linear(dim, spec.output_size)
    return MLPHead(dim, spec)


class MLPHead(nn.Module):
    """Per-frame MLP (Linear-BN-ReLU)*(n-1) + Linear; batch norm runs over all frames in the batch."""

    def __init__(self, dim, spec: HeadSpec):
        super().__init__()
        layers, cin = [], dim
        for _ in range(spec.mlp_layers - 1):
            layers += [nn.Linear(cin, spec.mlp_width), nn.BatchNorm1d(spec.mlp_width), nn.ReLU(inplace=True)]
            cin = spec.mlp_width
        layers.append(nn.Linear(cin, spec.output_size))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        shape = x.shape
        return self.net(x.reshape(-1, shape[-1])).reshape(*shape[:-1], -1)


class SequenceModel(nn.Module):
    """Front-end + Transformer + swappable per-frame head."""

    subsample_factor = SUBSAMPLE

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        if config.backbone == "vit":
            self.embed = PatchEmbed(config.dim)
        else:
            self.embed = VggEncoder(config.dim, config.conv_channels)
        self.encoder = TransformerEncoder(
            config.dim, config.layers, config.heads, config.mlp_ratio, config.dropout, config.use_pe,
        )
        self.head = build_head(config.head, config.dim)

    def features(self, x, frame_lengths=None):
        """Backbone outputs (before the head), shape (B, L, dim)."""
        frames = self.embed(x)
        mask = None
        if frame_lengths is not None:
            idx = torch.arange(frames.shape[1], device=frames.device)
            mask = idx[None, :] >= torch.as_tensor(frame_lengths, device=frames.device)[:, None]
            if not mask.any():
                mask = None
        return self.encoder(frames, mask)

    def forward(self, x, frame_lengths=None):
        return self.head(self.features(x, frame_lengths))


def build_model(config: ModelConfig, seed: Optional[int] = None) -> SequenceModel:
    if seed is not None:
        torch.manual_seed(seed)
    return SequenceModel(config)


def replace_head(model: SequenceModel, spec: HeadSpec, seed: Optional[int] = None) -> SequenceModel:
    """Swap in a freshly initialised head; backbone parameters are untouched."""
    if seed is not None:
        torch.manual_seed(seed)
    model.head = build_head(spec, model.config.dim)
    model.config = replace(model.config, head=spec)
    return model


def backbone_state(model: SequenceModel) -> dict:
    return {k: v for k, v in model.state_dict().items() if not k.startswith("head.")}


def batch_tensor(lines: Sequence[LineImage], min_width: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    px, frames = pad_batch(lines, min_width)
    return torch.from_numpy(px), torch.from_numpy(frames)


# --------------------------------------------------------------------------
# checkpoints

def _config_dict(config: ModelConfig) -> dict:
    d = asdict(config)
    d["conv_channels"] = list(d["conv_channels"])
    return d


def save_checkpoint(model: SequenceModel, path, **extra) -> Path:
    """Write config echo + named tensors (+ any extra metadata) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"kind": "sequence_model", "config": _config_dict(model.config),
               "state_dict": model.state_dict(), "meta": extra}
    torch.save(payload, path)
    return path


def load_checkpoint(path, map_location="cpu") -> SequenceModel:
    payload = torch.load(path, map_location=map_location, weights_only=False)
    if payload.get("kind") != "sequence_model":
        raise ValueError(f"{path} is not a sequence-model checkpoint")
    model = SequenceModel(ModelConfig.from_dict(payload["config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def checkpoint_meta(path) -> dict:
    """Extra metadata stored alongside the weights (e.g. the OCR charset)."""
    payload = torch.load(path, map_location="cpu", weights_only=False)
    return dict(payload.get("meta") or {})


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def describe(model: SequenceModel) -> str:
    c = model.config
    front = "ViT patch embedding (40x8 slices)" if c.backbone == "vit" else f"VggT conv encoder {list(c.conv_channels)}"
    lines = [
        f"backbone:    {c.backbone}  ({front})",
        f"transformer: {c.layers} layers, dim {c.dim}, {c.heads} heads, mlp ratio {c.mlp_ratio}, "
        f"positional encoding {'on' if c.use_pe else 'off'}",
        f"head:        {c.head}",
        f"parameters:  front-end {count_parameters(model.embed):,}, transformer {count_parameters(model.encoder):,}, "
        f"head {count_parameters(model.head):,}, total {count_parameters(model):,}",
    ]
    return "\n".join(lines)
