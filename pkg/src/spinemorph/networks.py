"""Segmentation and angle-regression networks, plus checkpoint files.

``ResUNetPlusPlus`` pairs a ResNet34-style encoder (basic residual blocks
repeated 3, 4, 6, 3 times) with UNet++ nested dense skip connections and a
three-channel sigmoid output (region, centerline, boundary).

``EfficientNetRegressor`` is an EfficientNet built from the b0 stage table
scaled by width/depth multipliers (b4 by default) whose classifier is replaced
by a linear map to three Cobb angles.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
from torch import nn

INPUT_CHANNELS = ("image", "region", "centerline", "boundary")

FOREGROUND_PRIOR = 0.05

CHECKPOINT_FORMAT = "spinemorph-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """A model or checkpoint configuration is invalid or inconsistent."""


def _check_size(size, divisor=32):
    h, w = size
    if h <= 0 or w <= 0 or h % divisor or w % divisor:
        raise ConfigError(f"input size {h}x{w} must be positive and divisible by {divisor}")


def _he_init(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------
# segmentation


@dataclass(frozen=True)
class SegNetConfig:
    in_channels: int = 1
    out_channels: int = 3
    encoder_depth_blocks: tuple = (3, 4, 6, 3)
    base_width: int = 64
    input_size: tuple = (512, 256)

    def __post_init__(self):
        object.__setattr__(self, "encoder_depth_blocks", tuple(self.encoder_depth_blocks))
        object.__setattr__(self, "input_size", tuple(self.input_size))
        if self.out_channels != 3:
            raise ConfigError("segmentation output must have 3 channels (region, centerline, boundary)")
        if self.encoder_depth_blocks != (3, 4, 6, 3):
            raise ConfigError(f"encoder blocks must repeat (3, 4, 6, 3), got {self.encoder_depth_blocks}")
        if self.in_channels < 1 or self.base_width < 1:
            raise ConfigError("in_channels and base_width must be positive")
        _check_size(self.input_size)


def conv_bn_relu(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
        nn.BatchNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class BasicBlock(nn.Module):
    """Two 3x3 convolutions with batch norm and an identity (or projected) shortcut."""

    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.relu = nn.ReLU(inplace=True)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = self.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu(out + self.shortcut(x))


class UpModule(nn.Module):
    """3x3 stride-2 transposed convolution followed by conv, batch norm, ReLU."""

    def __init__(self, cin, cout):
        super().__init__()
        self.deconv = nn.ConvTranspose2d(cin, cout, 3, stride=2, padding=1, output_padding=1)
        self.conv = conv_bn_relu(cout, cout)

    def forward(self, x):
        return self.conv(self.deconv(x))


class ResUNetPlusPlus(nn.Module):
    """Residual encoder with UNet++ nested skip pathways.

    Node ``X[i][j]`` sits at encoder depth ``i`` (resolution ``1 / 2**(i+1)``)
    after ``j`` decoder steps; it sees every earlier node at its depth plus an
    upsampled ``X[i+1][j-1]``.
    """

    def __init__(self, cfg: SegNetConfig = SegNetConfig()):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_width
        self.widths = (b, b, 2 * b, 4 * b, 8 * b)
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, b, 7, stride=2, padding=3, bias=False),
            nn.BatchNorm2d(b),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.MaxPool2d(3, stride=2, padding=1)
        layers = []
        cin = b
        for k, (n, stride) in enumerate(zip(cfg.encoder_depth_blocks, (1, 2, 2, 2))):
            cout = self.widths[k + 1]
            blocks = [BasicBlock(cin, cout, stride)] + [BasicBlock(cout, cout) for _ in range(n - 1)]
            layers.append(nn.Sequential(*blocks))
            cin = cout
        self.layers = nn.ModuleList(layers)

        self.up = nn.ModuleDict()
        self.nodes = nn.ModuleDict()
        for j in range(1, 5):
            for i in range(0, 5 - j):
                w = self.widths[i]
                self.up[f"{i}_{j}"] = UpModule(self.widths[i + 1], w)
                self.nodes[f"{i}_{j}"] = nn.Sequential(conv_bn_relu(w * (j + 1), w), conv_bn_relu(w, w))
        self.final_up = UpModule(b, b)
        self.head = nn.Conv2d(b, cfg.out_channels, 1)
        _he_init(self)
        # start every map at a small foreground probability; the targets are sparse
        nn.init.constant_(self.head.bias, math.log(FOREGROUND_PRIOR / (1 - FOREGROUND_PRIOR)))

    def forward(self, x):
        if tuple(x.shape[-2:]) != self.cfg.input_size:
            h, w = x.shape[-2:]
            if h % 32 or w % 32:
                raise ConfigError(f"input size {h}x{w} not divisible by 32")
        feats = [self.stem(x)]
        y = self.pool(feats[0])
        for layer in self.layers:
            y = layer(y)
            feats.append(y)
        grid = {(i, 0): f for i, f in enumerate(feats)}
        for j in range(1, 5):
            for i in range(0, 5 - j):
                skip = [grid[(i, k)] for k in range(j)]
                up = self.up[f"{i}_{j}"](grid[(i + 1, j - 1)])
                grid[(i, j)] = self.nodes[f"{i}_{j}"](torch.cat(skip + [up], dim=1))
        return torch.sigmoid(self.head(self.final_up(grid[(0, 4)])))


def seg_forward(model: ResUNetPlusPlus, image: torch.Tensor) -> torch.Tensor:
    """Map a ``(N, 1, H, W)`` batch in [0, 1] to ``(N, 3, H, W)`` probabilities."""
    if image.ndim != 4 or image.shape[1] != model.cfg.in_channels:
        raise ConfigError(f"expected (N, {model.cfg.in_channels}, H, W) input, got {tuple(image.shape)}")
    return model(image)


# --------------------------------------------------------------------------
# regression

# expansion ratio, kernel, stride, output channels, repeats
B0_STAGES = (
    (1, 3, 1, 16, 1),
    (6, 3, 2, 24, 2),
    (6, 5, 2, 40, 2),
    (6, 3, 2, 80, 3),
    (6, 5, 1, 112, 3),
    (6, 5, 2, 192, 4),
    (6, 3, 1, 320, 1),
)


def round_filters(channels: int, width_mult: float, divisor: int = 8) -> int:
    c = channels * width_mult
    out = max(divisor, int(c + divisor / 2) // divisor * divisor)
    if out < 0.9 * c:
        out += divisor
    return int(out)


def round_repeats(repeats: int, depth_mult: float) -> int:
    return int(math.ceil(repeats * depth_mult))


@dataclass(frozen=True)
class StageSpec:
    expand: int
    kernel: int
    stride: int
    in_channels: int
    out_channels: int
    repeats: int


@dataclass(frozen=True)
class RegNetConfig:
    """EfficientNet regressor configuration; defaults are the b4 scaling."""

    in_channels: int = 4
    out_dim: int = 3
    width_mult: float = 1.4
    depth_mult: float = 1.8
    dropout: float = 0.4
    se_ratio: float = 0.25
    input_size: tuple = (512, 256)
    inputs: tuple = INPUT_CHANNELS

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        if self.out_dim != 3:
            raise ConfigError("regressor must output 3 angles")
        if not self.inputs or self.inputs[0] != "image" or any(c not in INPUT_CHANNELS for c in self.inputs):
            raise ConfigError(f"inputs must start with 'image' and be drawn from {INPUT_CHANNELS}")
        if list(self.inputs) != [c for c in INPUT_CHANNELS if c in self.inputs]:
            raise ConfigError(f"inputs must keep the canonical order {INPUT_CHANNELS}")
        if self.in_channels != len(self.inputs):
            raise ConfigError(f"in_channels={self.in_channels} does not match inputs {self.inputs}")
        _check_size(self.input_size)

    @classmethod
    def for_inputs(cls, inputs, **kwargs) -> "RegNetConfig":
        inputs = tuple(inputs)
        return cls(in_channels=len(inputs), inputs=inputs, **kwargs)

    @property
    def stem_channels(self) -> int:
        return round_filters(32, self.width_mult)

    @property
    def head_channels(self) -> int:
        return round_filters(1280, self.width_mult)

    def stages(self) -> list[StageSpec]:
        """Scaled stage table (the topology descriptor)."""
        out, cin = [], self.stem_channels
        for e, k, s, c, r in B0_STAGES:
            cout = round_filters(c, self.width_mult)
            out.append(StageSpec(e, k, s, cin, cout, round_repeats(r, self.depth_mult)))
            cin = cout
        return out


class SqueezeExcite(nn.Module):
    def __init__(self, channels, squeezed):
        super().__init__()
        self.reduce = nn.Conv2d(channels, squeezed, 1)
        self.expand = nn.Conv2d(squeezed, channels, 1)
        self.act = nn.SiLU()

    def forward(self, x):
        s = x.mean(dim=(2, 3), keepdim=True)
        return x * torch.sigmoid(self.expand(self.act(self.reduce(s))))


class MBConv(nn.Module):
    """Mobile inverted bottleneck: expand, depthwise conv, squeeze-excite, project."""

    def __init__(self, cin, cout, expand, kernel, stride, se_ratio):
        super().__init__()
        mid = cin * expand
        layers = []
        if expand != 1:
            layers += [nn.Conv2d(cin, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.SiLU()]
        layers += [
            nn.Conv2d(mid, mid, kernel, stride=stride, padding=kernel // 2, groups=mid, bias=False),
            nn.BatchNorm2d(mid),
            nn.SiLU(),
            SqueezeExcite(mid, max(1, int(cin * se_ratio))),
            nn.Conv2d(mid, cout, 1, bias=False),
            nn.BatchNorm2d(cout),
        ]
        self.block = nn.Sequential(*layers)
        self.residual = stride == 1 and cin == cout

    def forward(self, x):
        out = self.block(x)
        return out + x if self.residual else out


class EfficientNetRegressor(nn.Module):
    def __init__(self, cfg: RegNetConfig = RegNetConfig()):
        super().__init__()
        self.cfg = cfg
        stem = cfg.stem_channels
        self.stem = nn.Sequential(
            nn.Conv2d(cfg.in_channels, stem, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(stem),
            nn.SiLU(),
        )
        blocks = []
        self.stage_specs = cfg.stages()
        for spec in self.stage_specs:
            for r in range(spec.repeats):
                blocks.append(MBConv(
                    spec.in_channels if r == 0 else spec.out_channels, spec.out_channels,
                    spec.expand, spec.kernel, spec.stride if r == 0 else 1, cfg.se_ratio,
                ))
        self.blocks = nn.Sequential(*blocks)
        last = self.stage_specs[-1].out_channels
        self.head_conv = nn.Sequential(
            nn.Conv2d(last, cfg.head_channels, 1, bias=False),
            nn.BatchNorm2d(cfg.head_channels),
            nn.SiLU(),
        )
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.dropout = nn.Dropout(cfg.dropout)
        self.fc = nn.Linear(cfg.head_channels, cfg.out_dim)
        _he_init(self)
        self._init_stem()
        nn.init.zeros_(self.fc.bias)

    def _init_stem(self):
        # one single-channel He kernel shared by every input channel
        w = self.stem[0].weight
        single = torch.empty(w.shape[0], 1, *w.shape[2:])
        nn.init.kaiming_normal_(single, mode="fan_in", nonlinearity="relu")
        with torch.no_grad():
            w.copy_(single.repeat(1, w.shape[1], 1, 1) / w.shape[1])

    @property
    def cam_layer(self) -> nn.Module:
        """Last convolutional block before global pooling."""
        return self.head_conv

    def features(self, x):
        return self.head_conv(self.blocks(self.stem(x)))

    def forward(self, x):
        if x.shape[1] != self.cfg.in_channels:
            raise ConfigError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        f = self.pool(self.features(x)).flatten(1)
        return self.fc(self.dropout(f))


def reg_forward(model: EfficientNetRegressor, x: torch.Tensor) -> torch.Tensor:
    """Map a ``(N, C, H, W)`` batch to ``(N, 3)`` angles in degrees."""
    if x.ndim != 4:
        raise ConfigError(f"expected a 4-D batch, got shape {tuple(x.shape)}")
    return model(x)


def adapt_stem_weight(weight: torch.Tensor, in_channels: int) -> torch.Tensor:
    """Average a pretrained stem kernel over its input channels and spread it over ``in_channels``."""
    mean = weight.mean(dim=1, keepdim=True)
    return mean.repeat(1, in_channels, 1, 1) * (weight.shape[1] / in_channels)


def load_backbone_weights(model: EfficientNetRegressor, state_dict: dict) -> list[str]:
    """Load user-supplied weights, adapting the stem and skipping the angle head.

    Returns the names of parameters that were not found or had mismatched shapes.
    """
    own = model.state_dict()
    loaded, skipped = {}, []
    for name, value in state_dict.items():
        if name.startswith("fc."):
            continue
        if name == "stem.0.weight" and value.shape[1] != own[name].shape[1]:
            value = adapt_stem_weight(value, own[name].shape[1])
        if name in own and own[name].shape == value.shape:
            loaded[name] = value
        else:
            skipped.append(name)
    model.load_state_dict(loaded, strict=False)
    return skipped + [n for n in own if n not in loaded and not n.startswith("fc.")]


# --------------------------------------------------------------------------
# checkpoints

MODEL_KINDS = {"seg": (SegNetConfig, ResUNetPlusPlus), "reg": (RegNetConfig, EfficientNetRegressor)}


def config_dict(cfg) -> dict:
    return json.loads(json.dumps(asdict(cfg)))


def config_from_dict(kind: str, d: dict):
    cls = MODEL_KINDS[kind][0]
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown {kind} config keys: {sorted(unknown)}")
    return cls(**d)


def build_model(kind: str, cfg):
    return MODEL_KINDS[kind][1](cfg)


def model_kind(model: nn.Module) -> str:
    for kind, (_, cls) in MODEL_KINDS.items():
        if isinstance(model, cls):
            return kind
    raise ConfigError(f"unsupported model type {type(model).__name__}")


def save_checkpoint(path, model: nn.Module, optimizer=None, epoch: int = 0, extra: dict | None = None) -> Path:
    """Write config, weights, optimizer state and epoch counter to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = model_kind(model)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config_dict(model.cfg),
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "extra": extra or {},
    }, path)
    return path


def load_checkpoint(path, expected_config=None, kind: str | None = None) -> dict:
    """Read a checkpoint, refusing unknown formats and config mismatches."""
    ckpt = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if ckpt.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {ckpt.get('version')}")
    if kind is not None and ckpt["kind"] != kind:
        raise ConfigError(f"{path} holds a {ckpt['kind']} model, expected {kind}")
    if expected_config is not None and config_dict(expected_config) != ckpt["config"]:
        raise ConfigError(f"{path}: config mismatch: stored {ckpt['config']} vs expected {config_dict(expected_config)}")
    return ckpt


def model_from_checkpoint(path, kind: str | None = None, expected_config=None):
    """Rebuild the model stored in ``path`` in evaluation mode."""
    ckpt = load_checkpoint(path, expected_config, kind)
    model = build_model(ckpt["kind"], config_from_dict(ckpt["kind"], ckpt["config"]))
    model.load_state_dict(ckpt["state_dict"])
    model.eval()
    return model
