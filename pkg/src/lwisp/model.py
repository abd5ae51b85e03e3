"""Student (RAW to RGB) and teacher (RGB to RGB) networks.

Both share one U-Net trunk: a stem, four stride-2 down blocks each followed
by FGAM, a bottleneck fed with a pooled global feature vector, and four CCB
up stages. The student adds a fifth CCB stage as its head because packed RAW
input sits at half the output resolution; the teacher instead folds its RGB
input to half resolution with a space-to-depth step and unfolds the result.

Trunk convolution count (24 for the default student): 2 stem
convs, 2 per down block, the 1x1 global-vector projection, 2 bottleneck
convs, 2 fusion convs per up stage, and 3 head fusion convs. Convolutions
inside FGAM and CCB modules are reported separately.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .nn import ACTIVATIONS, OUTPUT_GAIN, Conv2d, DownBlock, Module, UpStage, activate
from .tensor import Tensor, broadcast_to, concat_channels, sigmoid

LOCATIONS = ("down1", "down2", "down3", "down4", "up1", "up2", "up3", "up4")
DEFAULT_TAPS = ("up2", "up3", "up4")


@dataclass
class ModelConfig:
    widths: tuple = (16, 32, 64, 128)
    use_fgam: bool = True
    reduction: int = 4
    spatial_kernel: int = 7
    fgam_fusion: str = "add"
    activation: str = "leaky_relu"
    global_vector: bool = True
    # feed the contextual complement with the pre-FGAM encoder feature
    ctx_pre_fgam: bool = False
    adjust_kernel: int = 1
    # width of the full-resolution output head
    head_width: int = 24
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if len(self.widths) != 4 or min(self.widths) < 1:
            raise ValueError(f"widths must be four positive integers, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TapSet:
    """Ordered (student location, teacher location) pairs for feature distillation."""

    pairs: list = field(default_factory=lambda: [(t, t) for t in DEFAULT_TAPS])

    def __post_init__(self):
        self.pairs = [tuple(p) for p in self.pairs]
        for s, t in self.pairs:
            for loc in (s, t):
                if loc not in LOCATIONS:
                    raise ValueError(f"unknown tap location {loc!r}; expected one of {LOCATIONS}")

    @classmethod
    def parse(cls, spec: str) -> "TapSet":
        """Parse ``up2,up3,up4`` (paired by identical name) or ``up2:up2,...``."""
        pairs = []
        for item in spec.split(","):
            item = item.strip()
            if not item:
                continue
            s, _, t = item.partition(":")
            pairs.append((s, t or s))
        return cls(pairs)

    @property
    def student(self) -> list[str]:
        return [s for s, _ in self.pairs]

    @property
    def teacher(self) -> list[str]:
        return [t for _, t in self.pairs]

    def __str__(self) -> str:
        return ",".join(s if s == t else f"{s}:{t}" for s, t in self.pairs)


class UNetTrunk(Module):
    def __init__(self, in_channels: int, cfg: ModelConfig, rng: np.random.Generator):
        dt = np.dtype(cfg.dtype)
        act = cfg.activation
        w = cfg.widths
        self.cfg = cfg
        fgam = (
            dict(reduction=cfg.reduction, spatial_kernel=cfg.spatial_kernel, fusion=cfg.fgam_fusion)
            if cfg.use_fgam
            else None
        )
        self.stem = [Conv2d(in_channels, w[0], 3, rng, dtype=dt), Conv2d(w[0], w[0], 3, rng, dtype=dt)]
        enc = [w[0]]
        pre = [w[0]]
        self.down = []
        for width in w:
            block = DownBlock(enc[-1], width, rng, act, fgam, dt)
            self.down.append(block)
            enc.append(block.out_channels)
            pre.append(width)
        ctx = pre if cfg.ctx_pre_fgam else enc
        bottom = enc[4]
        self.global_proj = Conv2d(bottom, w[3], 1, rng, dtype=dt) if cfg.global_vector else None
        b_in = bottom + (w[3] if cfg.global_vector else 0)
        self.bottleneck = [Conv2d(b_in, w[3], 3, rng, dtype=dt), Conv2d(w[3], w[3], 3, rng, dtype=dt)]
        self.up = []
        dec = w[3]
        for level, width in zip((3, 2, 1, 0), (w[3], w[2], w[1], w[0])):
            stage = UpStage(
                enc[level + 1], dec, ctx[level], width, max(width // 2, 1), rng, act,
                adjust_kernel=cfg.adjust_kernel, dtype=dt,
            )
            self.up.append(stage)
            dec = stage.out_channels
        self.enc_channels = enc
        self.out_channels = dec

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor, dict]:
        """Return ``(decoder output, stem feature, named intermediate features)``."""
        act = self.cfg.activation
        h = x
        for conv in self.stem:
            h = activate(conv(h), act)
        enc, pre = [h], [h]
        feats = {}
        for i, block in enumerate(self.down):
            h, p = block(h)
            enc.append(h)
            pre.append(p)
            feats[f"down{i + 1}"] = h
        ctx = pre if self.cfg.ctx_pre_fgam else enc
        b = enc[4]
        if self.global_proj is not None:
            g = activate(self.global_proj(F.global_avg_pool(b)), act)
            n, c = g.shape[:2]
            b = concat_channels([b, broadcast_to(g, (n, c) + b.shape[2:])])
        for conv in self.bottleneck:
            b = activate(conv(b), act)
        d = b
        for i, (stage, level) in enumerate(zip(self.up, (3, 2, 1, 0))):
            d = stage(enc[level + 1], d, ctx[level])
            feats[f"up{i + 1}"] = d
        return d, enc[0], feats

    def trunk_convs(self) -> list[Conv2d]:
        convs = list(self.stem)
        for block in self.down:
            convs += block.trunk_convs()
        if self.global_proj is not None:
            convs.append(self.global_proj)
        convs += self.bottleneck
        for stage in self.up:
            convs += stage.trunk_convs()
        return convs

    def macs(self, h: int, w: int) -> int:
        total = self.stem[0].macs(h, w) + self.stem[1].macs(h, w)
        sizes = [(h, w)]
        for block in self.down:
            total += block.macs(*sizes[-1])
            sizes.append(block.reduce.output_size(*sizes[-1]))
        bh, bw = sizes[4]
        if self.global_proj is not None:
            total += self.global_proj.macs(1, 1)
        total += sum(c.macs(bh, bw) for c in self.bottleneck)
        for stage, level in zip(self.up, (4, 3, 2, 1)):
            total += stage.macs(*sizes[level])
        return total


def _check_extent(x: Tensor, channels: int, multiple: int, who: str) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ValueError(f"{who} expects input N,{channels},H,W, got shape {x.shape}")
    h, w = x.shape[2:]
    if h % multiple or w % multiple:
        raise ValueError(f"{who} input extents {h}x{w} must be divisible by {multiple}")


class LwIspModel(Module):
    """Student network: packed RAW ``N,4,H,W`` to RGB ``N,3,2H,2W`` in [0, 1]."""

    in_channels = 4

    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.trunk = UNetTrunk(self.in_channels, cfg, rng)
        w0, hw = cfg.widths[0], cfg.head_width
        # the mosaic (packed input unfolded to 2H x 2W) serves as the head's context
        self.head = UpStage(
            w0, self.trunk.out_channels, 1, hw, max(hw // 2, 1), rng, cfg.activation,
            n_fusion=3, out_channels=3, adjust_kernel=cfg.adjust_kernel, dtype=np.dtype(cfg.dtype),
        )

    def forward(self, x: Tensor, taps: list[str] | None = None) -> tuple[Tensor, list[Tensor]]:
        _check_extent(x, self.in_channels, 16, "student")
        d, stem, feats = self.trunk(x)
        rgb = sigmoid(self.head(stem, d, F.pixel_shuffle(x, 2)))
        return rgb, [feats[t] for t in (taps or [])]

    def trunk_convs(self) -> list[Conv2d]:
        return self.trunk.trunk_convs() + self.head.trunk_convs()

    def macs(self, h: int, w: int) -> int:
        return self.trunk.macs(h, w) + self.head.macs(h, w)


class TeacherModel(Module):
    """Teacher network: RGB ``N,3,H,W`` to RGB of the same extent.

    Same trunk as the student; it lacks the student's upsampling head.
    """

    in_channels = 3

    def __init__(self, cfg: ModelConfig | None = None):
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed + 1)
        self.trunk = UNetTrunk(4 * self.in_channels, cfg, rng)
        self.out = Conv2d(
            self.trunk.out_channels, 4 * self.in_channels, 3, rng, dtype=np.dtype(cfg.dtype), gain=OUTPUT_GAIN
        )

    def forward(self, j: Tensor, taps: list[str] | None = None) -> tuple[Tensor, list[Tensor]]:
        _check_extent(j, self.in_channels, 32, "teacher")
        d, _, feats = self.trunk(F.pixel_unshuffle(j, 2))
        rgb = sigmoid(F.pixel_shuffle(self.out(d), 2))
        return rgb, [feats[t] for t in (taps or [])]

    def trunk_convs(self) -> list[Conv2d]:
        return self.trunk.trunk_convs() + [self.out]

    def macs(self, h: int, w: int) -> int:
        return self.trunk.macs(h // 2, w // 2) + self.out.macs(h // 2, w // 2)


def count_params(model: Module) -> int:
    return model.num_params()


def estimate_flops(model: LwIspModel | TeacherModel, input_shape: tuple) -> int:
    """FLOPs of one forward pass, counted as 2 x conv multiply-accumulates.

    ``input_shape`` is the model input ``(N, C, H, W)``; elementwise ops,
    pooling and bias additions are not counted.
    """
    n, _, h, w = input_shape
    return 2 * n * model.macs(h, w)


def count_conv_layers(model: LwIspModel | TeacherModel) -> dict:
    """Conv layer counts: ``trunk`` (main data path) vs FGAM / CCB internals."""
    trunk = {id(c) for c in model.trunk_convs()}
    all_convs = [m for m in model.modules() if isinstance(m, Conv2d)]
    from .nn import Fgam, CcbCore, ContextualComplement

    fgam = sum(3 for m in model.modules() if isinstance(m, Fgam))
    ccb = sum(4 for m in model.modules() if isinstance(m, CcbCore))
    ccb += sum(2 for m in model.modules() if isinstance(m, ContextualComplement))
    return {"trunk": len(trunk), "fgam": fgam, "ccb": ccb, "total": len(all_convs)}
