"""Parameter containers and the composite blocks of the network.

Blocks hold their weights as :class:`Parameter` leaves and are pure during
``forward``: they never mutate their own state.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import Tensor, concat_channels, leaky_relu, relu, sigmoid

ACTIVATIONS = ("relu", "leaky_relu")


OUTPUT_GAIN = 0.1


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)


def activate(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, 0.2)
    raise ValueError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")


class Module:
    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Conv2d(Module):
    """Convolution layer with fan-in (Kaiming) normal init and zero bias."""

    def __init__(
        self,
        cin: int,
        cout: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int | None = None,
        dilation: int = 1,
        bias: bool = True,
        dtype=np.float32,
        gain: float = 1.0,
    ):
        self.cin, self.cout, self.kernel = cin, cout, kernel
        self.stride, self.dilation = stride, dilation
        self.padding = (kernel - 1) * dilation // 2 if padding is None else padding
        std = gain * np.sqrt(2.0 / (cin * kernel * kernel))
        self.weight = Parameter(rng.normal(0.0, std, (cout, cin, kernel, kernel)).astype(dtype))
        self.bias = Parameter(np.zeros(cout, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        k, s, p, d = self.kernel, self.stride, self.padding, self.dilation
        return F.conv_output_size(h, k, s, p, d), F.conv_output_size(w, k, s, p, d)

    def macs(self, h: int, w: int) -> int:
        """Multiply-accumulates for an ``h x w`` input (bias adds excluded)."""
        ho, wo = self.output_size(h, w)
        return ho * wo * self.cout * self.cin * self.kernel * self.kernel


class Fgam(Module):
    """Fine-grained attention: parallel channel and spatial attention maps.

    Each map is added to the input separately and the two results are
    concatenated, so the output has twice the input channels.
    """

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        reduction: int = 4,
        spatial_kernel: int = 7,
        activation: str = "leaky_relu",
        fusion: str = "add",
        dtype=np.float32,
    ):
        if reduction < 1 or channels % reduction:
            raise ValueError(f"FGAM reduction {reduction} must divide channel count {channels}")
        if fusion not in ("add", "mul"):
            raise ValueError(f"FGAM fusion must be 'add' or 'mul', got {fusion!r}")
        self.channels = channels
        self.activation = activation
        self.fusion = fusion
        self.squeeze = Conv2d(channels, channels // reduction, 1, rng, dtype=dtype)
        self.excite = Conv2d(channels // reduction, channels, 1, rng, dtype=dtype)
        self.spatial = Conv2d(2, 1, spatial_kernel, rng, dtype=dtype)

    def channel_attention(self, x: Tensor) -> Tensor:
        hidden = activate(self.squeeze(F.global_avg_pool(x)), self.activation)
        return sigmoid(self.excite(hidden))

    def spatial_attention(self, x: Tensor) -> Tensor:
        pooled = concat_channels([F.channel_pool(x, "mean"), F.channel_pool(x, "max")])
        return sigmoid(self.spatial(pooled))

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"FGAM expects {self.channels} channels, got {x.shape[1]}")
        a_c = self.channel_attention(x)
        a_s = self.spatial_attention(x)
        if self.fusion == "add":
            return concat_channels([x + a_c, x + a_s])
        return concat_channels([x * a_c, x * a_s])

    def macs(self, h: int, w: int) -> int:
        return self.squeeze.macs(1, 1) + self.excite.macs(1, 1) + self.spatial.macs(h, w)


class SubPixelConv(Module):
    """Channel-adjust conv, pixel shuffle, then fine-tune conv."""

    def __init__(self, cin: int, cout: int, rng, scale: int = 2, adjust_kernel: int = 1, dtype=np.float32):
        self.scale = scale
        self.adjust = Conv2d(cin, cout * scale * scale, adjust_kernel, rng, dtype=dtype)
        self.refine = Conv2d(cout, cout, 3, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.refine(F.pixel_shuffle(self.adjust(x), self.scale))

    def macs(self, h: int, w: int) -> int:
        s = self.scale
        return self.adjust.macs(h, w) + self.refine.macs(h * s, w * s)


class CcbCore(Module):
    """Upsample two same-resolution features by sub-pixel conv and sum them."""

    def __init__(self, c_enc: int, c_dec: int, cout: int, rng, adjust_kernel: int = 1, dtype=np.float32):
        self.cout = cout
        self.enc_branch = SubPixelConv(c_enc, cout, rng, 2, adjust_kernel, dtype)
        self.dec_branch = SubPixelConv(c_dec, cout, rng, 2, adjust_kernel, dtype)

    def forward(self, f_enc: Tensor, f_dec: Tensor) -> Tensor:
        if f_enc.shape[2:] != f_dec.shape[2:]:
            raise ValueError(
                f"CCB-Core branches differ in spatial extent: {f_enc.shape[2:]} vs {f_dec.shape[2:]}"
            )
        return self.enc_branch(f_enc) + self.dec_branch(f_dec)

    def macs(self, h: int, w: int) -> int:
        return self.enc_branch.macs(h, w) + self.dec_branch.macs(h, w)


class ContextualComplement(Module):
    """Contrast map ``sigmoid(f_d1(x) - f_d2(x))`` appended to the core output."""

    def __init__(self, c_ctx: int, width: int, rng, dtype=np.float32):
        self.width = width
        self.near = Conv2d(c_ctx, width, 1, rng, dtype=dtype)
        self.wide = Conv2d(c_ctx, width, 3, rng, dilation=2, dtype=dtype)

    def contrast(self, x_ctx: Tensor) -> Tensor:
        return sigmoid(self.near(x_ctx) - self.wide(x_ctx))

    def forward(self, x_ctx: Tensor, core_out: Tensor) -> Tensor:
        if x_ctx.shape[2:] != core_out.shape[2:]:
            raise ValueError(
                f"context resolution {x_ctx.shape[2:]} does not match core output {core_out.shape[2:]}"
            )
        return concat_channels([core_out, self.contrast(x_ctx)])

    def macs(self, h: int, w: int) -> int:
        return self.near.macs(h, w) + self.wide.macs(h, w)


class DownBlock(Module):
    """Stride-2 conv + conv, optionally followed by FGAM."""

    def __init__(self, cin: int, cout: int, rng, activation: str, fgam: dict | None, dtype=np.float32):
        self.activation = activation
        self.reduce = Conv2d(cin, cout, 3, rng, stride=2, dtype=dtype)
        self.conv = Conv2d(cout, cout, 3, rng, dtype=dtype)
        self.fgam = Fgam(cout, rng, activation=activation, dtype=dtype, **fgam) if fgam is not None else None
        self.out_channels = 2 * cout if self.fgam is not None else cout

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(output, pre_attention_feature)``."""
        h = activate(self.reduce(x), self.activation)
        h = activate(self.conv(h), self.activation)
        return (self.fgam(h) if self.fgam is not None else h), h

    def trunk_convs(self) -> list[Conv2d]:
        return [self.reduce, self.conv]

    def macs(self, h: int, w: int) -> int:
        ho, wo = self.reduce.output_size(h, w)
        total = self.reduce.macs(h, w) + self.conv.macs(ho, wo)
        if self.fgam is not None:
            total += self.fgam.macs(ho, wo)
        return total


class UpStage(Module):
    """CCB-Core, contextual complement, then fusion convs at twice the input extent."""

    def __init__(
        self,
        c_enc: int,
        c_dec: int,
        c_ctx: int,
        cout: int,
        complement: int,
        rng,
        activation: str,
        n_fusion: int = 2,
        out_channels: int | None = None,
        adjust_kernel: int = 1,
        dtype=np.float32,
    ):
        self.activation = activation
        self.core = CcbCore(c_enc, c_dec, cout, rng, adjust_kernel, dtype)
        self.complement = ContextualComplement(c_ctx, complement, rng, dtype)
        widths = [cout + complement] + [cout] * (n_fusion - 1) + [out_channels or cout]
        # a custom out_channels marks a head whose last conv stays linear
        self.linear_last = out_channels is not None
        # a linear last conv starts small so the sigmoid after it is not saturated
        gains = [1.0] * (n_fusion - 1) + [OUTPUT_GAIN if self.linear_last else 1.0]
        self.fusion = [
            Conv2d(a, b, 3, rng, dtype=dtype, gain=g) for a, b, g in zip(widths[:-1], widths[1:], gains)
        ]
        self.out_channels = widths[-1]

    def forward(self, f_enc: Tensor, f_dec: Tensor, x_ctx: Tensor) -> Tensor:
        h = self.complement(x_ctx, self.core(f_enc, f_dec))
        last = len(self.fusion) - 1
        for i, conv in enumerate(self.fusion):
            h = conv(h)
            if not (self.linear_last and i == last):
                h = activate(h, self.activation)
        return h

    def trunk_convs(self) -> list[Conv2d]:
        return list(self.fusion)

    def macs(self, h: int, w: int) -> int:
        total = self.core.macs(h, w) + self.complement.macs(2 * h, 2 * w)
        return total + sum(c.macs(2 * h, 2 * w) for c in self.fusion)
