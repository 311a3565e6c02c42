"""Super-resolution decoder head: recovers full spatial resolution (x4)
from quarter-resolution feature slices with a stack of lightweight
attention blocks and a channel shuffle upsampler."""

import torch
import torch.nn as nn
import torch.nn.functional as F


def channel_shuffle_up(x, r):
    """Rearrange r*r*c channels into c channels at r-times the resolution."""
    return F.pixel_shuffle(x, r)


class BSConv(nn.Module):
    """Pointwise then depthwise convolution."""

    def __init__(self, in_ch, out_ch, kernel_size=3):
        super().__init__()
        self.pw = nn.Conv2d(in_ch, out_ch, 1, bias=False)
        self.dw = nn.Conv2d(
            out_ch, out_ch, kernel_size, padding=kernel_size // 2, groups=out_ch
        )

    def forward(self, x):
        return self.dw(self.pw(x))


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis at every spatial position."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(dim=1, keepdim=True)
        var = x.var(dim=1, keepdim=True, unbiased=False)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class ConvNeXtBlock(nn.Module):
    """Depthwise 7x7, per-position channel norm, inverted 1x1 bottleneck,
    residual add. The projection starts at zero so a fresh block is an
    exact identity."""

    def __init__(self, channels, slope=0.2):
        super().__init__()
        self.dw = nn.Conv2d(channels, channels, 7, padding=3, groups=channels)
        self.norm = ChannelLayerNorm(channels)
        self.expand = nn.Conv2d(channels, 4 * channels, 1)
        self.project = nn.Conv2d(4 * channels, channels, 1)
        self.act = nn.LeakyReLU(slope)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, x):
        return x + self.project(self.act(self.expand(self.norm(self.dw(x)))))


class ESA(nn.Module):
    """Spatial attention: shrink, pool over a wide window, come back up to a
    per-pixel sigmoid gate."""

    def __init__(self, channels, reduction=4, slope=0.2):
        super().__init__()
        f = max(1, channels // reduction)
        self.reduce = nn.Conv2d(channels, f, 1)
        self.down = nn.Conv2d(f, f, 3, stride=2, padding=0)
        self.conv_a = nn.Conv2d(f, f, 3, padding=1)
        self.conv_b = nn.Conv2d(f, f, 3, padding=1)
        self.restore = nn.Conv2d(f, channels, 1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        r = self.reduce(x)
        d = self.down(r)
        d = F.max_pool2d(d, kernel_size=7, stride=3, padding=3)
        d = self.conv_b(self.act(self.conv_a(d)))
        d = F.interpolate(d, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return x * torch.sigmoid(self.restore(d))


class CCA(nn.Module):
    """Channel attention driven by per-channel contrast (mean plus std)."""

    def __init__(self, channels, reduction=16, slope=0.2):
        super().__init__()
        mid = max(1, channels // reduction)
        self.squeeze = nn.Conv2d(channels, mid, 1)
        self.excite = nn.Conv2d(mid, channels, 1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        mean = x.mean(dim=(-2, -1), keepdim=True)
        std = torch.sqrt(x.var(dim=(-2, -1), keepdim=True, unbiased=False) + 1e-12)
        gate = torch.sigmoid(self.excite(self.act(self.squeeze(mean + std))))
        return x * gate


class BCB(nn.Module):
    """One decoder block: BSConv, ConvNeXt refinement, spatial then channel
    attention."""

    def __init__(self, channels, slope=0.2):
        super().__init__()
        self.bsconv = BSConv(channels, channels)
        self.refine = ConvNeXtBlock(channels, slope)
        self.esa = ESA(channels, slope=slope)
        self.cca = CCA(channels, slope=slope)

    def forward(self, x):
        return self.cca(self.esa(self.refine(self.bsconv(x))))


class SRDecoder(nn.Module):
    """Feature slices [N, in_ch, h, w] to field slices [N, 1, 4h, 4w].

    A shallow 3x3 extraction feeds B blocks; all block outputs are fused by
    a 1x1 convolution, added back to the shallow features, and shuffled up.
    """

    UPSCALE = 4

    def __init__(self, in_channels, features=48, num_blocks=4, slope=0.2):
        super().__init__()
        if features < 4:
            raise ValueError("features must be at least 4")
        if num_blocks < 1:
            raise ValueError("need at least one block")
        self.shallow = nn.Conv2d(in_channels, features, 3, padding=1)
        self.blocks = nn.ModuleList(BCB(features, slope) for _ in range(num_blocks))
        self.fuse = nn.Conv2d(num_blocks * features, features, 1)
        self.head = nn.Conv2d(features, self.UPSCALE**2, 3, padding=1)

    def forward(self, x):
        s = self.shallow(x)
        outs = []
        cur = s
        for blk in self.blocks:
            cur = blk(cur)
            outs.append(cur)
        fused = self.fuse(torch.cat(outs, dim=1)) + s
        return channel_shuffle_up(self.head(fused), self.UPSCALE)


class PlainUpsampler(nn.Module):
    """Ablation head: two stride-2 transposed convolutions, same interface."""

    def __init__(self, in_channels, slope=0.2):
        super().__init__()
        mid = max(1, in_channels // 2)
        self.up1 = nn.ConvTranspose2d(in_channels, mid, 5, stride=2, padding=2, output_padding=1)
        self.up2 = nn.ConvTranspose2d(mid, 1, 5, stride=2, padding=2, output_padding=1)
        self.act = nn.LeakyReLU(slope)

    def forward(self, x):
        return self.up2(self.act(self.up1(x)))
