"""Differentiable building blocks: Coord-Conv augmentation, global-context
attention and convolutional group-wise enhancement.

All operations are pure functions of (input, parameters) and work on
``B x C x H x W`` float tensors of any floating dtype. Concurrent forward
calls with frozen parameters are safe; parameter updates must be serialized
by the caller.
"""

from __future__ import annotations

import math

import torch
from torch import Tensor, nn

GROUP_NORM_EPS = 1e-5


def coordconv_augment(x: Tensor) -> Tensor:
    """Append normalized x/y coordinate channels to a B x C x H x W tensor.

    Channel C is the x coordinate (constant down columns), channel C+1 the
    y coordinate, each running linearly from -1 to +1 across its axis. An
    axis of size 1 gets the midpoint coordinate 0. The original channels
    are passed through untouched.
    """
    if x.dim() != 4:
        raise ValueError(f"expected B x C x H x W input, got {tuple(x.shape)}")
    b, _, h, w = x.shape
    kw = {"dtype": x.dtype, "device": x.device}
    xs = torch.linspace(-1.0, 1.0, w, **kw) if w > 1 else torch.zeros(w, **kw)
    ys = torch.linspace(-1.0, 1.0, h, **kw) if h > 1 else torch.zeros(h, **kw)
    xmap = xs.view(1, 1, 1, w).expand(b, 1, h, w)
    ymap = ys.view(1, 1, h, 1).expand(b, 1, h, w)
    return torch.cat([x, xmap, ymap], dim=1)


def spatial_softmax(logits: Tensor) -> Tensor:
    """Softmax over the H*W positions of a single-channel map.

    Stabilized by max subtraction; per batch item the output is positive
    and sums to 1 over space.
    """
    if logits.dim() != 4 or logits.shape[1] != 1:
        raise ValueError(f"expected B x 1 x H x W logits, got {tuple(logits.shape)}")
    b, _, h, w = logits.shape
    flat = logits.reshape(b, h * w)
    return torch.softmax(flat, dim=1).reshape(b, 1, h, w)


def group_norm_1ch(m: Tensor, gamma: Tensor, beta: Tensor, eps: float = GROUP_NORM_EPS) -> Tensor:
    """Standardize each channel of ``m`` over its own H x W extent.

    ``gamma``/``beta`` are per-channel affine parameters (length C). The
    variance is the biased (population) estimate.
    """
    if m.dim() != 4:
        raise ValueError(f"expected B x C x H x W input, got {tuple(m.shape)}")
    c = m.shape[1]
    if gamma.numel() != c or beta.numel() != c:
        raise ValueError(f"affine parameters must have length {c}, got {gamma.numel()}/{beta.numel()}")
    mu = m.mean(dim=(2, 3), keepdim=True)
    var = m.var(dim=(2, 3), unbiased=False, keepdim=True)
    normed = (m - mu) / torch.sqrt(var + eps)
    return normed * gamma.view(1, c, 1, 1) + beta.view(1, c, 1, 1)


class GCBlock(nn.Module):
    """Global context block: query-independent attention pooling plus a
    bottleneck channel recalibration, fused back by broadcast addition.

    The pooled context vector is ``sum_hw x[:, :, h, w] * a[h, w]`` with
    attention weights ``a = spatial_softmax(key_conv(x))``; the bottleneck
    transform is up_conv(relu(layernorm(down_conv(context)))). Zeroing
    ``up_conv`` makes the block an exact identity.
    """

    def __init__(self, channels: int, reduction: int = 16):
        super().__init__()
        if reduction < 1:
            raise ValueError("reduction ratio must be >= 1")
        hidden = math.ceil(channels / reduction)
        self.channels = channels
        self.reduction = reduction
        self.key_conv = nn.Conv2d(channels, 1, kernel_size=1)
        self.down_conv = nn.Conv2d(channels, hidden, kernel_size=1)
        self.norm = nn.LayerNorm([hidden, 1, 1])
        self.up_conv = nn.Conv2d(hidden, channels, kernel_size=1)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.channels:
            raise ValueError(f"block built for {self.channels} channels, input has {x.shape[1]}")
        attn = spatial_softmax(self.key_conv(x))
        context = (x * attn).sum(dim=(2, 3), keepdim=True)  # B x C x 1 x 1
        z = self.up_conv(torch.relu(self.norm(self.down_conv(context))))
        return x + z


class CGEBlock(nn.Module):
    """Convolutional group-wise enhancement block.

    A 1x1 grouped convolution maps each of the ``num_groups`` channel
    groups to a single map; the maps are spatially group-normalized,
    sigmoid-gated into importance maps, and multiplied back onto their
    group's channels. Scale/shift start at 1/0, so a zero-weight grouped
    convolution gates every channel by exactly 0.5.
    """

    def __init__(self, channels: int, num_groups: int):
        super().__init__()
        if num_groups < 1 or channels % num_groups != 0:
            raise ValueError(f"num_groups={num_groups} must divide channels={channels}")
        self.channels = channels
        self.num_groups = num_groups
        self.group_conv = nn.Conv2d(channels, num_groups, kernel_size=1, groups=num_groups)
        self.gn_scale = nn.Parameter(torch.ones(num_groups))
        self.gn_shift = nn.Parameter(torch.zeros(num_groups))

    def importance_maps(self, x: Tensor) -> Tensor:
        """Return the B x num_groups x H x W sigmoid gate maps."""
        if x.shape[1] != self.channels:
            raise ValueError(f"block built for {self.channels} channels, input has {x.shape[1]}")
        g = group_norm_1ch(self.group_conv(x), self.gn_scale, self.gn_shift)
        return torch.sigmoid(g)

    def forward(self, x: Tensor) -> Tensor:
        b, c, h, w = x.shape
        gates = self.importance_maps(x)
        grouped = x.reshape(b, self.num_groups, c // self.num_groups, h, w)
        out = grouped * gates.unsqueeze(2)
        return out.reshape(b, c, h, w)


def init_he_(module: nn.Module, generator: torch.Generator | None = None) -> None:
    """Re-initialize every convolution under ``module`` in place.

    Weights draw from a zero-mean Gaussian with variance 2/fan_in, biases
    reset to zero; normalization affine parameters reset to 1/0. Iteration
    order is the module definition order, so a fixed generator state gives
    bitwise-identical parameters.
    """
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            fan_in = m.in_channels // m.groups * m.kernel_size[0] * m.kernel_size[1]
            std = math.sqrt(2.0 / fan_in)
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()
        elif isinstance(m, CGEBlock):
            with torch.no_grad():
                m.gn_scale.fill_(1.0)
                m.gn_shift.zero_()
