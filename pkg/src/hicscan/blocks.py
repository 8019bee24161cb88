"""2D building blocks: four-way cross scan/merge, SS2D, LEFN, channel layer norm
and the holistic scan block.

Feature maps are torch tensors shaped (B, C, H, W); the functional helpers also
accept an unbatched (C, H, W) map.
"""

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import DomainError
from .ssm import SelectiveScan

N_PATHS = 4
LN_EPS = 1e-5


def _batched(fm):
    if fm.dim() == 3:
        return fm.unsqueeze(0), True
    if fm.dim() != 4:
        raise DomainError(f"expected (C, H, W) or (B, C, H, W), got shape {tuple(fm.shape)}")
    return fm, False


def cross_scan(fm):
    """Flatten a feature map along four traversal paths.

    Path 0 is row-major (left to right, top to bottom), path 1 its reverse,
    path 2 column-major (top to bottom, left to right), path 3 its reverse.

    Returns a tensor of shape (B, 4, C, H*W), or (4, C, H*W) for an
    unbatched input.
    """
    x, squeeze = _batched(fm)
    row = x.flatten(2)
    col = x.transpose(2, 3).flatten(2)
    paths = torch.stack([row, row.flip(-1), col, col.flip(-1)], dim=1)
    return paths.squeeze(0) if squeeze else paths


def cross_merge(paths, height, width):
    """Undo each path's permutation and sum the four maps."""
    squeeze = paths.dim() == 3
    if squeeze:
        paths = paths.unsqueeze(0)
    if paths.dim() != 4 or paths.shape[1] != N_PATHS:
        raise DomainError(f"expected (B, 4, C, L) paths, got shape {tuple(paths.shape)}")
    if paths.shape[-1] != height * width:
        raise DomainError(f"path length {paths.shape[-1]} does not match {height}x{width} map")
    nb, _, nc, _ = paths.shape
    row = paths[:, 0] + paths[:, 1].flip(-1)
    col = paths[:, 2] + paths[:, 3].flip(-1)
    out = row.view(nb, nc, height, width) + col.view(nb, nc, width, height).transpose(2, 3)
    return out.squeeze(0) if squeeze else out


class SS2D(nn.Module):
    """Cross scan, one independent selective scan per path, cross merge."""

    def __init__(self, channels, state_size=16):
        super().__init__()
        self.scans = nn.ModuleList(SelectiveScan(channels, state_size) for _ in range(N_PATHS))

    def forward(self, x):
        x, squeeze = _batched(x)
        h, w = x.shape[-2:]
        paths = cross_scan(x).transpose(-1, -2)  # (B, 4, L, C)
        outs = [scan(paths[:, k]) for k, scan in enumerate(self.scans)]
        out = cross_merge(torch.stack(outs, dim=1).transpose(-1, -2), h, w)
        return out.squeeze(0) if squeeze else out


def ss2d(fm, params):
    """Functional SS2D; ``params`` is an :class:`SS2D` module."""
    return params(fm)


class LEFN(nn.Module):
    """1x1 expand, 3x3 local mixing, 1x1 project back; GELU after each conv."""

    def __init__(self, channels, hidden, init_std=0.02):
        super().__init__()
        self.channels = channels
        self.expand = nn.Conv2d(channels, hidden, 1)
        self.local = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.project = nn.Conv2d(hidden, channels, 1)
        for conv in (self.expand, self.local, self.project):
            nn.init.trunc_normal_(conv.weight, std=init_std)
            nn.init.zeros_(conv.bias)

    def forward(self, x):
        if x.shape[-3] != self.channels:
            raise DomainError(f"LEFN expects {self.channels} channels, got {x.shape[-3]}")
        x = F.gelu(self.expand(x))
        x = F.gelu(self.local(x))
        return F.gelu(self.project(x))


def lefn(fm, weights):
    return weights(fm)


def layer_norm(fm, gain, bias, eps=LN_EPS):
    """Normalize the channel vector at every pixel (population variance), then
    apply a per-channel affine map."""
    x, squeeze = _batched(fm)
    mean = x.mean(dim=1, keepdim=True)
    var = (x - mean).pow(2).mean(dim=1, keepdim=True)
    out = (x - mean) / torch.sqrt(var + eps)
    out = out * gain.view(1, -1, 1, 1) + bias.view(1, -1, 1, 1)
    return out.squeeze(0) if squeeze else out


class ChannelLayerNorm(nn.Module):
    def __init__(self, channels, eps=LN_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class HolisticScanBlock(nn.Module):
    """Pre-norm residual block: ``u = x + SS2D(LN(x))``, ``out = u + LEFN(LN(u))``."""

    def __init__(self, channels, hidden, state_size=16):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        self.ss2d = SS2D(channels, state_size)
        self.norm2 = ChannelLayerNorm(channels)
        self.lefn = LEFN(channels, hidden)

    def forward(self, x):
        u = x + self.ss2d(self.norm1(x))
        return u + self.lefn(self.norm2(u))


def holistic_scan_block(fm, params):
    return params(fm)
