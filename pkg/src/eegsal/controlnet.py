"""Saliency control branch.

A trainable copy of the UNet encoder path receives a saliency hint and emits
one residual per injection site through zero-initialized 1x1 convolutions, so
an untrained branch leaves the base model's output untouched.
"""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import UNet
from .errors import ContractError
from .saliency import SaliencyMap


class HintEncoder(nn.Module):
    """Two stride-2 convs and one same-resolution conv: ``[B,1,H,W] -> [B,C,H/4,W/4]``."""

    def __init__(self, out_channels: int, hidden: tuple = (16, 32), n_down: int = 2):
        super().__init__()
        layers = []
        prev = 1
        for i in range(n_down):
            layers.append(nn.Conv2d(prev, hidden[min(i, len(hidden) - 1)], 3, stride=2, padding=1))
            prev = hidden[min(i, len(hidden) - 1)]
        self.down = nn.ModuleList(layers)
        self.out = nn.Conv2d(prev, out_channels, 3, padding=1)
        self.factor = 2 ** n_down

    def forward(self, s):
        h = s
        for conv in self.down:
            h = F.silu(conv(h))
        return self.out(h)


class ControlBranch(nn.Module):
    def __init__(self, unet: UNet, image_hw: tuple = (64, 64), factor: int = 4):
        super().__init__()
        self.image_hw = tuple(image_hw)
        self.encoder = copy.deepcopy(unet.encoder)
        for p in self.encoder.parameters():
            p.requires_grad_(True)
        chans = unet.cfg.channels()
        n_down = factor.bit_length() - 1
        self.hint = HintEncoder(chans[0], n_down=n_down)
        taps = chans + [chans[-1]]
        self.zero_convs = nn.ModuleList(nn.Conv2d(c, c, 1) for c in taps)
        for zc in self.zero_convs:
            nn.init.zeros_(zc.weight)
            nn.init.zeros_(zc.bias)

    def hint_features(self, saliency: torch.Tensor) -> torch.Tensor:
        if saliency.dim() == 2:
            saliency = saliency[None, None]
        elif saliency.dim() == 3:
            saliency = saliency[:, None]
        if tuple(saliency.shape[-2:]) != self.image_hw:
            raise ContractError(f"saliency size {tuple(saliency.shape[-2:])} != configured {self.image_hw}")
        return self.hint(saliency.to(self.zero_convs[0].weight.dtype))

    def forward(self, x_t, t, tokens, saliency) -> list:
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(x_t.shape[0])
        hint = self.hint_features(saliency)
        feats, _ = self.encoder(x_t, t, tokens, hint=hint)
        return [zc(f) for zc, f in zip(self.zero_convs, feats)]


def init_control(frozen_unet: UNet, seed: int, image_hw: tuple = (64, 64), factor: int = 4) -> ControlBranch:
    """Copy the UNet encoder path; only the hint encoder depends on ``seed``."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        branch = ControlBranch(frozen_unet, image_hw, factor)
    dtype = next(frozen_unet.parameters()).dtype
    return branch.to(dtype)


def hint_encode(saliency, branch: ControlBranch) -> torch.Tensor:
    if isinstance(saliency, SaliencyMap):
        saliency = saliency.data
    s = torch.as_tensor(np.asarray(saliency))
    single = s.dim() == 2
    out = branch.hint_features(s)
    return out[0] if single else out


def control_forward(x_t, t, tokens, saliency, branch: ControlBranch) -> list:
    return branch(x_t, t, tokens, saliency)
