"""EEG epoch -> conditioning tokens.

Channel attention (softmax over per-channel scores) reweights the epoch, two
strided temporal convolutions extract features, a mean-pool over time and a
linear head produce ``S`` tokens of width ``D``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 64
    samples: int = 250
    tokens: int = 4
    dim: int = 128
    conv_widths: tuple = (64, 64)
    kernel_sizes: tuple = (9, 5)
    stride: int = 2

    def validate(self):
        if min(self.channels, self.samples, self.tokens, self.dim) < 1:
            raise ConfigurationError(f"encoder dimensions must be positive: {self}")
        if len(self.conv_widths) != len(self.kernel_sizes) or not self.conv_widths:
            raise ConfigurationError("conv_widths and kernel_sizes must be non-empty and equal length")
        n = self.samples
        for k in self.kernel_sizes:
            n = (n - k) // self.stride + 1
            if n < 1:
                raise ConfigurationError(f"{self.samples} samples too short for kernels {self.kernel_sizes}")


def _scaled_uniform_(tensor: torch.Tensor, fan_in: int, gen: torch.Generator):
    # U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.copy_(torch.rand(tensor.shape, generator=gen, dtype=tensor.dtype) * 2 * bound - bound)


class EEGEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.score = nn.Linear(cfg.channels, cfg.channels, bias=False)
        convs = []
        prev = cfg.channels
        for width, k in zip(cfg.conv_widths, cfg.kernel_sizes):
            convs.append(nn.Conv1d(prev, width, k, stride=cfg.stride))
            prev = width
        self.convs = nn.ModuleList(convs)
        self.proj = nn.Linear(prev, cfg.tokens * cfg.dim)

    def attention_weights(self, x: torch.Tensor) -> torch.Tensor:
        """Softmax channel weights ``[B, C]`` for a batch of epochs ``[B, C, T]``."""
        summary = x.abs().mean(dim=-1)
        # dividing by the channel mean makes the scores invariant to global gain
        scale = summary.mean(dim=-1, keepdim=True)
        rel = torch.where(scale > 0, summary / torch.where(scale > 0, scale, torch.ones_like(scale)),
                          torch.zeros_like(summary))
        return torch.softmax(self.score(rel), dim=-1)

    def channel_attention(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.attention_weights(x)[..., None]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        single = x.dim() == 2
        if single:
            x = x[None]
        if x.shape[1:] != (self.cfg.channels, self.cfg.samples):
            raise ContractError(
                f"epoch shape {tuple(x.shape[1:])} does not match encoder ({self.cfg.channels}, {self.cfg.samples})"
            )
        if not torch.isfinite(x).all():
            raise ContractError("EEG epoch contains non-finite values")
        h = self.channel_attention(x)
        for conv in self.convs:
            h = F.gelu(conv(h))
        h = h.mean(dim=-1)
        tokens = self.proj(h).reshape(-1, self.cfg.tokens, self.cfg.dim)
        return tokens[0] if single else tokens


def init_encoder(cfg: EncoderConfig, seed: int, dtype=torch.float32) -> EEGEncoder:
    """Build an encoder with every weight and bias drawn from U(+-1/sqrt(fan_in))."""
    enc = EEGEncoder(cfg).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    _scaled_uniform_(enc.score.weight, cfg.channels, gen)
    for conv in enc.convs:
        fan_in = conv.in_channels * conv.kernel_size[0]
        _scaled_uniform_(conv.weight, fan_in, gen)
        _scaled_uniform_(conv.bias, fan_in, gen)
    _scaled_uniform_(enc.proj.weight, enc.proj.in_features, gen)
    _scaled_uniform_(enc.proj.bias, enc.proj.in_features, gen)
    return enc


def channel_attention(epoch, encoder: EEGEncoder) -> torch.Tensor:
    """Reweighted epoch with the same shape as ``epoch``."""
    x = torch.as_tensor(epoch, dtype=encoder.score.weight.dtype)
    if x.shape[-2:] != (encoder.cfg.channels, encoder.cfg.samples):
        raise ContractError(f"epoch shape {tuple(x.shape)} does not match encoder config")
    return encoder.channel_attention(x)


def encode(epoch, encoder: EEGEncoder) -> torch.Tensor:
    x = torch.as_tensor(epoch, dtype=encoder.score.weight.dtype)
    return encoder(x)
