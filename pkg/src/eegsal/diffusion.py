"""Compact latent diffusion: noise schedule, autoencoder, conditional UNet, DDIM.

Timesteps are 1-indexed throughout: ``t`` ranges over ``1..T_steps`` and
``alpha_bar(0)`` is defined as 1 (the clean sample).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ContractError


# ---------------------------------------------------------------------------
# Noise schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    @property
    def T_steps(self) -> int:
        return int(self.betas.shape[0])

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t: int) -> float:
        """Cumulative product up to and including step ``t`` (1-indexed)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T_steps:
            raise ContractError(f"timestep {t} outside 0..{self.T_steps}")
        return float(self.alpha_bars[t - 1])

    def alpha_bar_tensor(self, t: torch.Tensor, dtype=torch.float32) -> torch.Tensor:
        table = torch.from_numpy(np.concatenate([[1.0], self.alpha_bars]))
        return table[t.long()].to(dtype)


def build_schedule(T_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_steps < 1:
        raise ConfigurationError("T_steps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    betas = np.linspace(beta_start, beta_end, T_steps, dtype=np.float64)
    return NoiseSchedule(betas=betas)


def add_noise(x0: torch.Tensor, eps: torch.Tensor, t, schedule: NoiseSchedule) -> torch.Tensor:
    """Closed-form forward process ``sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps``.

    ``t`` is an int (shared by the batch) or an integer tensor with one entry
    per leading-dimension sample.
    """
    if x0.shape != eps.shape:
        raise ContractError(f"x0 {tuple(x0.shape)} and eps {tuple(eps.shape)} differ")
    t = torch.as_tensor(t)
    if t.numel() and (int(t.min()) < 1 or int(t.max()) > schedule.T_steps):
        raise ContractError(f"timesteps must lie in 1..{schedule.T_steps}")
    ab = schedule.alpha_bar_tensor(t, dtype=x0.dtype)
    if ab.dim() > 0:
        ab = ab.reshape(-1, *([1] * (x0.dim() - 1)))
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(channels: int, groups: int) -> int:
    g = min(groups, channels)
    while channels % g:
        g -= 1
    return g


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, time_dim: int, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class CrossAttention(nn.Module):
    """Single-head cross-attention from spatial features onto conditioning tokens.

    The four projections ``to_q``, ``to_k``, ``to_v`` and ``to_out`` are plain
    ``nn.Linear`` layers so low-rank adapters can wrap them.
    """

    def __init__(self, channels: int, context_dim: int, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels, groups), channels)
        self.to_q = nn.Linear(channels, channels, bias=False)
        self.to_k = nn.Linear(context_dim, channels, bias=False)
        self.to_v = nn.Linear(context_dim, channels, bias=False)
        self.to_out = nn.Linear(channels, channels)
        self.scale = channels ** -0.5

    def forward(self, x, context):
        b, c, hh, ww = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        q = self.to_q(h)
        k = self.to_k(context)
        v = self.to_v(context)
        attn = torch.softmax(q @ k.transpose(1, 2) * self.scale, dim=-1)
        out = self.to_out(attn @ v)
        return x + out.transpose(1, 2).reshape(b, c, hh, ww)


class Level(nn.Module):
    def __init__(self, res: ResBlock, attn: Optional[CrossAttention]):
        super().__init__()
        self.res = res
        self.attn = attn

    def forward(self, x, temb, context):
        x = self.res(x, temb)
        if self.attn is not None:
            x = self.attn(x, context)
        return x


# ---------------------------------------------------------------------------
# UNet
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 4
    base_channels: int = 32
    channel_mult: tuple = (1, 2, 2)
    attention_levels: tuple = (1, 2)
    context_dim: int = 128
    context_tokens: int = 4
    time_dim: int = 128
    groups: int = 8

    def channels(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mult]


class UNetEncoder(nn.Module):
    """Time embedding, input conv, downsampling path and bottleneck.

    This is the part the control branch copies. ``forward`` returns the skip
    features (one per resolution) followed by the bottleneck output; these are
    exactly the sites where control residuals are added.
    """

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        chans = cfg.channels()
        self.time_embed = nn.Sequential(
            nn.Linear(cfg.time_dim, cfg.time_dim), nn.SiLU(), nn.Linear(cfg.time_dim, cfg.time_dim)
        )
        self.conv_in = nn.Conv2d(cfg.latent_channels, chans[0], 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = chans[0]
        for i, ch in enumerate(chans):
            attn = CrossAttention(ch, cfg.context_dim, cfg.groups) if i in cfg.attention_levels else None
            self.down.append(Level(ResBlock(prev, ch, cfg.time_dim, cfg.groups), attn))
            last = i == len(chans) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(ch, ch, 3, stride=2, padding=1))
            prev = ch
        mid_attn = CrossAttention(prev, cfg.context_dim, cfg.groups)
        self.mid1 = ResBlock(prev, prev, cfg.time_dim, cfg.groups)
        self.mid_attn = mid_attn
        self.mid2 = ResBlock(prev, prev, cfg.time_dim, cfg.groups)
        self.time_dim = cfg.time_dim

    def embed_time(self, t: torch.Tensor, dtype) -> torch.Tensor:
        return self.time_embed(timestep_embedding(t, self.time_dim).to(dtype))

    def forward(self, x, t, context, hint=None):
        temb = self.embed_time(t, x.dtype)
        h = self.conv_in(x)
        if hint is not None:
            h = h + hint
        feats = []
        for level, down in zip(self.down, self.downsample):
            h = level(h, temb, context)
            feats.append(h)
            h = down(h)
        h = self.mid1(h, temb)
        h = self.mid_attn(h, context)
        h = self.mid2(h, temb)
        feats.append(h)
        return feats, temb


class UNet(nn.Module):
    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.channels()
        self.encoder = UNetEncoder(cfg)
        # learned unconditional context for classifier-free guidance
        self.null_context = nn.Parameter(torch.zeros(cfg.context_tokens, cfg.context_dim))
        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        prev = chans[-1]
        for i in reversed(range(len(chans))):
            ch = chans[i]
            attn = CrossAttention(ch, cfg.context_dim, cfg.groups) if i in cfg.attention_levels else None
            self.up.append(Level(ResBlock(prev + ch, ch, cfg.time_dim, cfg.groups), attn))
            self.upsample.append(
                nn.Identity() if i == 0 else nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"),
                                                           nn.Conv2d(ch, ch, 3, padding=1))
            )
            prev = ch
        self.norm_out = nn.GroupNorm(_groups(chans[0], cfg.groups), chans[0])
        self.conv_out = nn.Conv2d(chans[0], cfg.latent_channels, 3, padding=1)

    def feature_shapes(self, latent_hw: tuple[int, int]) -> list[tuple[int, int, int]]:
        """Shapes (C, h, w) of the control injection sites for a latent of size ``latent_hw``."""
        h, w = latent_hw
        shapes = []
        for i, ch in enumerate(self.cfg.channels()):
            shapes.append((ch, h >> i, w >> i))
        shapes.append(shapes[-1])
        return shapes

    def forward(self, x, t, context, control: Optional[Sequence[torch.Tensor]] = None):
        t = torch.as_tensor(t)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        feats, temb = self.encoder(x, t, context)
        if control is not None:
            if len(control) != len(feats):
                raise ContractError(f"control has {len(control)} residuals, UNet has {len(feats)} sites")
            for f, r in zip(feats, control):
                if f.shape != r.shape:
                    raise ContractError(
                        f"control residual shape {tuple(r.shape)} does not match feature {tuple(f.shape)}"
                    )
            feats = [f + r for f, r in zip(feats, control)]
        h = feats[-1]
        skips = feats[:-1]
        for level, up, skip in zip(self.up, self.upsample, reversed(skips)):
            h = level(torch.cat([h, skip], dim=1), temb, context)
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


def unet_forward(x_t, t, tokens, control, unet: UNet):
    """Predicted noise for ``x_t``; ``control`` residuals are added at skip/bottleneck sites."""
    return unet(x_t, t, tokens, control)


# ---------------------------------------------------------------------------
# Autoencoder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AutoencoderConfig:
    image_channels: int = 3
    latent_channels: int = 4
    hidden: int = 32
    n_down: int = 2

    @property
    def factor(self) -> int:
        return 2 ** self.n_down


class Autoencoder(nn.Module):
    """Deterministic conv autoencoder with a sigmoid-bounded decoder.

    ``latent_scale`` rescales encoder outputs to roughly unit variance; it is
    set once after pre-training (see :func:`eegsal.training.pretrain_autoencoder`).
    """

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.hidden
        enc = [nn.Conv2d(cfg.image_channels, c, 3, padding=1), nn.SiLU()]
        ch = c
        for i in range(cfg.n_down):
            nxt = c * 2 if i == 0 else ch
            enc += [nn.Conv2d(ch, nxt, 3, stride=2, padding=1), nn.SiLU()]
            ch = nxt
        enc.append(nn.Conv2d(ch, cfg.latent_channels, 1))
        self.enc = nn.Sequential(*enc)
        dec = [nn.Conv2d(cfg.latent_channels, ch, 3, padding=1), nn.SiLU()]
        for i in range(cfg.n_down):
            nxt = c if i == cfg.n_down - 1 else ch
            dec += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(ch, nxt, 3, padding=1), nn.SiLU()]
            ch = nxt
        dec.append(nn.Conv2d(ch, cfg.image_channels, 3, padding=1))
        self.dec = nn.Sequential(*dec)
        self.register_buffer("latent_scale", torch.ones(()))

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        f = self.cfg.factor
        if image.dim() != 4 or image.shape[1] != self.cfg.image_channels:
            raise ContractError(f"expected [B, {self.cfg.image_channels}, H, W], got {tuple(image.shape)}")
        if image.shape[-1] % f or image.shape[-2] % f:
            raise ContractError(f"image size {tuple(image.shape[-2:])} not divisible by factor {f}")
        return self.enc(image) * self.latent_scale

    def decode(self, latent: torch.Tensor) -> torch.Tensor:
        if latent.dim() != 4 or latent.shape[1] != self.cfg.latent_channels:
            raise ContractError(f"expected [B, {self.cfg.latent_channels}, h, w], got {tuple(latent.shape)}")
        return torch.sigmoid(self.dec(latent / self.latent_scale))


def ae_encode(image: torch.Tensor, ae: Autoencoder) -> torch.Tensor:
    single = image.dim() == 3
    z = ae.encode(image[None] if single else image)
    return z[0] if single else z


def ae_decode(latent: torch.Tensor, ae: Autoencoder) -> torch.Tensor:
    single = latent.dim() == 3
    x = ae.decode(latent[None] if single else latent)
    return x[0] if single else x


# ---------------------------------------------------------------------------
# Objective and sampling
# ---------------------------------------------------------------------------


EpsModel = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


def training_loss(
    x0: torch.Tensor,
    eps_model: EpsModel,
    schedule: NoiseSchedule,
    generator: torch.Generator,
    t: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Epsilon-prediction MSE with per-sample uniform ``t`` and fresh noise.

    ``eps_model(x_t, t)`` closes over the conditioning (tokens, control).
    Passing ``t`` explicitly skips the timestep draw.
    """
    if x0.shape[0] == 0:
        raise ContractError("empty batch")
    if t is None:
        t = torch.randint(1, schedule.T_steps + 1, (x0.shape[0],), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    x_t = add_noise(x0, eps, t, schedule)
    eps_hat = eps_model(x_t, t)
    return F.mse_loss(eps_hat, eps)


def ddim_timesteps(T_steps: int, n_steps: int) -> list[int]:
    if not 1 <= n_steps <= T_steps:
        raise ConfigurationError(f"n_steps must be in 1..{T_steps}, got {n_steps}")
    stride = T_steps // n_steps
    return [T_steps - i * stride for i in range(n_steps)]


def ddim_loop(eps_model: EpsModel, x_T: torch.Tensor, schedule: NoiseSchedule, n_steps: int) -> torch.Tensor:
    """Deterministic (eta = 0) DDIM from ``x_T`` down to a clean latent."""
    ts = ddim_timesteps(schedule.T_steps, n_steps)
    x = x_T
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        ab, ab_prev = schedule.alpha_bar(t), schedule.alpha_bar(t_prev)
        tt = torch.full((x.shape[0],), t, dtype=torch.long)
        eps = eps_model(x, tt)
        x0_hat = (x - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
        x = math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps
    return x


@torch.no_grad()
def ddim_sample(
    unet: UNet,
    autoencoder: Autoencoder,
    tokens: torch.Tensor,
    schedule: NoiseSchedule,
    n_steps: int = 50,
    seed: int = 0,
    control: Optional[Callable[[torch.Tensor, torch.Tensor], Sequence[torch.Tensor]]] = None,
    guidance_scale: float = 1.0,
    latent_hw: Optional[tuple[int, int]] = None,
) -> torch.Tensor:
    """Generate images ``[B, 3, H, W]`` in ``[0, 1]`` from conditioning tokens ``[B, S, D]``.

    ``control(x_t, t)`` returns the residual list for the current step (the
    saliency map is bound inside it). With ``guidance_scale == 1`` the
    unconditional pass is skipped entirely.
    """
    if tokens.dim() == 2:
        tokens = tokens[None]
    b = tokens.shape[0]
    dtype = next(unet.parameters()).dtype
    if latent_hw is None:
        latent_hw = (16, 16)
    gen = torch.Generator().manual_seed(int(seed))
    x_T = torch.randn((b, unet.cfg.latent_channels, *latent_hw), generator=gen, dtype=dtype)
    tokens = tokens.to(dtype)
    null = unet.null_context.expand(b, -1, -1)

    def eps_model(x, t):
        res = control(x, t) if control is not None else None
        eps = unet(x, t, tokens, res)
        if guidance_scale != 1.0:
            eps_u = unet(x, t, null, res)
            eps = eps_u + guidance_scale * (eps - eps_u)
        return eps

    z = ddim_loop(eps_model, x_T, schedule, n_steps)
    return autoencoder.decode(z).clamp(0.0, 1.0)
