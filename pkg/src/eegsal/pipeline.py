"""Bundle of all networks with a flat named-array view for checkpointing."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch

from .controlnet import ControlBranch, init_control
from .diffusion import (
    Autoencoder,
    AutoencoderConfig,
    NoiseSchedule,
    UNet,
    UNetConfig,
    build_schedule,
    ddim_sample,
)
from .eeg_encoder import EEGEncoder, EncoderConfig, init_encoder
from .errors import ConfigurationError, ContractError
from .lora import LoRAConfig, LoRAHandle, LoRALinear, find_adapters, inject

PREFIXES = ("autoencoder.", "unet.", "lora.", "encoder.", "control.")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    autoencoder: AutoencoderConfig = field(default_factory=lambda: AutoencoderConfig(hidden=16))
    lora: LoRAConfig = field(default_factory=LoRAConfig)
    T_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    sample_steps: int = 50
    guidance_scale: float = 1.0

    @property
    def latent_size(self) -> int:
        return self.image_size // self.autoencoder.factor

    def validate(self):
        if self.image_size % self.autoencoder.factor:
            raise ConfigurationError("image_size must be divisible by the autoencoder factor")
        if self.encoder.dim != self.unet.context_dim or self.encoder.tokens != self.unet.context_tokens:
            raise ConfigurationError("encoder token geometry must match the UNet context (S, D)")
        if self.unet.latent_channels != self.autoencoder.latent_channels:
            raise ConfigurationError("UNet and autoencoder latent channels differ")
        n_levels = len(self.unet.channel_mult)
        if self.latent_size % (2 ** (n_levels - 1)):
            raise ConfigurationError("latent size not divisible by the UNet downsampling")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        sub = {"encoder": EncoderConfig, "unet": UNetConfig, "autoencoder": AutoencoderConfig, "lora": LoRAConfig}
        kwargs = {}
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        for k, v in d.items():
            if k in sub:
                v = sub[k](**{kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()})
            kwargs[k] = v
        return cls(**kwargs)


def desk_model_config(channels: int = 64, samples: int = 250, image_size: int = 64) -> ModelConfig:
    return ModelConfig(image_size=image_size, encoder=EncoderConfig(channels=channels, samples=samples))


class Pipeline:
    """Autoencoder + UNet (+ adapters) + EEG encoder (+ control branch)."""

    def __init__(self, config: ModelConfig, seed: int = 0, dtype=torch.float32):
        config.validate()
        self.config = config
        self.dtype = dtype
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(seed))
            self.autoencoder = Autoencoder(config.autoencoder).to(dtype)
            self.unet = UNet(config.unet).to(dtype)
        self.encoder: EEGEncoder = init_encoder(config.encoder, seed + 1, dtype=dtype)
        self.lora: Optional[LoRAHandle] = None
        self.control: Optional[ControlBranch] = None
        self.schedule: NoiseSchedule = build_schedule(config.T_steps, config.beta_start, config.beta_end)

    # -- structure ---------------------------------------------------------

    def inject_lora(self, seed: int = 0) -> LoRAHandle:
        self.lora = inject(self.unet, self.config.lora, seed)
        return self.lora

    def init_control(self, seed: int = 0) -> ControlBranch:
        f = self.config.autoencoder.factor
        self.control = init_control(self.unet, seed, (self.config.image_size,) * 2, f)
        return self.control

    # -- forward helpers ---------------------------------------------------

    def tokens(self, eeg) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(eeg), dtype=self.dtype)
        return self.encoder(x)

    @torch.no_grad()
    def latents(self, images) -> torch.Tensor:
        x = torch.as_tensor(np.asarray(images), dtype=self.dtype)
        return self.autoencoder.encode(x)

    @torch.no_grad()
    def generate(self, eeg, saliency=None, seed: int = 0, n_steps: Optional[int] = None,
                 guidance_scale: Optional[float] = None) -> np.ndarray:
        """Images ``[B, 3, H, W]`` for a batch of EEG epochs.

        With ``saliency`` (``[B, H, W]``) the control branch supplies residuals;
        without it the control branch is skipped entirely (EEG-only arm).
        """
        tokens = self.tokens(eeg)
        if tokens.dim() == 2:
            tokens = tokens[None]
        control = None
        if saliency is not None:
            if self.control is None:
                raise ContractError("saliency-guided generation requested but no control branch is loaded")
            sal = torch.as_tensor(np.asarray(saliency), dtype=self.dtype)
            if sal.dim() == 2:
                sal = sal[None]
            branch = self.control

            def control(x, t):
                return branch(x, t, tokens, sal)

        out = ddim_sample(
            self.unet,
            self.autoencoder,
            tokens,
            self.schedule,
            n_steps=n_steps or self.config.sample_steps,
            seed=seed,
            control=control,
            guidance_scale=self.config.guidance_scale if guidance_scale is None else guidance_scale,
            latent_hw=(self.config.latent_size,) * 2,
        )
        return out.numpy()

    # -- parameters --------------------------------------------------------

    def named_tensors(self) -> dict:
        """Flat ``prefix.path -> tensor`` table (parameters and buffers).

        Adapter-wrapped projections keep their pre-injection base names under
        ``unet.``; the adapter factors live under ``lora.``.
        """
        out = {}
        for k, v in self.autoencoder.state_dict(keep_vars=True).items():
            out["autoencoder." + k] = v
        for k, v in self.unet.state_dict(keep_vars=True).items():
            if ".lora_A" in k or ".lora_B" in k:
                out["lora." + k] = v
            else:
                out["unet." + k.replace(".base.", ".")] = v
        for k, v in self.encoder.state_dict(keep_vars=True).items():
            out["encoder." + k] = v
        if self.control is not None:
            for k, v in self.control.state_dict(keep_vars=True).items():
                out["control." + k] = v
        return out

    def arrays(self, prefixes=PREFIXES) -> dict:
        return {k: v.detach().cpu().numpy().copy() for k, v in self.named_tensors().items()
                if k.startswith(tuple(prefixes))}

    def load_arrays(self, arrays: dict, strict_prefixes=()):
        """Copy arrays into matching tensors; every name in ``strict_prefixes`` must be covered."""
        table = self.named_tensors()
        for k, v in arrays.items():
            if k not in table:
                if k.startswith(PREFIXES):
                    raise ContractError(f"checkpoint array {k} has no counterpart in the model")
                continue
            t = table[k]
            if tuple(t.shape) != tuple(v.shape):
                raise ContractError(f"checkpoint array {k} has shape {v.shape}, model expects {tuple(t.shape)}")
            with torch.no_grad():
                t.copy_(torch.from_numpy(np.asarray(v)).to(t.dtype))
        for k in table:
            if k.startswith(tuple(strict_prefixes)) and k not in arrays:
                raise ContractError(f"checkpoint is missing array {k}")

    def adapters(self) -> dict:
        return find_adapters(self.unet)
