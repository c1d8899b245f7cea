"""Low-rank adapters on cross-attention projections.

An adapter on a weight ``W [d_out, d_in]`` holds ``A [r, d_in]`` and
``B [d_out, r]``; the effective weight is ``W + (alpha / r) * B @ A``.
``B`` starts at zero so a freshly injected model is unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import CrossAttention
from .errors import ConfigurationError, ContractError

PROJECTIONS = ("to_q", "to_k", "to_v", "to_out")


@dataclass(frozen=True)
class LoRAConfig:
    rank: int = 8
    alpha: float = 8.0
    targets: tuple = PROJECTIONS
    # substring filter on the attention-site path; None selects every site
    sites: Optional[str] = None

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def validate(self):
        if self.rank < 1:
            raise ConfigurationError("LoRA rank must be >= 1")
        if not self.alpha > 0:
            raise ConfigurationError("LoRA alpha must be > 0")
        bad = set(self.targets) - set(PROJECTIONS)
        if bad or not self.targets:
            raise ConfigurationError(f"unknown LoRA targets {sorted(bad)}; choose from {PROJECTIONS}")


@dataclass
class LoRAAdapter:
    A: torch.Tensor
    B: torch.Tensor
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoRALinear(nn.Module):
    """``nn.Linear`` wrapper adding ``scale * x A^T B^T`` to the frozen base output."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, gen: torch.Generator):
        super().__init__()
        self.base = base
        self.rank = rank
        self.alpha = alpha
        dtype = base.weight.dtype
        a = torch.randn((rank, base.in_features), generator=gen, dtype=torch.float64) * 0.02
        self.lora_A = nn.Parameter(a.to(dtype))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank, dtype=dtype))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def adapter(self) -> LoRAAdapter:
        return LoRAAdapter(self.lora_A, self.lora_B, self.alpha)

    def forward(self, x):
        y = self.base(x)
        return y + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)

    def merged_weight(self) -> torch.Tensor:
        return merge(self.base.weight, self.adapter)


@dataclass
class LoRAHandle:
    model: nn.Module
    config: LoRAConfig
    adapters: dict = field(default_factory=dict)

    def trainable_parameters(self) -> list:
        out = []
        for name in sorted(self.adapters):
            out += [self.adapters[name].lora_A, self.adapters[name].lora_B]
        return out

    def trainable_count(self) -> int:
        return trainable_count(self)


def attention_sites(model: nn.Module) -> list[tuple[str, CrossAttention]]:
    return [(name, m) for name, m in model.named_modules() if isinstance(m, CrossAttention)]


def inject(model: nn.Module, config: LoRAConfig = LoRAConfig(), seed: int = 0) -> LoRAHandle:
    """Wrap every targeted projection in ``model`` with an adapter and freeze the base.

    Adapters are created in sorted path order so the same seed always gives the
    same ``A`` matrices. Injecting into an already adapted projection raises.
    """
    config.validate()
    gen = torch.Generator().manual_seed(int(seed))
    sites = [(n, m) for n, m in attention_sites(model) if config.sites is None or config.sites in n]
    if not sites:
        raise ConfigurationError(f"LoRA site selector {config.sites!r} matches no attention layer")
    for _, site in sites:
        for proj in config.targets:
            if isinstance(getattr(site, proj), LoRALinear):
                raise ConfigurationError("projection already carries an adapter; stacking is not supported")
    for p in model.parameters():
        p.requires_grad_(False)
    handle = LoRAHandle(model=model, config=config)
    for path, site in sorted(sites, key=lambda s: s[0]):
        for proj in config.targets:
            wrapped = LoRALinear(getattr(site, proj), config.rank, config.alpha, gen)
            setattr(site, proj, wrapped)
            handle.adapters[f"{path}.{proj}" if path else proj] = wrapped
    return handle


def find_adapters(model: nn.Module) -> dict:
    return {name: m for name, m in model.named_modules() if isinstance(m, LoRALinear)}


def _check(x, W, adapter):
    if adapter.A.shape[1] != W.shape[1] or adapter.B.shape[0] != W.shape[0] or adapter.B.shape[1] != adapter.A.shape[0]:
        raise ContractError(
            f"adapter A{tuple(adapter.A.shape)} B{tuple(adapter.B.shape)} incompatible with W{tuple(W.shape)}"
        )
    if x is not None and x.shape[-1] != W.shape[1]:
        raise ContractError(f"input width {x.shape[-1]} != W input width {W.shape[1]}")


def adapted_forward(x: torch.Tensor, W: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    """``x W^T + scale * x A^T B^T`` without forming the dense update."""
    _check(x, W, adapter)
    return x @ W.T + adapter.scale * ((x @ adapter.A.T) @ adapter.B.T)


def merge(W: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    _check(None, W, adapter)
    return W + adapter.scale * (adapter.B @ adapter.A)


def merge_into(model: nn.Module) -> nn.Module:
    """Replace every ``LoRALinear`` in ``model`` with a dense ``nn.Linear`` holding the merged weight."""
    for name, m in list(find_adapters(model).items()):
        parent_name, _, attr = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        dense = nn.Linear(m.base.in_features, m.base.out_features, bias=m.base.bias is not None)
        dense = dense.to(m.base.weight.dtype)
        with torch.no_grad():
            dense.weight.copy_(m.merged_weight())
            if m.base.bias is not None:
                dense.bias.copy_(m.base.bias)
        setattr(parent, attr, dense)
    return model


def trainable_count(handle) -> int:
    adapters = handle.adapters.values() if isinstance(handle, LoRAHandle) else find_adapters(handle).values()
    return sum(a.lora_A.numel() + a.lora_B.numel() for a in adapters)
