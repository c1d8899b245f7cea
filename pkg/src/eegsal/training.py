"""Two-stage optimization: LoRA + encoder on EEG tokens, then the control branch.

Every random draw during training (batch membership, timestep, noise) comes
from a generator keyed by ``(seed, step, micro_batch[, sample])`` so a run
resumed from a checkpoint reproduces the uninterrupted loss trace exactly.
"""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, save_checkpoint
from .datasets import PairedDataset, SyntheticSpec, generate_synthetic
from .diffusion import add_noise
from .errors import ConfigurationError, ContractError, TrainingError
from .pipeline import ModelConfig, Pipeline

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration and learning-rate schedule
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageConfig:
    stage: int
    lr_max: float
    total_steps: int
    batch_size: int
    grad_accum: int = 1
    eta_min: float = 1e-6
    T0: int = 5000
    precision: str = "full"
    weight_decay: float = 1e-2
    seed: int = 0
    betas: tuple = (0.9, 0.999)
    cond_dropout: float = 0.0
    checkpoint_every: int = 0

    def validate(self):
        if self.stage not in (1, 2):
            raise ConfigurationError("stage must be 1 or 2")
        if not self.lr_max > self.eta_min > 0:
            raise ConfigurationError("need lr_max > eta_min > 0")
        if self.total_steps < 1 or self.batch_size < 1 or self.grad_accum < 1 or self.T0 < 1:
            raise ConfigurationError("total_steps, batch_size, grad_accum and T0 must be >= 1")
        if self.precision not in ("full", "half"):
            raise ConfigurationError("precision must be 'full' or 'half'")
        if not 0.0 <= self.cond_dropout < 1.0:
            raise ConfigurationError("cond_dropout must be in [0, 1)")

    @classmethod
    def published(cls, stage: int, **overrides) -> "StageConfig":
        """The published hyperparameters for ``stage``."""
        if stage == 1:
            base = cls(stage=1, lr_max=2e-3, total_steps=212_000, batch_size=8, grad_accum=1,
                       eta_min=1e-6, T0=5000, precision="half")
        elif stage == 2:
            base = cls(stage=2, lr_max=1e-4, total_steps=65_000, batch_size=2, grad_accum=4,
                       eta_min=1e-5, T0=5000, precision="full")
        else:
            raise ConfigurationError("stage must be 1 or 2")
        return replace(base, **overrides)

    @classmethod
    def desk(cls, stage: int, **overrides) -> "StageConfig":
        """Published values with CPU-sized step counts and full precision.

        Stage 2 also raises ``lr_max`` to 1e-3: at 500 steps the published
        1e-4 barely moves the zero-initialized projections.
        """
        desk = {"total_steps": 500, "precision": "full"}
        if stage == 2:
            desk["lr_max"] = 1e-3
        return cls.published(stage, **{**desk, **overrides})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "StageConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        return cls(**d)


def lr_at(step: int, cfg: StageConfig) -> float:
    """Cosine annealing with warm restarts every ``T0`` steps (restart multiplier 1)."""
    if step < 0:
        raise ConfigurationError("step must be >= 0")
    t_cur = step % cfg.T0
    return cfg.eta_min + (cfg.lr_max - cfg.eta_min) * (1.0 + math.cos(math.pi * t_cur / cfg.T0)) / 2.0


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@torch.no_grad()
def adamw_step(params: dict, grads: dict, state: AdamWState, lr: float, betas=(0.9, 0.999),
               weight_decay: float = 1e-2, eps: float = 1e-8, step_index: Optional[int] = None) -> AdamWState:
    """In-place AdamW update with bias correction and decoupled weight decay."""
    for name, g in grads.items():
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {name} at step {step_index}", step_index)
    state.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = torch.zeros_like(p)
            state.v[name] = torch.zeros_like(p)
        m, v = state.m[name], state.v[name]
        if weight_decay:
            p.mul_(1.0 - lr * weight_decay)
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))
    return state


# ---------------------------------------------------------------------------
# Deterministic draws
# ---------------------------------------------------------------------------


def keyed_generator(*key: int) -> torch.Generator:
    seed = int(np.random.SeedSequence([int(k) for k in key]).generate_state(1, dtype=np.uint64)[0] >> 1)
    return torch.Generator().manual_seed(seed)


def batch_indices(seed: int, step: int, micro: int, n: int, batch: int) -> torch.Tensor:
    gen = keyed_generator(seed, step, micro, 0x5EED)
    if batch <= n:
        return torch.randperm(n, generator=gen)[:batch]
    return torch.randint(0, n, (batch,), generator=gen)


def sample_noise(seed: int, step: int, micro: int, shape: tuple, T_steps: int, dtype) -> tuple:
    """Per-sample timestep in ``1..T_steps`` and gaussian noise, keyed by sample index."""
    ts, eps = [], []
    for k in range(shape[0]):
        gen = keyed_generator(seed, step, micro, k)
        ts.append(int(torch.randint(1, T_steps + 1, (1,), generator=gen)))
        eps.append(torch.randn(shape[1:], generator=gen, dtype=torch.float64).to(dtype))
    return torch.tensor(ts), torch.stack(eps)


def _autocast(precision: str):
    if precision == "half":
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


# ---------------------------------------------------------------------------
# Generic loop
# ---------------------------------------------------------------------------


@dataclass
class LoopState:
    step: int = 0
    optim: AdamWState = field(default_factory=AdamWState)
    trace: list = field(default_factory=list)


def optimize(params: dict, micro_loss: Callable[[int, int], torch.Tensor], cfg: StageConfig, state: LoopState,
             lr_fn: Callable[[int], float], on_step: Optional[Callable[[LoopState], None]] = None) -> LoopState:
    """Run optimizer steps ``state.step .. cfg.total_steps - 1``.

    ``micro_loss(step, micro)`` returns the loss of one micro-batch; gradients
    are averaged over ``cfg.grad_accum`` micro-batches per optimizer step.
    """
    for p in params.values():
        p.requires_grad_(True)
    while state.step < cfg.total_steps:
        step = state.step
        for p in params.values():
            p.grad = None
        total = 0.0
        for micro in range(cfg.grad_accum):
            with _autocast(cfg.precision):
                loss = micro_loss(step, micro)
            loss = loss.float() if cfg.precision == "half" else loss
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at step {step}", step)
            (loss / cfg.grad_accum).backward()
            total += float(loss.detach())
        lr = lr_fn(step)
        grads = {k: (p.grad if p.grad is not None else torch.zeros_like(p)) for k, p in params.items()}
        adamw_step(params, grads, state.optim, lr, cfg.betas, cfg.weight_decay, step_index=step)
        state.trace.append([step, total / cfg.grad_accum, lr])
        state.step += 1
        if on_step is not None:
            on_step(state)
    for p in params.values():
        p.grad = None
    return state


def _optim_arrays(state: AdamWState) -> dict:
    out = {}
    for k in state.m:
        out[f"optim.m.{k}"] = state.m[k].detach().numpy().copy()
        out[f"optim.v.{k}"] = state.v[k].detach().numpy().copy()
    return out


def _restore_optim(ckpt: Checkpoint, names, dtype) -> AdamWState:
    st = AdamWState(step=int(ckpt.meta.get("optim_step", 0)))
    for k in names:
        if f"optim.m.{k}" in ckpt.arrays:
            st.m[k] = torch.from_numpy(ckpt.arrays[f"optim.m.{k}"].copy()).to(dtype)
            st.v[k] = torch.from_numpy(ckpt.arrays[f"optim.v.{k}"].copy()).to(dtype)
    return st


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for step, loss, lr in trace:
            w.writerow([step, repr(loss), repr(lr)])


# ---------------------------------------------------------------------------
# Pre-training (stand-in for the pretrained base model)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PretrainConfig:
    ae_steps: int = 2000
    ae_lr: float = 2e-3
    ae_batch: int = 8
    unet_steps: int = 1500
    unet_lr: float = 1e-3
    unet_batch: int = 8
    seed: int = 0


def pretrain_autoencoder(pipe: Pipeline, images: np.ndarray, steps: int = 2000, lr: float = 2e-3,
                         batch: int = 8, seed: int = 0) -> list:
    """Fit the autoencoder by pixel MSE, then set ``latent_scale`` to 1 / std of the latents."""
    ae = pipe.autoencoder
    x_all = torch.as_tensor(images, dtype=pipe.dtype)
    with torch.no_grad():
        ae.latent_scale.fill_(1.0)
    params = {n: p for n, p in ae.named_parameters()}
    cfg = StageConfig(stage=1, lr_max=lr, eta_min=lr * 1e-3, total_steps=steps, batch_size=batch,
                      T0=steps, weight_decay=0.0, seed=seed)
    n = x_all.shape[0]

    def micro_loss(step, micro):
        idx = batch_indices(seed, step, micro, n, batch)
        x = x_all[idx]
        return F.mse_loss(ae.decode(ae.encode(x)), x)

    state = optimize(params, micro_loss, cfg, LoopState(), lambda s: lr_at(s, cfg))
    for p in params.values():
        p.requires_grad_(False)
    with torch.no_grad():
        z = ae.encode(x_all)
        ae.latent_scale.fill_(1.0 / float(z.std()))
    return state.trace


def pretrain_unet(pipe: Pipeline, latents: torch.Tensor, labels=None, steps: int = 1500, lr: float = 1e-3,
                  batch: int = 8, seed: int = 0, caption_dropout: float = 0.1) -> list:
    """Caption-conditioned denoising pre-training of the base UNet.

    A learned per-class token table plays the role of a text encoder: each
    latent is denoised under its class "caption", or under the null context
    with probability ``caption_dropout`` (and always when the label is
    negative or ``labels`` is None). The table is discarded afterwards.
    """
    unet = pipe.unet
    S, D = unet.cfg.context_tokens, unet.cfg.context_dim
    n = latents.shape[0]
    labels = torch.full((n,), -1, dtype=torch.long) if labels is None else torch.as_tensor(labels).long()
    n_cls = max(int(labels.max()) + 1, 1)
    gen = torch.Generator().manual_seed(int(seed) + 104729)
    captions = torch.nn.Parameter(torch.randn((n_cls, S, D), generator=gen, dtype=torch.float64).to(pipe.dtype))
    params = {n_: p for n_, p in unet.named_parameters()}
    params["pretrain.captions"] = captions
    cfg = StageConfig(stage=1, lr_max=lr, eta_min=lr * 1e-2, total_steps=steps, batch_size=batch,
                      T0=steps, weight_decay=0.0, seed=seed)
    T = pipe.schedule.T_steps

    def micro_loss(step, micro):
        idx = batch_indices(seed, step, micro, n, batch)
        x0 = latents[idx]
        t, eps = sample_noise(seed + 7919, step, micro, tuple(x0.shape), T, x0.dtype)
        x_t = add_noise(x0, eps, t, pipe.schedule)
        lab = labels[idx]
        drop = torch.rand(len(idx), generator=keyed_generator(seed, step, micro, 0xD20)) < caption_dropout
        use_null = drop | (lab < 0)
        ctx = torch.where(use_null[:, None, None], unet.null_context.expand(len(idx), -1, -1),
                          captions[lab.clamp(min=0)])
        return F.mse_loss(unet(x_t, t, ctx), eps)

    state = optimize(params, micro_loss, cfg, LoopState(), lambda s: lr_at(s, cfg))
    for p in params.values():
        p.requires_grad_(False)
    return state.trace


def pretrain_base(ds: PairedDataset, model_config: ModelConfig, pcfg: PretrainConfig = PretrainConfig(),
                  seed: int = 0) -> tuple:
    """Build a pipeline and pre-train its autoencoder and UNet; returns (pipeline, base checkpoint)."""
    pipe = Pipeline(model_config, seed=seed)
    images = ds.images()
    ae_trace = pretrain_autoencoder(pipe, images, pcfg.ae_steps, pcfg.ae_lr, pcfg.ae_batch, pcfg.seed)
    lat = pipe.latents(images)
    unet_trace = pretrain_unet(pipe, lat, ds.labels(), pcfg.unet_steps, pcfg.unet_lr, pcfg.unet_batch, pcfg.seed)
    meta = {
        "kind": "base",
        "model_config": model_config.to_dict(),
        "pretrain_config": asdict(pcfg),
        "init_seed": seed,
        "ae_final_loss": ae_trace[-1][1] if ae_trace else None,
        "unet_final_loss": unet_trace[-1][1] if unet_trace else None,
    }
    return pipe, Checkpoint(pipe.arrays(("autoencoder.", "unet.")), meta)


BASE_DATA_SEED = 100


def synthetic_base(model_config: ModelConfig, pcfg: PretrainConfig = PretrainConfig(), n_records: int = 64,
                   data_seed: int = BASE_DATA_SEED, seed: int = 0) -> tuple:
    """Pre-train a base model on a synthetic set disjoint from the training records.

    Stands in for a pretrained text-to-image model: it has learned the image
    domain and a class-token conditioning pathway, but never sees the EEG data.
    """
    spec = SyntheticSpec(n_records=n_records, channels=model_config.encoder.channels,
                         samples=model_config.encoder.samples, height=model_config.image_size,
                         width=model_config.image_size)
    ds = generate_synthetic(spec, data_seed)
    pipe, ckpt = pretrain_base(ds, model_config, pcfg, seed)
    ckpt.meta["base_data"] = {"n_records": n_records, "seed": data_seed}
    return pipe, ckpt


def pipeline_from_checkpoint(ckpt: Checkpoint, control: Optional[Checkpoint] = None) -> Pipeline:
    """Rebuild a pipeline (with adapters / control branch when present) from checkpoint arrays."""
    cfg = ModelConfig.from_dict(ckpt.meta["model_config"])
    pipe = Pipeline(cfg, seed=int(ckpt.meta.get("init_seed", 0)))
    if any(k.startswith("lora.") for k in ckpt.arrays):
        pipe.inject_lora(0)
    pipe.load_arrays(ckpt.arrays, strict_prefixes=("autoencoder.", "unet."))
    for p in pipe.unet.parameters():
        p.requires_grad_(False)
    if control is not None:
        ref = control.meta.get("base_hash")
        if ref is not None and ref != ckpt.hash:
            from .errors import CheckpointError

            raise CheckpointError("control checkpoint does not belong to this stage-1 checkpoint")
        pipe.init_control(0)
        pipe.load_arrays(control.arrays, strict_prefixes=("control.",))
    return pipe


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def _stage_tensors(pipe: Pipeline, ds: PairedDataset):
    lat = pipe.latents(ds.images())
    eeg = torch.as_tensor(ds.eeg(), dtype=pipe.dtype)
    sal = torch.as_tensor(ds.saliency_maps(), dtype=pipe.dtype)
    peak = sal.amax(dim=(-2, -1), keepdim=True)
    sal = torch.where(peak > 0, sal / torch.where(peak > 0, peak, torch.ones_like(peak)), sal)
    return lat, eeg, sal


def _frozen(pipe: Pipeline, trainable: dict):
    keep = {id(p) for p in trainable.values()}
    for t in pipe.named_tensors().values():
        if id(t) not in keep and t.requires_grad:
            t.requires_grad_(False)


def run_stage1(pipe: Pipeline, ds: PairedDataset, cfg: StageConfig, resume: Optional[Checkpoint] = None,
               out_dir=None, base_hash: Optional[str] = None, lora_seed: int = 0) -> Checkpoint:
    """Train adapters and the EEG encoder on the epsilon loss with EEG tokens as context.

    The base UNet and autoencoder stay frozen. ``resume`` restores arrays,
    optimizer moments, step counter and loss trace from a stage-1 checkpoint.
    """
    cfg.validate()
    if cfg.stage != 1:
        raise ConfigurationError("run_stage1 needs a stage-1 config")
    if pipe.lora is None:
        if resume is not None and any(k.startswith("lora.") for k in resume.arrays):
            pipe.inject_lora(lora_seed)
        else:
            raise ContractError("inject adapters before stage 1")
    params = {}
    for name, t in pipe.named_tensors().items():
        if name.startswith(("lora.", "encoder.")) and t.is_floating_point() and isinstance(t, torch.nn.Parameter):
            params[name] = t
    _frozen(pipe, params)
    state = LoopState()
    if resume is not None:
        pipe.load_arrays(resume.arrays)
        state = LoopState(step=int(resume.meta["step"]), optim=_restore_optim(resume, params, pipe.dtype),
                          trace=[list(r) for r in resume.meta.get("loss_trace", [])])
        base_hash = resume.meta.get("base_hash", base_hash)
    lat, eeg, _ = _stage_tensors(pipe, ds)
    n = lat.shape[0]
    T = pipe.schedule.T_steps

    def micro_loss(step, micro):
        idx = batch_indices(cfg.seed, step, micro, n, cfg.batch_size)
        x0 = lat[idx]
        t, eps = sample_noise(cfg.seed, step, micro, tuple(x0.shape), T, x0.dtype)
        tokens = pipe.encoder(eeg[idx])
        if cfg.cond_dropout > 0:
            gen = keyed_generator(cfg.seed, step, micro, 0xD20)
            drop = torch.rand(x0.shape[0], generator=gen) < cfg.cond_dropout
            tokens = torch.where(drop[:, None, None], pipe.unet.null_context.expand_as(tokens), tokens)
        x_t = add_noise(x0, eps, t, pipe.schedule)
        return F.mse_loss(pipe.unet(x_t, t, tokens), eps)

    return _run(pipe, params, micro_loss, cfg, state, out_dir, kind="stage1", base_hash=base_hash,
                prefixes=("autoencoder.", "unet.", "lora.", "encoder."))


def run_stage2(pipe: Pipeline, ds: PairedDataset, stage1: Checkpoint, cfg: StageConfig,
               resume: Optional[Checkpoint] = None, out_dir=None, control_seed: int = 0) -> Checkpoint:
    """Train only the control branch, with every stage-1 array frozen.

    Returns a control-only checkpoint whose ``base_hash`` is ``stage1.hash``.
    """
    cfg.validate()
    if cfg.stage != 2:
        raise ConfigurationError("run_stage2 needs a stage-2 config")
    if pipe.control is None:
        pipe.init_control(control_seed)
    params = {name: t for name, t in pipe.named_tensors().items()
              if name.startswith("control.") and isinstance(t, torch.nn.Parameter)}
    _frozen(pipe, params)
    state = LoopState()
    if resume is not None:
        if resume.meta.get("base_hash") != stage1.hash:
            from .errors import CheckpointError

            raise CheckpointError("stage-2 resume checkpoint belongs to a different stage-1 checkpoint")
        pipe.load_arrays(resume.arrays)
        state = LoopState(step=int(resume.meta["step"]), optim=_restore_optim(resume, params, pipe.dtype),
                          trace=[list(r) for r in resume.meta.get("loss_trace", [])])
    lat, eeg, sal = _stage_tensors(pipe, ds)
    with torch.no_grad():
        tokens_all = pipe.encoder(eeg)
    n = lat.shape[0]
    T = pipe.schedule.T_steps

    def micro_loss(step, micro):
        idx = batch_indices(cfg.seed, step, micro, n, cfg.batch_size)
        x0 = lat[idx]
        t, eps = sample_noise(cfg.seed, step, micro, tuple(x0.shape), T, x0.dtype)
        tokens = tokens_all[idx]
        x_t = add_noise(x0, eps, t, pipe.schedule)
        residuals = pipe.control(x_t, t, tokens, sal[idx])
        return F.mse_loss(pipe.unet(x_t, t, tokens, residuals), eps)

    return _run(pipe, params, micro_loss, cfg, state, out_dir, kind="stage2", base_hash=stage1.hash,
                prefixes=("control.",))


def _run(pipe, params, micro_loss, cfg, state, out_dir, kind, base_hash, prefixes) -> Checkpoint:
    out_dir = Path(out_dir) if out_dir is not None else None

    def snapshot(st: LoopState) -> Checkpoint:
        arrays = pipe.arrays(prefixes)
        arrays.update(_optim_arrays(st.optim))
        meta = {
            "kind": kind,
            "stage_config": cfg.to_dict(),
            "model_config": pipe.config.to_dict(),
            "step": st.step,
            "optim_step": st.optim.step,
            "rng": {"scheme": "keyed", "seed": cfg.seed, "next_step": st.step},
            "loss_trace": [list(r) for r in st.trace],
            "base_hash": base_hash,
        }
        return Checkpoint(arrays, meta)

    def on_step(st: LoopState):
        step, loss, lr = st.trace[-1]
        if st.step % 50 == 0 or st.step == cfg.total_steps:
            log.info("%s step %d loss %.5f lr %.3g", kind, step, loss, lr)
        if out_dir is not None and cfg.checkpoint_every and st.step % cfg.checkpoint_every == 0:
            save_checkpoint(snapshot(st), out_dir / f"{kind}_step{st.step:07d}.ckpt")

    try:
        optimize(params, micro_loss, cfg, state, lambda s: lr_at(s, cfg), on_step)
    except TrainingError as exc:
        exc.checkpoint = snapshot(state)
        if out_dir is not None:
            save_checkpoint(exc.checkpoint, out_dir / f"{kind}_last_good.ckpt")
        raise
    finally:
        for p in params.values():
            p.requires_grad_(False)
    ckpt = snapshot(state)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(ckpt, out_dir / f"{kind}.ckpt")
        write_trace_csv(out_dir / f"{kind}_loss.csv", state.trace)
    return ckpt
