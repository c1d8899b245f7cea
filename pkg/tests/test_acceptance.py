"""Acceptance criteria 1-10, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v -s``; the terminal summary ends with
one PASS/FAIL line per criterion plus the measured numbers.
"""

import math
import time

import numpy as np
import pytest
import torch

from conftest import fd_check
from eegsal.checkpoint import load_checkpoint, save_checkpoint
from eegsal.cli import main
from eegsal.controlnet import init_control
from eegsal.datasets import SyntheticSpec, generate_synthetic, load_dataset, load_image, save_dataset
from eegsal.diffusion import UNet, UNetConfig
from eegsal.eeg_encoder import EncoderConfig, init_encoder
from eegsal.evaluation import (
    default_extractors,
    evaluate_run,
    pixcorr,
    saliency_cc,
    saliency_kl,
    saliency_sim,
    ssim,
    two_way_identification,
)
from eegsal.lora import LoRAAdapter, adapted_forward, inject, merge
from eegsal.pipeline import desk_model_config
from eegsal.saliency import spectral_residual
from eegsal.training import StageConfig, lr_at, pipeline_from_checkpoint, run_stage1, run_stage2, synthetic_base

pytestmark = pytest.mark.slow


def cli(*argv):
    return main([str(a) for a in argv])


def running_ratio(trace, window=50):
    losses = [r[1] for r in trace]
    return float(np.mean(losses[-window:]) / np.mean(losses[:window]))


def changed(before: dict, after: dict) -> set:
    return {k for k in before if not np.array_equal(before[k], after[k])}


@pytest.fixture(scope="module")
def base(tmp_path_factory):
    """Desk-scale stand-in for the pretrained generator, built on a disjoint synthetic set."""
    root = tmp_path_factory.mktemp("base")
    t0 = time.time()
    _, ckpt = synthetic_base(desk_model_config())
    save_checkpoint(ckpt, root / "base.ckpt")
    return {"ckpt": ckpt, "path": root / "base.ckpt", "seconds": time.time() - t0}


@pytest.fixture(scope="module")
def steering(base, tmp_path_factory):
    """Criterion-8 run through the CLI: 16 records, desk preset, both generation arms."""
    root = tmp_path_factory.mktemp("steer")
    t0 = time.time()
    assert cli("synth", "--n", 16, "--test-fraction", 0, "--seed", 0, "--out", root / "ds") == 0
    assert cli("train1", "--data", root / "ds", "--base", base["path"], "--preset", "desk", "--out", root / "s1") == 0
    assert cli("train2", "--data", root / "ds", "--stage1", root / "s1/stage1.ckpt", "--preset", "desk",
               "--out", root / "s2") == 0
    common = ["--data", root / "ds", "--split", "train", "--stage1", root / "s1/stage1.ckpt", "--seed", 0]
    assert cli("generate", *common, "--with-saliency", "--stage2", root / "s2/stage2.ckpt",
               "--out", root / "guided") == 0
    assert cli("generate", *common, "--eeg-only", "--out", root / "eeg") == 0
    return {"root": root, "seconds": time.time() - t0 + base["seconds"]}


@pytest.fixture(scope="module")
def overfit(base):
    """Criterion-7 runs on 8 records, with full array snapshots for the freeze checks."""
    ds = generate_synthetic(SyntheticSpec(n_records=8), 0)
    pipe = pipeline_from_checkpoint(base["ckpt"])
    pipe.inject_lora(0)
    t0 = time.time()
    snaps = [pipe.arrays()]
    s1 = run_stage1(pipe, ds, StageConfig.desk(1))
    snaps.append(pipe.arrays())
    pipe.init_control(0)
    snaps.append(pipe.arrays())
    s2 = run_stage2(pipe, ds, s1, StageConfig.desk(2))
    snaps.append(pipe.arrays())
    return {"s1": s1, "s2": s2, "snaps": snaps, "seconds": time.time() - t0}


def test_criterion_01_zero_init_transparency(steering, acceptance_detail):
    root = steering["root"]
    common = ["--data", root / "ds", "--split", "train", "--stage1", root / "s1/stage1.ckpt", "--seed", 0]
    t0 = time.time()
    assert cli("generate", *common, "--eeg-only", "--out", root / "eeg1") == 0
    assert cli("generate", *common, "--with-saliency", "--fresh-control", "--out", root / "fresh") == 0
    seconds = time.time() - t0
    a = sorted((root / "eeg1/recon").glob("*.png"))
    b = sorted((root / "fresh/recon").glob("*.png"))
    identical = [p.read_bytes() == q.read_bytes() for p, q in zip(a, b)]

    # the same comparison on the raw float arrays
    ds = load_dataset(root / "ds")
    pipe = pipeline_from_checkpoint(load_checkpoint(root / "s1/stage1.ckpt"))
    plain = pipe.generate(ds.eeg()[:4], seed=5)
    pipe.init_control(0)
    with_branch = pipe.generate(ds.eeg()[:4], ds.saliency_maps()[:4], seed=5)
    acceptance_detail(f"{sum(identical)}/{len(a)} PNGs identical; float arrays equal: "
                      f"{np.array_equal(plain, with_branch)}; generate took {seconds:.1f}s")
    assert len(a) == 16 and all(identical)
    assert np.array_equal(plain, with_branch)
    assert seconds < 120


def test_criterion_02_lora_identity_and_merge(acceptance_detail):
    t0 = time.time()
    torch.manual_seed(0)
    net = UNet(UNetConfig())
    x, c, t = torch.randn(2, 4, 16, 16), torch.randn(2, 4, 128), torch.tensor([10, 900])
    before = net(x, t, c)
    inject(net, seed=0)
    identity = torch.equal(before, net(x, t, c))

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        d_in, d_out, r = int(rng.integers(1, 257)), int(rng.integers(1, 257)), int(rng.integers(1, 17))
        W = torch.as_tensor(rng.normal(size=(d_out, d_in)))
        ad = LoRAAdapter(torch.as_tensor(rng.normal(size=(r, d_in))), torch.as_tensor(rng.normal(size=(d_out, r))),
                         float(rng.uniform(0.5, 32)))
        xi = torch.as_tensor(rng.normal(size=(1, d_in)))
        dyn, mer = adapted_forward(xi, W, ad), xi @ merge(W, ad).T
        worst = max(worst, float((dyn - mer).norm() / dyn.norm()))
    seconds = time.time() - t0
    acceptance_detail(f"fresh adapters bitwise identity: {identity}; worst merge rel. error {worst:.2e}; "
                      f"{seconds:.1f}s")
    assert identity and worst < 1e-6 and seconds < 60


def test_criterion_03_freeze_discipline(overfit, acceptance_detail):
    s0, s1, s1c, s2 = overfit["snaps"]
    stage1 = changed(s0, s1)
    stage2 = changed(s1c, s2)
    bad1 = sorted(k for k in stage1 if not k.startswith(("lora.", "encoder.")))
    bad2 = sorted(k for k in stage2 if not k.startswith("control."))
    acceptance_detail(f"stage 1 changed {len(stage1)} arrays ({len(bad1)} outside lora/encoder); "
                      f"stage 2 changed {len(stage2)} arrays ({len(bad2)} outside control)")
    assert stage1 and not bad1
    assert any(k.startswith("lora.") for k in stage1) and any(k.startswith("encoder.") for k in stage1)
    assert stage2 and not bad2
    # saved stage-2 checkpoint holds control arrays only, tied to the stage-1 hash
    assert all(k.startswith(("control.", "optim.")) for k in overfit["s2"].arrays)
    assert overfit["s2"].meta["base_hash"] == overfit["s1"].hash


def test_criterion_04_schedule_exactness(acceptance_detail):
    worst = 0.0
    for stage in (1, 2):
        cfg = StageConfig.published(stage)
        for step in (0, 1, 2500, 4999, 5000, 7500, 12500):
            want = cfg.eta_min + (cfg.lr_max - cfg.eta_min) * (1 + math.cos(math.pi * (step % 5000) / 5000)) / 2
            worst = max(worst, abs(lr_at(step, cfg) - want))
    restarts = [lr_at(s, StageConfig.published(1)) for s in (0, 5000, 10000)] + \
               [lr_at(s, StageConfig.published(2)) for s in (0, 5000, 10000)]
    acceptance_detail(f"max |lr - closed form| = {worst:.1e}; restart values {restarts}")
    assert worst <= 1e-12
    assert all(abs(v - 2e-3) <= 1e-12 for v in restarts[:3])
    assert all(abs(v - 1e-4) <= 1e-12 for v in restarts[3:])


def test_criterion_05_gradient_checks(acceptance_detail):
    t0 = time.time()
    errs = {}

    enc = init_encoder(EncoderConfig(channels=4, samples=16, tokens=2, dim=4, conv_widths=(4, 4),
                                     kernel_sizes=(3, 3)), 0, dtype=torch.float64)
    x = torch.as_tensor(np.random.default_rng(0).normal(size=(3, 4, 16)))
    errs["encoder"] = fd_check(lambda: (enc(x) ** 2).mean(), list(enc.parameters()))

    torch.manual_seed(1)
    net = UNet(UNetConfig(latent_channels=2, base_channels=4, channel_mult=(1, 2), attention_levels=(1,),
                          context_dim=6, context_tokens=2, time_dim=8, groups=2)).double()
    attn = net.encoder.down[1].attn
    with torch.no_grad():
        attn.to_out.weight.normal_(0, 0.5)
    z = torch.randn(2, 2, 8, 8, dtype=torch.float64)
    ctx = torch.randn(2, 2, 6, dtype=torch.float64)
    errs["cross_attention"] = fd_check(lambda: (net(z, torch.tensor([10, 600]), ctx) ** 2).mean(),
                                       [attn.to_q.weight, attn.to_k.weight, attn.to_v.weight, attn.to_out.weight])

    branch = init_control(net, 0, image_hw=(32, 32))
    s = torch.rand(2, 32, 32, dtype=torch.float64)
    errs["hint_encoder"] = fd_check(lambda: (branch.hint_features(s) ** 2).mean(), list(branch.hint.parameters()))
    seconds = time.time() - t0
    acceptance_detail(", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {seconds:.1f}s")
    assert all(v < 1e-4 for v in errs.values()) and seconds < 120


def test_criterion_06_metric_oracles(acceptance_detail):
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(0)

    def oracle(a, b):
        a, b = np.ravel(a), np.ravel(b)
        n = a.size
        return (n * (a * b).sum() - a.sum() * b.sum()) / math.sqrt(
            (n * (a * a).sum() - a.sum() ** 2) * (n * (b * b).sum() - b.sum() ** 2))

    pearson_err = 0.0
    for _ in range(20):
        a, b = rng.random((2, 3, 64, 64))
        pearson_err = max(pearson_err, abs(pixcorr(a, b) - oracle(a, b)))
        p, q = rng.random((2, 16, 16))
        pearson_err = max(pearson_err, abs(saliency_cc(p, q) - oracle(p, q)))
    ssim_err = 0.0
    for _ in range(5):
        a, b = rng.random((2, 3, 32, 32))
        ref = structural_similarity(a, b, channel_axis=0, gaussian_weights=True, sigma=1.5,
                                    use_sample_covariance=False, data_range=1.0)
        ssim_err = max(ssim_err, abs(ssim(a, b) - ref))
    kl = saliency_kl(np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]]))
    sim = saliency_sim(np.array([[0.5, 0.5]]), np.array([[0.25, 0.75]]))
    g = rng.normal(size=(10, 32))
    same = two_way_identification(g, g)
    swapped = two_way_identification(g[[1, 0]], g[:2])
    chance = two_way_identification(rng.normal(size=(200, 64)), rng.normal(size=(200, 64)))
    acceptance_detail(f"pearson err {pearson_err:.1e}, ssim err {ssim_err:.1e}, KL {kl:.4f}, SIM {sim:.4f}, "
                      f"2-way identical {same}, swapped {swapped}, random {chance:.3f}")
    assert pearson_err < 1e-10 and ssim_err < 1e-6
    assert abs(kl - 0.1438) < 1e-4 and abs(sim - 0.75) < 1e-4
    assert same == 1.0 and swapped == 0.0 and abs(chance - 0.5) <= 0.05


def test_criterion_07_overfit_smoke(overfit, acceptance_detail):
    r1 = running_ratio(overfit["s1"].meta["loss_trace"])
    r2 = running_ratio(overfit["s2"].meta["loss_trace"])
    acceptance_detail(f"stage 1 last50/first50 = {r1:.3f} (need <= 0.5); stage 2 = {r2:.3f} (need <= 0.7); "
                      f"{overfit['seconds']:.0f}s")
    assert overfit["seconds"] < 15 * 60
    assert r1 <= 0.5, f"stage-1 running loss ratio {r1:.3f}"
    assert r2 <= 0.7, f"stage-2 running loss ratio {r2:.3f}"


def test_criterion_08_saliency_steering(steering, acceptance_detail):
    root = steering["root"]
    ds = load_dataset(root / "ds")
    maps = ds.saliency_maps()
    n = len(ds)

    def cc_means(arm):
        sal = [spectral_residual(load_image(root / arm / "recon" / f"{sid}.png")) for sid in ds.ids]
        matched = [saliency_cc(sal[i], maps[i]) for i in range(n)]
        mismatched = [np.mean([saliency_cc(sal[i], maps[j]) for j in range(n) if j != i]) for i in range(n)]
        return float(np.mean(matched)), float(np.mean(mismatched))

    g_match, g_mis = cc_means("guided")
    e_match, e_mis = cc_means("eeg")
    acceptance_detail(f"guided CC matched {g_match:.3f} vs mismatched {g_mis:.3f} (margin {g_match - g_mis:.3f}); "
                      f"EEG-only matched {e_match:.3f}; {steering['seconds']:.0f}s including the base model")
    assert g_match - g_mis >= 0.1
    assert g_match > e_match
    assert steering["seconds"] < 30 * 60


def test_criterion_09_determinism_and_resume(base, tmp_path, acceptance_detail):
    spec = SyntheticSpec(n_records=8)
    save_dataset(generate_synthetic(spec, 4), tmp_path / "a")
    save_dataset(generate_synthetic(spec, 4), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    same_data = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)

    ds = generate_synthetic(spec, 0)
    cfg = StageConfig.desk(1, total_steps=100)

    def fresh():
        pipe = pipeline_from_checkpoint(base["ckpt"])
        pipe.inject_lora(0)
        return pipe

    pa, pc = fresh(), fresh()
    full = run_stage1(pa, ds, cfg)
    again = run_stage1(pc, ds, cfg)
    run_stage1(fresh(), ds, StageConfig.desk(1, total_steps=50), out_dir=tmp_path / "half")
    half = load_checkpoint(tmp_path / "half/stage1.ckpt", base=base["ckpt"])
    resumed = run_stage1(fresh(), ds, cfg, resume=half)
    s1_resume = resumed.meta["loss_trace"] == full.meta["loss_trace"] and resumed.hash == full.hash

    c2 = StageConfig.desk(2, total_steps=100)
    s2_full = run_stage2(pipeline_from_checkpoint(full), ds, full, c2)
    run_stage2(pipeline_from_checkpoint(full), ds, full, StageConfig.desk(2, total_steps=50), out_dir=tmp_path / "h2")
    s2_half = load_checkpoint(tmp_path / "h2/stage2.ckpt", base=full)
    s2_res = run_stage2(pipeline_from_checkpoint(full), ds, full, c2, resume=s2_half)
    s2_resume = s2_res.meta["loss_trace"] == s2_full.meta["loss_trace"] and s2_res.hash == s2_full.hash

    same_trace = full.meta["loss_trace"] == again.meta["loss_trace"]
    same_recon = np.array_equal(pa.generate(ds.eeg()[:4], seed=9, n_steps=10),
                                pc.generate(ds.eeg()[:4], seed=9, n_steps=10))
    acceptance_detail(f"datasets byte-identical {same_data}; traces identical {same_trace}; reconstructions "
                      f"identical {same_recon}; stage-1 50+50 == 100: {s1_resume}; stage-2 50+50 == 100: {s2_resume}")
    assert same_data and same_trace and same_recon and s1_resume and s2_resume


def test_criterion_10_perfect_reconstruction_fixed_point(acceptance_detail):
    ds = generate_synthetic(SyntheticSpec(n_records=8), 0)
    gts = list(ds.images())
    rep = evaluate_run(gts, gts, "fallback", default_extractors(), ids=ds.ids)
    acceptance_detail(f"pixcorr {rep.pixcorr}, ssim {rep.ssim}, 2-way {rep.two_way_accuracy}, swav {rep.swav_distance}, "
                      f"cc {rep.saliency_cc}, kl {rep.saliency_kl}, sim {rep.saliency_sim}")
    assert rep.pixcorr == pytest.approx(1.0, abs=1e-12) and rep.ssim == pytest.approx(1.0, abs=1e-12)
    assert all(v == 1.0 for v in rep.two_way_accuracy.values()) and len(rep.two_way_accuracy) == 5
    assert rep.swav_distance == pytest.approx(0.0, abs=1e-12)
    assert rep.saliency_cc == pytest.approx(1.0, abs=1e-12)
    assert rep.saliency_kl == pytest.approx(0.0, abs=1e-12)
    assert rep.saliency_sim == pytest.approx(1.0, abs=1e-12)
    assert not rep.failures and not rep.missing
