import re

import numpy as np
import pytest
import torch

from eegsal.diffusion import AutoencoderConfig, UNetConfig
from eegsal.eeg_encoder import EncoderConfig
from eegsal.pipeline import ModelConfig

torch.set_num_threads(1)


def tiny_model_config() -> ModelConfig:
    """16x16 images, 4x4 latents, 8-channel EEG: fast enough for unit tests."""
    return ModelConfig(
        image_size=16,
        encoder=EncoderConfig(channels=8, samples=32, tokens=2, dim=16, conv_widths=(8, 8), kernel_sizes=(5, 3)),
        unet=UNetConfig(base_channels=8, context_dim=16, context_tokens=2, time_dim=16, groups=4),
        autoencoder=AutoencoderConfig(hidden=8),
        sample_steps=5,
    )


@pytest.fixture
def tiny_config():
    return tiny_model_config()


def fd_check(loss_fn, tensors, h=1e-3, n_coords=12, seed=0):
    """Relative error ||fd - analytic|| / ||analytic|| over sampled coordinates.

    Central differences in float64; ``loss_fn()`` must rebuild the graph
    from the current tensor values.
    """
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    loss_fn().backward()
    rng = np.random.default_rng(seed)
    an, fd = [], []
    with torch.no_grad():
        for t in tensors:
            flat = t.view(-1)
            idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
            for i in idx:
                an.append(float(t.grad.view(-1)[i]))
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                fd.append((up - down) / (2 * h))
    an, fd = np.array(an), np.array(fd)
    return float(np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-30))


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the run
# ---------------------------------------------------------------------------

_CRITERIA = {}
_DETAILS = {}


@pytest.fixture
def acceptance_detail(request):
    m = re.search(r"test_criterion_(\d+)", request.node.name)
    key = int(m.group(1)) if m else None

    def record(text):
        _DETAILS.setdefault(key, []).append(text)
        print(text)

    return record


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    if report.when == "call" or report.outcome != "passed":
        prev = _CRITERIA.get(key, (m.group(2), "PASS"))[1]
        status = "PASS" if report.outcome == "passed" and prev == "PASS" else "FAIL"
        _CRITERIA[key] = (m.group(2), status)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for key in sorted(_CRITERIA):
        name, status = _CRITERIA[key]
        tr.write_line(f"criterion {key:2d} {name.replace('_', ' ')}: {status}")
        for d in _DETAILS.get(key, []):
            tr.write_line(f"    {d}")
