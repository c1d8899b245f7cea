import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from eegsal.diffusion import CrossAttention, UNet, UNetConfig
from eegsal.errors import ConfigurationError, ContractError
from eegsal.lora import LoRAAdapter, LoRAConfig, adapted_forward, find_adapters, inject, merge, merge_into, trainable_count


class Site(nn.Module):
    def __init__(self, channels, context_dim):
        super().__init__()
        self.attn = CrossAttention(channels, context_dim)


def test_fresh_adapters_leave_unet_bitwise_unchanged():
    torch.manual_seed(0)
    net = UNet(UNetConfig())
    x, c, t = torch.randn(2, 4, 16, 16), torch.randn(2, 4, 128), torch.tensor([4, 900])
    before = net(x, t, c)
    handle = inject(net, LoRAConfig(), seed=3)
    assert torch.equal(before, net(x, t, c))
    assert all(float(a.lora_B.detach().abs().max()) == 0 for a in handle.adapters.values())


def test_adapter_sites_cover_every_cross_attention():
    net = UNet(UNetConfig())
    n_sites = sum(isinstance(m, CrossAttention) for m in net.modules())
    handle = inject(net)
    assert len(handle.adapters) == 4 * n_sites


def test_base_weights_are_frozen_and_adapters_trainable():
    net = UNet(UNetConfig())
    handle = inject(net)
    trainable = {id(p) for p in handle.trainable_parameters()}
    for p in net.parameters():
        assert p.requires_grad == (id(p) in trainable)


def test_a_is_gaussian_with_std_002():
    net = UNet(UNetConfig(base_channels=64, context_dim=256))
    handle = inject(net, LoRAConfig(rank=16), seed=0)
    a = torch.cat([m.lora_A.detach().ravel() for m in handle.adapters.values()])
    assert abs(float(a.std()) - 0.02) < 1e-3
    assert abs(float(a.mean())) < 1e-3


def test_same_seed_same_adapters():
    a = inject(UNet(UNetConfig()), seed=4)
    b = inject(UNet(UNetConfig()), seed=4)
    for k in a.adapters:
        assert torch.equal(a.adapters[k].lora_A, b.adapters[k].lora_A)


def test_trainable_count_formula():
    assert trainable_count(inject(Site(128, 128), LoRAConfig(rank=4, alpha=1.0, targets=("to_q",)))) == 1024
    assert trainable_count(inject(Site(128, 128), LoRAConfig(rank=4, targets=("to_q", "to_out")))) == 2048
    # to_k maps context (32) -> channels (64)
    assert trainable_count(inject(Site(64, 32), LoRAConfig(rank=1, targets=("to_k",)))) == 96
    counts = {trainable_count(inject(Site(128, 128), LoRAConfig(rank=4, alpha=a, targets=("to_q",))))
              for a in (0.5, 1.0, 32.0)}
    assert counts == {1024}


def test_no_stacking():
    net = UNet(UNetConfig())
    inject(net)
    with pytest.raises(ConfigurationError, match="stacking"):
        inject(net)


def test_selector_matching_nothing():
    with pytest.raises(ConfigurationError):
        inject(UNet(UNetConfig()), LoRAConfig(sites="no.such.layer"))
    with pytest.raises(ConfigurationError):
        inject(UNet(UNetConfig()), LoRAConfig(targets=("to_x",)))
    with pytest.raises(ConfigurationError):
        inject(UNet(UNetConfig()), LoRAConfig(rank=0))


def test_zero_b_gives_plain_forward():
    W = torch.randn(5, 3, dtype=torch.float64)
    ad = LoRAAdapter(torch.randn(2, 3, dtype=torch.float64), torch.zeros(5, 2, dtype=torch.float64), 2.0)
    x = torch.randn(4, 3, dtype=torch.float64)
    assert torch.equal(adapted_forward(x, W, ad), x @ W.T)
    assert torch.equal(merge(W, ad), W)


def test_one_dimensional_hand_case():
    ad = LoRAAdapter(torch.tensor([[2.0]]), torch.tensor([[3.0]]), 1.0)
    y = adapted_forward(torch.tensor([[1.0]]), torch.zeros(1, 1), ad)
    assert y.tolist() == [[6.0]]


def _random_adapter(rng, d_in, d_out, r, alpha):
    W = torch.as_tensor(rng.normal(size=(d_out, d_in)))
    A = torch.as_tensor(rng.normal(size=(r, d_in)))
    B = torch.as_tensor(rng.normal(size=(d_out, r)))
    return W, LoRAAdapter(A, B, alpha)


def test_dynamic_equals_dense_oracle_16x16():
    rng = np.random.default_rng(0)
    W, ad = _random_adapter(rng, 16, 16, 4, 8.0)
    dense = W.numpy() + (8.0 / 4) * ad.B.numpy() @ ad.A.numpy()  # brute-force oracle
    for _ in range(10):
        x = rng.normal(size=(3, 16))
        np.testing.assert_allclose(adapted_forward(torch.as_tensor(x), W, ad).numpy(), x @ dense.T, atol=1e-6)


def test_merge_equivalence_r2_d8():
    rng = np.random.default_rng(1)
    W, ad = _random_adapter(rng, 8, 8, 2, 2.0)
    merged = merge(W, ad)
    x = torch.as_tensor(rng.normal(size=(100, 8)))
    assert float((adapted_forward(x, W, ad) - x @ merged.T).abs().max()) < 1e-6


@settings(max_examples=30, deadline=None)
@given(d_in=st.integers(1, 256), d_out=st.integers(1, 256), r=st.integers(1, 16), alpha=st.floats(0.1, 64),
       seed=st.integers(0, 2**31))
def test_merge_equivalence_property(d_in, d_out, r, alpha, seed):
    rng = np.random.default_rng(seed)
    W, ad = _random_adapter(rng, d_in, d_out, r, alpha)
    x = torch.as_tensor(rng.normal(size=(8, d_in)))
    dyn, mer = adapted_forward(x, W, ad), x @ merge(W, ad).T
    assert float((dyn - mer).abs().max()) <= 1e-6 * max(1.0, float(dyn.abs().max()))


def test_merge_then_fresh_adapter_reproduces_merged_model():
    torch.manual_seed(0)
    net = UNet(UNetConfig()).double()
    handle = inject(net, seed=0)
    with torch.no_grad():
        for a in handle.adapters.values():
            a.lora_B.normal_(0, 0.1)
    x, c, t = torch.randn(1, 4, 16, 16, dtype=torch.float64), torch.randn(1, 4, 128, dtype=torch.float64), 50
    dynamic = net(x, t, c)
    merge_into(net)
    assert not find_adapters(net)
    merged = net(x, t, c)
    assert float((dynamic - merged).detach().abs().max()) < 1e-10
    inject(net, seed=1)
    assert torch.equal(net(x, t, c), merged)


def test_shape_mismatch_errors():
    W = torch.zeros(4, 3)
    with pytest.raises(ContractError):
        adapted_forward(torch.zeros(2, 5), W, LoRAAdapter(torch.zeros(1, 3), torch.zeros(4, 1), 1.0))
    with pytest.raises(ContractError):
        merge(W, LoRAAdapter(torch.zeros(1, 2), torch.zeros(4, 1), 1.0))
