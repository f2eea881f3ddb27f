import math

import numpy as np
import pytest
import torch

from sodiff.diffusion import (
    Autoencoder,
    AutoencoderConfig,
    LoraConfig,
    UNet,
    UNetConfig,
    UnetCondition,
    build_schedule,
    inject_lora,
    lora_parameters,
    one_step_restore,
    set_lora_enabled,
)
from sodiff.nn_utils import param_checksum

SMALL_UNET = UNetConfig(channels=(16, 32, 32), context_dim=8, heads=2)


class StubEps:
    def __init__(self, eps):
        self.eps = eps

    def __call__(self, z, prompt, t):
        return self.eps


# ---------------------------------------------------------------- schedule


def test_schedule_single_step():
    s = build_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.alpha_bar.numpy(), [0.9])


def test_schedule_default():
    s = build_schedule()
    ab = s.alpha_bar
    assert s.T_max == 1000
    assert (ab[1:] < ab[:-1]).all()
    assert ab[0] == pytest.approx(1 - 0.00085)
    # independent product in plain python
    prod = 1.0
    for k in range(1000):
        prod *= 1 - (0.00085 + (0.012 - 0.00085) * k / 999)
    assert float(ab[-1]) == pytest.approx(prod, rel=1e-10)
    assert float(ab[-1]) < 0.01  # recorded: 1.579e-3


@pytest.mark.parametrize("args", [(10, 0.1, 1.0), (10, 0.2, 0.1), (0, 0.1, 0.2), (10, 0.0, 0.1)])
def test_schedule_rejects(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_alpha_bar_interpolation():
    s = build_schedule(10, 0.01, 0.1)
    mid = s.alpha_bar_at(torch.tensor([2.25], dtype=torch.float64))
    expect = 0.75 * s.alpha_bar[2] + 0.25 * s.alpha_bar[3]
    assert float(mid) == pytest.approx(float(expect), rel=1e-12)
    ints = s.alpha_bar_at(torch.arange(10, dtype=torch.float64))
    torch.testing.assert_close(ints, s.alpha_bar)


# ---------------------------------------------------------------- one-step restore


def test_inversion_oracle_100_triples():
    sched = build_schedule()
    g = torch.Generator().manual_seed(0)
    worst = 0.0
    for _ in range(100):
        z_h = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
        eps = torch.randn(2, 4, 8, 8, generator=g, dtype=torch.float64)
        tau = torch.rand(2, generator=g, dtype=torch.float64) * 999
        ab = sched.alpha_bar_at(tau).view(-1, 1, 1, 1)
        z_l = ab.sqrt() * z_h + (1 - ab).sqrt() * eps
        out = one_step_restore(z_l, UnetCondition(None, tau), sched, StubEps(eps))
        worst = max(worst, float((out - z_h).abs().max()))
    assert worst <= 1e-5


def test_noise_free_limit():
    sched = build_schedule(1, 1e-12, 1e-12)
    z = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    out = one_step_restore(z, UnetCondition(None, torch.zeros(1)), sched, StubEps(torch.randn_like(z) * 5))
    torch.testing.assert_close(out, z, atol=1e-5, rtol=0)


def test_quarter_alpha_doubles():
    sched = build_schedule(1, 0.75, 0.75)  # alpha_bar = 0.25
    z = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    out = one_step_restore(z, UnetCondition(None, torch.zeros(1)), sched, StubEps(torch.zeros_like(z)))
    torch.testing.assert_close(out, 2 * z)


def test_restore_affine_in_z():
    sched = build_schedule()
    eps = torch.randn(1, 4, 4, 4, dtype=torch.float64)
    a = torch.randn_like(eps)
    b = torch.randn_like(eps)
    cond = UnetCondition(None, torch.tensor([321.5]))
    f = lambda z: one_step_restore(z, cond, sched, StubEps(eps))  # noqa: E731
    torch.testing.assert_close(f(0.3 * a + 0.7 * b), 0.3 * f(a) + 0.7 * f(b))


def test_restore_rejects_out_of_range():
    sched = build_schedule()
    z = torch.zeros(1, 4, 4, 4)
    with pytest.raises(ValueError):
        one_step_restore(z, UnetCondition(None, torch.tensor([1000.0])), sched, StubEps(z))


def test_tau_finite_difference():
    sched = build_schedule()
    torch.manual_seed(0)
    unet = UNet(SMALL_UNET).double()
    z = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    prompt = torch.randn(1, 5, 8, dtype=torch.float64)

    def loss(tau):
        return one_step_restore(z, UnetCondition(prompt, tau), sched, unet).pow(2).mean()

    tau = torch.tensor([412.3], dtype=torch.float64, requires_grad=True)
    (grad,) = torch.autograd.grad(loss(tau), tau)
    h = 1e-4
    with torch.no_grad():
        fd = (loss(tau + h) - loss(tau - h)) / (2 * h)
    assert float(grad) != 0.0
    assert abs(float(grad) - float(fd)) <= 1e-3 * abs(float(fd))


# ---------------------------------------------------------------- UNet + adapters


def test_unet_shapes_and_prompt_check():
    unet = UNet(SMALL_UNET)
    z = torch.randn(2, 4, 16, 16)
    out = unet(z, torch.randn(2, 7, 8), torch.tensor([10.0, 500.0]))
    assert out.shape == z.shape
    with pytest.raises(ValueError):
        unet(z, torch.randn(2, 7, 9), torch.tensor([10.0, 500.0]))


def test_unet_timestep_changes_output():
    torch.manual_seed(1)
    unet = UNet(SMALL_UNET)
    z = torch.randn(1, 4, 8, 8)
    p = torch.randn(1, 3, 8)
    a = unet(z, p, torch.tensor([10.0]))
    b = unet(z, p, torch.tensor([900.0]))
    assert (a - b).abs().max() > 1e-4


def test_zero_adapters_match_base():
    torch.manual_seed(2)
    # base frozen first: torch picks a different matmul path when weights require grad
    unet = UNet(SMALL_UNET).requires_grad_(False)
    z, p, t = torch.randn(2, 4, 8, 8), torch.randn(2, 3, 8), torch.tensor([5.0, 700.0])
    base = unet(z, p, t)
    wrapped = inject_lora(unet, LoraConfig(rank=4))
    assert any("attn2.to_k" in w for w in wrapped)
    assert torch.equal(unet(z, p, t), base)


def test_adapters_train_base_frozen():
    torch.manual_seed(3)
    unet = UNet(SMALL_UNET)
    inject_lora(unet, LoraConfig(rank=4))
    for p in unet.parameters():
        p.requires_grad_(False)
    params = lora_parameters(unet)
    for p in params:
        p.requires_grad_(True)
    base_sum = param_checksum({k: v for k, v in unet.state_dict().items() if ".down." not in k and ".up." not in k})
    opt = torch.optim.AdamW(params, lr=1e-2)
    z, prompt = torch.randn(2, 4, 8, 8), torch.randn(2, 3, 8)
    out = unet(z, prompt, torch.tensor([5.0, 50.0]))
    out.pow(2).mean().backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in params)
    opt.step()
    after = param_checksum({k: v for k, v in unet.state_dict().items() if ".down." not in k and ".up." not in k})
    assert after == base_sum
    set_lora_enabled(unet, False)
    set_lora_enabled(unet, True)
    assert not torch.equal(unet(z, prompt, torch.tensor([5.0, 50.0])), out)


# ---------------------------------------------------------------- autoencoder


def test_autoencoder_shapes():
    ae = Autoencoder(AutoencoderConfig(width=16, blocks=1))
    x = torch.rand(2, 3, 64, 64)
    z = ae.encode(x)
    assert z.shape == (2, 4, 16, 16)
    assert ae.decode(z).shape == x.shape
    with pytest.raises(ValueError):
        ae.encode(torch.rand(1, 3, 30, 32))
    with pytest.raises(ValueError):
        ae.decode(torch.rand(1, 3, 16, 16))
