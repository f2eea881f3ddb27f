"""Stage-2 objective: MSE + edge-aware DISTS reconstruction, latent GAN pair, weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import NoiseSchedule, ResBlock, UNet, add_noise, timestep_embedding

__all__ = [
    "LossWeights",
    "sobel",
    "DistsLite",
    "dists",
    "recon_loss",
    "Discriminator",
    "gan_losses",
    "total_loss",
]

EPS = 1e-6


@dataclass
class LossWeights:
    alpha: float = 1e-2  # adversarial
    beta: float = 1e-3  # QF regression
    use_ea: bool = True
    use_gan: bool = True

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")


# ---------------------------------------------------------------- sobel

_KX = torch.tensor([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_KY = _KX.T.contiguous()


def _safe_sqrt(x):
    # d sqrt / dx is infinite at 0; route zeros around it so gradients stay finite
    pos = x > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, x, torch.ones_like(x))), torch.zeros_like(x))


def sobel(image: torch.Tensor) -> torch.Tensor:
    """Per-channel gradient magnitude √(Gx² + Gy²), replicate padding; same shape as input."""
    if image.dim() != 4:
        raise ValueError(f"expected N×C×H×W, got {tuple(image.shape)}")
    n, c, h, w = image.shape
    if h < 3 or w < 3:
        raise ValueError(f"sobel needs at least 3×3 pixels, got {h}×{w}")
    kernel = torch.stack([_KX, _KY]).unsqueeze(1).to(image.dtype)  # (2,1,3,3)
    x = F.pad(image.reshape(n * c, 1, h, w), (1, 1, 1, 1), mode="replicate")
    g = F.conv2d(x, kernel)
    mag = _safe_sqrt(g[:, 0] ** 2 + g[:, 1] ** 2)
    return mag.view(n, c, h, w)


# ---------------------------------------------------------------- DISTS-lite


class DistsLite(nn.Module):
    """DISTS statistics over a fixed random conv pyramid.

    Stage 0 is the input itself; stages 1..3 are stride-2 3×3 conv + ReLU
    with 16/32/64 channels drawn from ``seed`` and never trained. Texture
    and structure terms are averaged uniformly over every (stage, channel).
    """

    def __init__(self, channels=(16, 32, 64), seed: int = 0, in_channels: int = 3):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        self.convs = nn.ModuleList()
        prev = in_channels
        for c in channels:
            conv = nn.Conv2d(prev, c, 3, stride=2, padding=1)
            bound = math.sqrt(6.0 / (prev * 9))
            with torch.no_grad():
                conv.weight.copy_((torch.rand(conv.weight.shape, generator=g) * 2 - 1) * bound)
                conv.bias.copy_(torch.rand(c, generator=g) * 0.1)
            conv.requires_grad_(False)
            self.convs.append(conv)
            prev = c
        self.c1 = 1e-6
        self.c2 = 1e-6

    def features(self, x):
        feats = [x]
        h = x
        for conv in self.convs:
            h = F.relu(conv(h))
            feats.append(h)
        return feats

    def forward(self, x, y) -> torch.Tensor:
        """Per-image distance, shape (N,)."""
        if x.shape != y.shape:
            raise ValueError(f"shape mismatch {tuple(x.shape)} vs {tuple(y.shape)}")
        texture, structure, count = 0.0, 0.0, 0
        for fx, fy in zip(self.features(x), self.features(y)):
            mx, my = fx.mean(dim=(2, 3)), fy.mean(dim=(2, 3))
            vx = ((fx - mx[..., None, None]) ** 2).mean(dim=(2, 3))
            vy = ((fy - my[..., None, None]) ** 2).mean(dim=(2, 3))
            cov = ((fx - mx[..., None, None]) * (fy - my[..., None, None])).mean(dim=(2, 3))
            texture = texture + ((2 * mx * my + self.c1) / (mx**2 + my**2 + self.c1)).sum(1)
            structure = structure + ((2 * cov + self.c2) / (vx + vy + self.c2)).sum(1)
            count += fx.shape[1]
        return 1.0 - (texture + structure) / (2 * count)


_DEFAULT_DISTS: dict[torch.dtype, DistsLite] = {}


def dists(x: torch.Tensor, y: torch.Tensor, model: DistsLite | None = None, reduction: str = "mean") -> torch.Tensor:
    if model is None:
        if x.dtype not in _DEFAULT_DISTS:
            _DEFAULT_DISTS[x.dtype] = DistsLite().to(x.dtype)
        model = _DEFAULT_DISTS[x.dtype]
    d = model(x, y)
    return d.mean() if reduction == "mean" else d


def recon_loss(pred, target, use_ea: bool = True, model: DistsLite | None = None) -> dict[str, torch.Tensor]:
    """MSE + DISTS(S(pred), S(target)) + DISTS(pred, target).

    With ``use_ea=False`` the two DISTS terms are still reported but not summed.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    mse = F.mse_loss(pred, target)
    ea_edge = dists(sobel(pred), sobel(target), model)
    ea_img = dists(pred, target, model)
    total = mse + (ea_edge + ea_img if use_ea else 0.0)
    return {"total": total, "mse": mse, "ea_edge": ea_edge, "ea_img": ea_img}


# ---------------------------------------------------------------- adversarial


class Discriminator(nn.Module):
    """Encoder half of the toy UNet + pooled sigmoid head, conditioned on t and the prompt."""

    def __init__(self, latent_channels=4, channels=(64, 128, 256), prompt_dim=64):
        super().__init__()
        self.channels = tuple(channels)
        temb_dim = 4 * channels[0]
        self.time_mlp = nn.Sequential(nn.Linear(channels[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(latent_channels, channels[0], 3, padding=1)
        self.down_res = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = channels[0]
        for i, c in enumerate(channels):
            self.down_res.append(ResBlock(prev, c, temb_dim))
            last = i == len(channels) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c
        self.prompt_proj = nn.Linear(prompt_dim, prev)
        self.head = nn.Linear(2 * prev, 1)

    @classmethod
    def from_unet(cls, unet: UNet) -> Discriminator:
        """Initialise the shared layers from a (pretrained) UNet."""
        cfg = unet.cfg
        disc = cls(cfg.latent_channels, cfg.channels, cfg.context_dim)
        src = {k.replace(".base.", "."): v for k, v in unet.state_dict().items() if ".down." not in k and ".up." not in k}
        own = disc.state_dict()
        shared = {k: src[k].clone() for k in own if k in src and src[k].shape == own[k].shape}
        disc.load_state_dict(shared, strict=False)
        return disc

    def forward(self, z_noisy, t, prompt=None) -> torch.Tensor:
        """Probability that ``z_noisy`` is a real latent, shape (B,)."""
        temb = self.time_mlp(timestep_embedding(t, self.channels[0]))
        h = self.conv_in(z_noisy)
        for res, down in zip(self.down_res, self.downsample):
            h = down(res(h, temb))
        pooled = h.mean(dim=(2, 3))
        if prompt is None:
            p = torch.zeros_like(pooled)
        else:
            p = self.prompt_proj(prompt.mean(dim=1))
        return torch.sigmoid(self.head(torch.cat([pooled, p], dim=1)).squeeze(-1))


def _noised(z, sched, generator):
    t = torch.randint(0, sched.T_max, (z.shape[0],), generator=generator)
    noise = torch.randn(z.shape, generator=generator, dtype=z.dtype)
    return add_noise(z, noise, t, sched), t.to(z.dtype)


def gan_losses(z_fake, z_real, disc, sched: NoiseSchedule, rng=None, prompt=None) -> dict[str, torch.Tensor]:
    """Non-saturating pair on noised latents, one random t per batch element.

    ``G = −mean log D(F(ẑ, t))``; ``D = −mean log(1 − D(F(sg(ẑ), t))) − mean log D(F(z, t'))``.
    Discriminator outputs are clamped to [1e-6, 1 − 1e-6].
    """
    g = rng if isinstance(rng, torch.Generator) or rng is None else torch.Generator().manual_seed(int(rng))
    x_fake, t_fake = _noised(z_fake, sched, g)
    x_real, t_real = _noised(z_real.detach(), sched, g)
    p_prompt = None if prompt is None else prompt.detach()

    d_fake_g = disc(x_fake, t_fake, p_prompt).clamp(EPS, 1 - EPS)
    d_fake_d = disc(x_fake.detach(), t_fake, p_prompt).clamp(EPS, 1 - EPS)
    d_real = disc(x_real, t_real, p_prompt).clamp(EPS, 1 - EPS)
    l_g = -torch.log(d_fake_g).mean()
    l_d = -torch.log(1 - d_fake_d).mean() - torch.log(d_real).mean()
    return {"G": l_g, "D": l_d}


def total_loss(l_recon, l_g, l_qf, weights: LossWeights) -> dict[str, torch.Tensor]:
    """``recon + α·G + β·qf``; the weighted components are returned alongside."""
    l_recon, l_g, l_qf = (torch.as_tensor(v, dtype=torch.float64) if not torch.is_tensor(v) else v for v in (l_recon, l_g, l_qf))
    alpha = weights.alpha if weights.use_gan else 0.0
    total = l_recon + alpha * l_g + weights.beta * l_qf
    return {"total": total, "recon": l_recon, "G": l_g, "qf": l_qf, "alpha": alpha, "beta": weights.beta}
