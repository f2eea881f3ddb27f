"""Toy latent-diffusion stack: schedule, autoencoder, conditional UNet, LoRA, one-step restore."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .nn_utils import trunc_normal_init_

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "AutoencoderConfig",
    "Autoencoder",
    "UNetConfig",
    "UNet",
    "LoraConfig",
    "LoRALinear",
    "inject_lora",
    "lora_parameters",
    "lora_state_dict",
    "load_lora_state_dict",
    "UnetCondition",
    "timestep_embedding",
    "one_step_restore",
    "add_noise",
]


# ---------------------------------------------------------------- schedule


@dataclass
class NoiseSchedule:
    betas: torch.Tensor
    alpha_bar: torch.Tensor

    @property
    def T_max(self) -> int:
        return int(self.alpha_bar.shape[0])

    def alpha_bar_at(self, tau: torch.Tensor) -> torch.Tensor:
        """ᾱ at real-valued timesteps, linear between integer neighbours.

        Differentiable w.r.t. ``tau`` (slope ᾱ[⌈τ⌉] − ᾱ[⌊τ⌋]).
        """
        tau = torch.as_tensor(tau)
        ab = self.alpha_bar.to(dtype=tau.dtype if tau.is_floating_point() else torch.float64)
        tau = tau.to(ab.dtype).clamp(0, self.T_max - 1)
        lo = torch.floor(tau.detach()).long()
        hi = (lo + 1).clamp(max=self.T_max - 1)
        w = tau - lo.to(tau.dtype)
        return ab[lo] * (1 - w) + ab[hi] * w


def build_schedule(T_max: int = 1000, beta_start: float = 0.00085, beta_end: float = 0.012) -> NoiseSchedule:
    """Linear-β schedule; ``alpha_bar[t] = Π_{s≤t} (1 − β_s)``."""
    if int(T_max) != T_max or T_max < 1:
        raise ValueError(f"T_max must be a positive integer, got {T_max}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = torch.linspace(beta_start, beta_end, int(T_max), dtype=torch.float64)
    return NoiseSchedule(betas=betas, alpha_bar=torch.cumprod(1.0 - betas, dim=0))


def add_noise(z: torch.Tensor, noise: torch.Tensor, t: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    ab = sched.alpha_bar_at(t.to(torch.float64)).to(z.dtype).view(-1, *[1] * (z.dim() - 1))
    return ab.sqrt() * z + (1 - ab).sqrt() * noise


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of real-valued timesteps, shape (B, dim)."""
    half = dim // 2
    dtype = t.dtype if t.is_floating_point() else torch.float32
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=dtype) / half)
    args = t.to(dtype).view(-1, 1) * freqs.view(1, -1)
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


# ---------------------------------------------------------------- blocks


def _groups(ch: int) -> int:
    # at least 4 channels per group so per-channel shifts survive normalisation
    for g in (32, 16, 8, 4, 2):
        if ch % g == 0 and ch // g >= 4:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(temb_dim, 2 * cout) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb=None):
        h = self.norm2(self.conv1(F.silu(self.norm1(x))))
        if self.temb is not None:
            scale, shift = self.temb(F.silu(temb))[:, :, None, None].chunk(2, dim=1)
            h = h * (1 + scale) + shift
        h = self.conv2(F.silu(h))
        return self.skip(x) + h


class Attention(nn.Module):
    """Multi-head attention with named projections so adapters can target them."""

    def __init__(self, dim: int, context_dim: int | None = None, heads: int = 4):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        b, n, d = x.shape
        h = self.heads
        q = self.to_q(x).view(b, n, h, d // h).transpose(1, 2)
        k = self.to_k(context).view(b, -1, h, d // h).transpose(1, 2)
        v = self.to_v(context).view(b, -1, h, d // h).transpose(1, 2)
        attn = (q @ k.transpose(-1, -2)) * (d // h) ** -0.5
        out = attn.softmax(dim=-1) @ v
        return self.to_out(out.transpose(1, 2).reshape(b, n, d))


class SpatialTransformer(nn.Module):
    """Self-attention, prompt cross-attention and MLP over the flattened feature map."""

    def __init__(self, ch: int, context_dim: int, heads: int = 4):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.proj_in = nn.Linear(ch, ch)
        self.norm1 = nn.LayerNorm(ch)
        self.attn1 = Attention(ch, heads=heads)
        self.norm2 = nn.LayerNorm(ch)
        self.attn2 = Attention(ch, context_dim, heads=heads)
        self.norm3 = nn.LayerNorm(ch)
        self.ff = nn.Sequential(nn.Linear(ch, 4 * ch), nn.GELU(), nn.Linear(4 * ch, ch))
        self.proj_out = nn.Linear(ch, ch)

    def forward(self, x, context):
        b, c, hh, ww = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        h = self.proj_in(h)
        h = h + self.attn1(self.norm1(h))
        h = h + self.attn2(self.norm2(h), context)
        h = h + self.ff(self.norm3(h))
        h = self.proj_out(h).transpose(1, 2).reshape(b, c, hh, ww)
        return x + h


# ---------------------------------------------------------------- LoRA


@dataclass
class LoraConfig:
    rank: int = 16
    alpha: float = 16.0
    target: tuple[str, ...] = ("to_q", "to_k", "to_v", "to_out", "proj_in", "proj_out", "conv1", "conv2", "conv_in", "conv_out")

    def __post_init__(self):
        self.target = tuple(self.target)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


class LoRALinear(nn.Module):
    """``base(x) + scale · up(down(x))``; ``up`` starts at zero so the delta is zero."""

    def __init__(self, base: nn.Linear, rank: int, scale: float):
        super().__init__()
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.base = base
        self.scale = scale
        self.enabled = True
        self.down = nn.Linear(base.in_features, rank, bias=False)
        self.up = nn.Linear(rank, base.out_features, bias=False)
        nn.init.kaiming_uniform_(self.down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.up.weight)
        for p in self.base.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        out = self.base(x)
        if self.enabled:
            out = out + self.scale * self.up(self.down(x))
        return out


class LoRAConv2d(LoRALinear):
    """Conv variant: ``down`` copies the base kernel geometry, ``up`` is 1×1."""

    def __init__(self, base: nn.Conv2d, rank: int, scale: float):
        nn.Module.__init__(self)
        if rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        self.base = base
        self.scale = scale
        self.enabled = True
        self.down = nn.Conv2d(base.in_channels, rank, base.kernel_size, base.stride, base.padding, bias=False)
        self.up = nn.Conv2d(rank, base.out_channels, 1, bias=False)
        nn.init.kaiming_uniform_(self.down.weight, a=math.sqrt(5))
        nn.init.zeros_(self.up.weight)
        for p in self.base.parameters():
            p.requires_grad_(False)


def inject_lora(model: nn.Module, cfg: LoraConfig) -> list[str]:
    """Wrap every ``nn.Linear``/``nn.Conv2d`` whose attribute name is in ``cfg.target``; returns wrapped paths."""
    wrapped = []
    for name, module in list(model.named_modules()):
        if isinstance(module, LoRALinear):
            continue
        for child_name, child in list(module.named_children()):
            if child_name not in cfg.target:
                continue
            if isinstance(child, nn.Linear):
                setattr(module, child_name, LoRALinear(child, cfg.rank, cfg.scale))
            elif isinstance(child, nn.Conv2d):
                setattr(module, child_name, LoRAConv2d(child, cfg.rank, cfg.scale))
            else:
                continue
            wrapped.append(f"{name}.{child_name}" if name else child_name)
    return wrapped


def lora_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for m in model.modules() if isinstance(m, LoRALinear) for p in (m.down.weight, m.up.weight)]


def lora_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.clone() for k, v in model.state_dict().items() if ".down." in k or ".up." in k}


def load_lora_state_dict(model: nn.Module, state: dict[str, torch.Tensor]) -> None:
    missing = set(lora_state_dict(model)) - set(state)
    if missing:
        raise KeyError(f"adapter checkpoint lacks {len(missing)} tensors, e.g. {sorted(missing)[:3]}")
    model.load_state_dict(state, strict=False)


def set_lora_enabled(model: nn.Module, enabled: bool) -> None:
    for m in model.modules():
        if isinstance(m, LoRALinear):
            m.enabled = enabled


def base_state_dict(model: nn.Module) -> dict[str, torch.Tensor]:
    """Parameters of the model with adapters stripped out (key names as if never wrapped)."""
    out = {}
    for k, v in model.state_dict().items():
        if ".down." in k or ".up." in k:
            continue
        out[k.replace(".base.", ".")] = v
    return out


# ---------------------------------------------------------------- UNet


@dataclass
class UNetConfig:
    latent_channels: int = 4
    channels: tuple[int, ...] = (64, 128, 256)
    context_dim: int = 64
    heads: int = 4

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)


@dataclass
class UnetCondition:
    prompt: torch.Tensor  # (B, L, D) image or text prompt embedding
    timestep: torch.Tensor  # (B,) real-valued


class UNet(nn.Module):
    """Noise predictor ε(z; prompt, t): one ResBlock + one SpatialTransformer per level."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        temb_dim = 4 * ch[0]
        self.time_mlp = nn.Sequential(nn.Linear(ch[0], temb_dim), nn.SiLU(), nn.Linear(temb_dim, temb_dim))
        self.conv_in = nn.Conv2d(cfg.latent_channels, ch[0], 3, padding=1)

        self.down_res = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsample = nn.ModuleList()
        prev = ch[0]
        for i, c in enumerate(ch):
            self.down_res.append(ResBlock(prev, c, temb_dim))
            self.down_attn.append(SpatialTransformer(c, cfg.context_dim, cfg.heads))
            last = i == len(ch) - 1
            self.downsample.append(nn.Identity() if last else nn.Conv2d(c, c, 3, stride=2, padding=1))
            prev = c

        self.mid_res = ResBlock(prev, prev, temb_dim)
        self.mid_attn = SpatialTransformer(prev, cfg.context_dim, cfg.heads)

        self.up_res = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i, c in reversed(list(enumerate(ch))):
            self.up_res.append(ResBlock(prev + c, c, temb_dim))
            self.up_attn.append(SpatialTransformer(c, cfg.context_dim, cfg.heads))
            self.upsample.append(nn.Identity() if i == 0 else nn.Conv2d(c, c, 3, padding=1))
            prev = c

        self.norm_out = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.conv_out = nn.Conv2d(ch[0], cfg.latent_channels, 3, padding=1)

    def time_embed(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(timestep_embedding(t, self.cfg.channels[0]))

    def encode_features(self, z, context, temb):
        """Down path; returns the bottleneck-input tensor and the skip list."""
        h = self.conv_in(z)
        skips = []
        for res, attn, down in zip(self.down_res, self.down_attn, self.downsample):
            h = attn(res(h, temb), context)
            skips.append(h)
            h = down(h)
        return h, skips

    def forward(self, z: torch.Tensor, prompt: torch.Tensor, timestep: torch.Tensor) -> torch.Tensor:
        if prompt.shape[-1] != self.cfg.context_dim:
            raise ValueError(f"prompt width {prompt.shape[-1]} != UNet context_dim {self.cfg.context_dim}")
        timestep = torch.as_tensor(timestep, dtype=z.dtype).expand(z.shape[0])
        temb = self.time_embed(timestep)
        h, skips = self.encode_features(z, prompt, temb)
        h = self.mid_attn(self.mid_res(h, temb), prompt)
        for res, attn, up in zip(self.up_res, self.up_attn, self.upsample):
            h = attn(res(torch.cat([h, skips.pop()], dim=1), temb), prompt)
            if not isinstance(up, nn.Identity):
                h = up(F.interpolate(h, scale_factor=2.0, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))


def one_step_restore(z_L: torch.Tensor, cond: UnetCondition, sched: NoiseSchedule, eps_model) -> torch.Tensor:
    """ẑ_H = (z_L − √(1−ᾱ_τ)·ε(z_L; prompt, τ)) / √ᾱ_τ, with a single network call."""
    tau = torch.as_tensor(cond.timestep)
    if tau.dim() == 0:
        tau = tau.expand(z_L.shape[0])
    if not tau.is_floating_point():
        tau = tau.double()
    if (tau.detach() < 0).any() or (tau.detach() > sched.T_max - 1).any():
        raise ValueError(f"timestep outside [0, {sched.T_max - 1}]")
    ab = sched.alpha_bar_at(tau)
    if (ab.detach() <= 0).any():
        raise FloatingPointError("alpha_bar <= 0 at requested timestep")
    ab = ab.to(z_L.dtype).view(-1, *[1] * (z_L.dim() - 1))
    eps = eps_model(z_L, cond.prompt, tau.to(z_L.dtype))
    return (z_L - torch.sqrt(1 - ab) * eps) / torch.sqrt(ab)


# ---------------------------------------------------------------- autoencoder


@dataclass
class AutoencoderConfig:
    latent_channels: int = 4
    factor: int = 4
    width: int = 96
    blocks: int = 3
    kl_weight: float = 1e-6


class _PlainResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.silu(self.conv1(F.silu(x))))


class Autoencoder(nn.Module):
    """Small KL autoencoder working entirely at latent resolution.

    Pixel-unshuffle by ``factor`` then a residual conv stack down to the
    posterior (mean, log-variance); the decoder mirrors it with pixel-shuffle.
    ``encode`` returns the posterior mean times ``scaling``.
    """

    def __init__(self, cfg: AutoencoderConfig):
        super().__init__()
        self.cfg = cfg
        f, w = cfg.factor, cfg.width
        packed = 3 * f * f
        self.encoder = nn.Sequential(
            nn.PixelUnshuffle(f),
            nn.Conv2d(packed, w, 3, padding=1),
            *[_PlainResBlock(w) for _ in range(cfg.blocks)],
            nn.SiLU(),
            nn.Conv2d(w, 2 * cfg.latent_channels, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(cfg.latent_channels, w, 3, padding=1),
            *[_PlainResBlock(w) for _ in range(cfg.blocks)],
            nn.SiLU(),
            nn.Conv2d(w, packed, 3, padding=1),
            nn.PixelShuffle(f),
        )
        # latents are multiplied by this so they have roughly unit variance
        self.register_buffer("scaling", torch.ones(()))

    def _check(self, x):
        f = self.cfg.factor
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[-1] % f or x.shape[-2] % f:
            raise ValueError(f"autoencoder expects N×3×H×W with H, W divisible by {f}, got {tuple(x.shape)}")

    def posterior(self, x):
        self._check(x)
        mean, logvar = self.encoder(2 * x - 1).chunk(2, dim=1)
        return mean, logvar.clamp(-30.0, 20.0)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        return self.posterior(x)[0] * self.scaling

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 4 or z.shape[1] != self.cfg.latent_channels:
            raise ValueError(f"latent must be N×{self.cfg.latent_channels}×h×w, got {tuple(z.shape)}")
        return (self.decoder(z / self.scaling) + 1) / 2

    def forward(self, x, generator=None):
        """Training pass: sampled latent, reconstruction and KL term."""
        mean, logvar = self.posterior(x)
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * noise
        recon = (self.decoder(z) + 1) / 2
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1 - logvar).mean()
        return recon, kl
