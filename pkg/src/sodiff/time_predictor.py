"""Quality-factor-aware timestep predictor.

A residual conv trunk and a shared global average pool feed two linear heads:
a QF regressor squashed to [1, 100] and a logits head over ``T_bins`` coarse
timesteps. The timestep is the Gumbel-perturbed softmax expectation of the
bin index, so it stays differentiable w.r.t. the logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "PredictorConfig",
    "TimestepDistribution",
    "TimePredictor",
    "sample_gumbel",
    "gumbel_combine",
    "qf_loss",
    "bins_to_timestep",
]


@dataclass
class PredictorConfig:
    channels: tuple[int, ...] = (32, 64, 96, 128)
    T_bins: int = 50
    temperature: float = 1.0
    anneal_to: float | None = None  # e.g. 0.1 for a 1.0 -> 0.1 schedule over training
    stochastic_inference: bool = False
    init_tau: float | None = None  # starting τ in bins; None -> uniform logits, (T_bins-1)/2
    stem: str = "dct"  # "dct": fixed 8×8 block DCT + log-magnitude; "conv": plain 3×3 conv

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if len(self.channels) != 4:
            raise ValueError("the trunk has exactly four residual blocks")
        if self.T_bins < 1:
            raise ValueError("T_bins must be >= 1")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.stem not in ("dct", "conv"):
            raise ValueError(f"unknown stem {self.stem!r}")
        if self.init_tau is not None and not 0 < self.init_tau < self.T_bins - 1:
            raise ValueError(f"init_tau must lie strictly inside (0, {self.T_bins - 1})")

    def temperature_at(self, progress: float) -> float:
        """Temperature at training progress in [0, 1] (geometric anneal if enabled)."""
        if self.anneal_to is None:
            return self.temperature
        p = min(max(progress, 0.0), 1.0)
        return self.temperature * (self.anneal_to / self.temperature) ** p


@dataclass
class TimestepDistribution:
    logits: torch.Tensor  # (B, T_bins)
    tau_pred: torch.Tensor  # (B,), in bin units [0, T_bins - 1]
    qf_pred: torch.Tensor  # (B,), in [1, 100]
    weights: torch.Tensor  # (B, T_bins) softmax weights actually used


def sample_gumbel(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    u = torch.rand(shape, generator=generator, dtype=torch.float64)
    u = u.clamp(1e-12, 1 - 1e-12)
    return (-torch.log(-torch.log(u))).to(dtype)


def _as_generator(rng) -> torch.Generator | None:
    if rng is None or isinstance(rng, torch.Generator):
        return rng
    return torch.Generator().manual_seed(int(rng))


def gumbel_combine(logits: torch.Tensor, temperature: float = 1.0, rng=None, noise=True):
    """Expected bin index under ``softmax((logits + g) / temperature)``.

    ``rng`` is a seed or ``torch.Generator``; ``noise`` may be ``False`` (g = 0)
    or an explicit tensor of Gumbel samples. Returns ``(tau, weights)``.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if noise is True:
        g = sample_gumbel(logits.shape, _as_generator(rng), logits.dtype)
    elif noise is False or noise is None:
        g = torch.zeros_like(logits)
    else:
        g = noise.to(logits.dtype)
    weights = F.softmax((logits + g) / temperature, dim=-1)
    idx = torch.arange(logits.shape[-1], dtype=logits.dtype)
    return (weights * idx).sum(-1), weights


def bins_to_timestep(tau_bins: torch.Tensor, T_bins: int, T_max: int) -> torch.Tensor:
    """Affine map from [0, T_bins − 1] onto [0, T_max − 1]."""
    if T_bins == 1:
        return torch.zeros_like(tau_bins)
    return tau_bins * (T_max - 1) / (T_bins - 1)


def qf_loss(qf_pred: torch.Tensor, qf_gt: torch.Tensor) -> torch.Tensor:
    """Mean absolute QF error."""
    return (torch.as_tensor(qf_pred) - torch.as_tensor(qf_gt)).abs().mean()


def ramp_logits(T_bins: int, target: float | None) -> torch.Tensor:
    """Logits ``-k·i`` whose softmax has mean index ``target`` (zeros when target is None)."""
    idx = torch.arange(T_bins, dtype=torch.float64)
    if target is None or T_bins == 1:
        return torch.zeros(T_bins)
    mean = lambda k: float((torch.softmax(-k * idx, 0) * idx).sum())  # noqa: E731, decreasing in k
    lo, hi = -50.0, 50.0
    for _ in range(200):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if mean(mid) > target else (lo, mid)
    return (-(lo + hi) / 2 * idx).float()


class BlockDCT(nn.Module):
    """Fixed YCbCr 8×8 block DCT on the codec's grid, returned as ``log1p|coef|`` (192 channels).

    JPEG artifacts at mid/high QF are a grey level or two, far below image
    content; per-frequency coefficient magnitudes make them visible.
    """

    def __init__(self):
        super().__init__()
        from .jpeg_codec import _RGB2YCC, dct_matrix

        basis = np.einsum("ux,vy->uvxy", dct_matrix(8), dct_matrix(8)).reshape(64, 8, 8)
        weight = np.einsum("cr,fxy->cfrxy", _RGB2YCC, basis).reshape(192, 3, 8, 8)
        self.register_buffer("weight", torch.from_numpy(weight).float(), persistent=False)

    def forward(self, image):
        h, w = image.shape[-2:]
        x = F.pad(image * 255.0, (0, (-w) % 8, 0, (-h) % 8), mode="replicate")
        return torch.log1p(F.conv2d(x, self.weight.to(x.dtype), stride=8).abs())


class _ResBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Identity() if cin == cout and stride == 1 else nn.Conv2d(cin, cout, 1, stride=stride)

    def forward(self, x):
        return F.relu(self.skip(x) + self.conv2(F.relu(self.conv1(x))))


class TimePredictor(nn.Module):
    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.channels
        if cfg.stem == "dct":
            self.stem = nn.Sequential(BlockDCT(), nn.Conv2d(192, ch[0], 1))
        else:
            self.stem = nn.Conv2d(3, ch[0], 3, padding=1)
        blocks, prev = [], ch[0]
        for i, c in enumerate(ch):
            blocks.append(_ResBlock(prev, c, 1 if i == 0 else 2))
            prev = c
        self.trunk = nn.Sequential(*blocks)
        self.qf_head = nn.Linear(prev, 1)
        self.t_head = nn.Linear(prev, cfg.T_bins)
        nn.init.zeros_(self.t_head.weight)
        with torch.no_grad():
            self.t_head.bias.copy_(ramp_logits(cfg.T_bins, cfg.init_tau))

    def features(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected N×3×H×W image, got {tuple(image.shape)}")
        x = image if self.cfg.stem == "dct" else 2 * image - 1
        h = self.trunk(F.relu(self.stem(x)))
        return h.mean(dim=(2, 3))

    def forward(self, image, rng=None, stochastic: bool | None = None, temperature: float | None = None):
        if stochastic is None:
            stochastic = self.training or self.cfg.stochastic_inference
        pooled = self.features(image)
        qf = 1.0 + 99.0 * torch.sigmoid(self.qf_head(pooled).squeeze(-1))
        logits = self.t_head(pooled)
        tau, weights = gumbel_combine(logits, temperature or self.cfg.temperature, rng, noise=stochastic)
        return TimestepDistribution(logits=logits, tau_pred=tau, qf_pred=qf, weights=weights)

    predict = forward
