"""Semantic-aligned image prompt extractor.

A SwinIR-style encoder maps the LQ image to a ¼-resolution feature map. Two
heads read it: a reconstruction decoder (lighter Swin stack + pixel shuffle)
and a guidance embedder that pools the features into ``L`` prompt tokens of
width ``D`` through learnable queries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .nn_utils import trunc_normal_init_

__all__ = [
    "SaipeConfig",
    "Saipe",
    "SwinLayer",
    "RSTB",
    "PerformerAttention",
    "GuidanceEmbedder",
    "saipe_loss",
]


@dataclass
class SaipeConfig:
    feat_channels: int = 180
    rstb_count: int = 2
    stl_per_rstb: int = 2
    decoder_stl: int | None = None  # None -> half the encoder's per-RSTB count (min 1)
    heads: int = 6
    window: int = 8
    mlp_ratio: float = 2.0
    query_count: int = 77
    embed_dim: int = 64
    align_width: int = 128
    align_heads: int = 4
    performer_layers: int = 1
    performer_features: int = 64
    attention: str = "performer"  # or "softmax"
    ms_kernels: tuple[int, ...] = (1, 3, 5)
    pos_embed: bool = True
    lambda_align: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.ms_kernels = tuple(int(k) for k in self.ms_kernels)
        for name in ("feat_channels", "rstb_count", "stl_per_rstb", "heads", "window", "query_count", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"SaipeConfig.{name} must be positive")
        if self.lambda_align < 0:
            raise ValueError("lambda_align must be >= 0")
        if self.feat_channels % self.heads:
            raise ValueError("feat_channels must be divisible by heads")
        if self.attention not in ("performer", "softmax"):
            raise ValueError(f"unknown attention {self.attention!r}")

    @property
    def decoder_layers(self) -> int:
        return self.decoder_stl if self.decoder_stl is not None else max(1, self.stl_per_rstb // 2)


# ---------------------------------------------------------------- Swin blocks


def window_partition(x, ws):
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows, ws, h, w):
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


class WindowAttention(nn.Module):
    def __init__(self, dim, ws, heads):
        super().__init__()
        self.ws, self.heads = ws, heads
        self.scale = (dim // heads) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = nn.Parameter(torch.zeros((2 * ws - 1) ** 2, heads))
        coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
        self.register_buffer("rel_index", rel[..., 0] * (2 * ws - 1) + rel[..., 1], persistent=False)

    def forward(self, x, mask=None):
        bw, n, c = x.shape
        qkv = self.qkv(x).view(bw, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1)
        bias = self.rel_bias[self.rel_index.view(-1)].view(n, n, -1).permute(2, 0, 1)
        attn = attn + bias.unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.heads, n, n)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(bw, n, c))


class SwinLayer(nn.Module):
    """(Shifted-)window MSA + MLP on B×H×W×C tokens."""

    def __init__(self, dim, heads, window, shift, mlp_ratio=2.0):
        super().__init__()
        self.window, self.shift = window, shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window, heads)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    @staticmethod
    def _mask(h, w, ws, shift, valid_h, valid_w, device):
        """Additive (nW, n, n) mask: blocks attention across shifted-region seams
        and towards padded tokens."""
        region = torch.zeros(1, h, w, 1, device=device)
        if shift:
            cnt = 0
            for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                    region[:, hs, wsl, :] = cnt
                    cnt += 1
        pad = torch.ones(1, h, w, 1, device=device)
        pad[:, :valid_h, :valid_w] = 0
        if shift:
            pad = torch.roll(pad, (-shift, -shift), dims=(1, 2))
        win = window_partition(region, ws).squeeze(-1)
        mask = (win[:, None, :] != win[:, :, None]).float()
        mask = mask + window_partition(pad, ws).squeeze(-1)[:, None, :]
        return mask.masked_fill(mask > 0, -100.0)

    def forward(self, x):
        b, h, w, c = x.shape
        ws = self.window
        shift = self.shift if min(h, w) > ws else 0
        pad_h, pad_w = (-h) % ws, (-w) % ws

        y = self.norm1(x)
        if pad_h or pad_w:
            y = F.pad(y, (0, 0, 0, pad_w, 0, pad_h))
        hp, wp = h + pad_h, w + pad_w
        mask = None
        if shift:
            y = torch.roll(y, (-shift, -shift), dims=(1, 2))
        if shift or pad_h or pad_w:
            mask = self._mask(hp, wp, ws, shift, h, w, x.device).to(y.dtype)
        y = window_reverse(self.attn(window_partition(y, ws), mask), ws, hp, wp)
        if shift:
            y = torch.roll(y, (shift, shift), dims=(1, 2))
        x = x + y[:, :h, :w]
        return x + self.mlp(self.norm2(x))


class RSTB(nn.Module):
    """Residual Swin Transformer block: STL stack, 3×3 conv, identity skip."""

    def __init__(self, dim, depth, heads, window, mlp_ratio=2.0):
        super().__init__()
        self.layers = nn.ModuleList(
            SwinLayer(dim, heads, window, 0 if i % 2 == 0 else window // 2, mlp_ratio) for i in range(depth)
        )
        self.conv = nn.Conv2d(dim, dim, 3, padding=1)

    def forward(self, x):  # B×C×H×W
        y = x.permute(0, 2, 3, 1)
        for layer in self.layers:
            y = layer(y)
        return x + self.conv(y.permute(0, 3, 1, 2))


def _channel_norm(norm: nn.LayerNorm, x):
    return norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


# ---------------------------------------------------------------- guidance embedder


class PerformerAttention(nn.Module):
    """Multi-head attention with FAVOR+ positive random features.

    ``exact=True`` swaps in ordinary softmax attention with the same weights.
    The feature matrix is a fixed buffer drawn from ``seed``.
    """

    def __init__(self, dim, heads=4, n_features=64, seed=0, exact=False):
        super().__init__()
        self.heads, self.exact = heads, exact
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        g = torch.Generator().manual_seed(seed)
        self.register_buffer("omega", self._orthogonal_features(n_features, self.head_dim, g))

    @staticmethod
    def _orthogonal_features(m, d, g):
        blocks = []
        for _ in range(math.ceil(m / d)):
            q, _ = torch.linalg.qr(torch.randn(d, d, generator=g))
            blocks.append(q.T)
        w = torch.cat(blocks)[:m]
        norms = torch.randn(m, d, generator=g).norm(dim=1, keepdim=True)
        return w * norms

    def _features(self, x, is_query):
        x = x * self.head_dim**-0.25
        proj = x @ self.omega.to(x.dtype).T
        sq = 0.5 * (x**2).sum(-1, keepdim=True)
        stab = proj.amax(dim=-1, keepdim=True) if is_query else proj.amax(dim=(-1, -2), keepdim=True)
        return torch.exp(proj - sq - stab.detach()) / math.sqrt(self.omega.shape[0]) + 1e-6

    def forward(self, x):
        b, n, c = x.shape
        q, k, v = self.qkv(x).view(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        if self.exact:
            attn = (q @ k.transpose(-1, -2)) * self.head_dim**-0.5
            out = attn.softmax(-1) @ v
        else:
            qf, kf = self._features(q, True), self._features(k, False)
            kv = kf.transpose(-1, -2) @ v
            norm = qf @ kf.sum(dim=-2, keepdim=True).transpose(-1, -2)
            out = (qf @ kv) / norm
        return self.proj(out.transpose(1, 2).reshape(b, n, c))


def sincos_2d(h, w, dim, dtype=torch.float32):
    """Fixed 2D sine/cosine position encoding, (h*w, dim)."""
    quarter = dim // 4
    freqs = 1.0 / (10000 ** (torch.arange(quarter, dtype=torch.float64) / max(quarter, 1)))
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
    parts = []
    for coord in (ys.flatten(), xs.flatten()):
        ang = coord[:, None] * freqs[None]
        parts += [ang.sin(), ang.cos()]
    enc = torch.cat(parts, dim=1)
    return F.pad(enc, (0, dim - enc.shape[1])).to(dtype)


class GuidanceEmbedder(nn.Module):
    """Feature map -> (L, D) prompt tokens: MLP, linear-attention encoder,
    multi-scale convolutional keys/values, query attention pooling."""

    def __init__(self, cfg: SaipeConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.align_width
        self.mlp_in = nn.Sequential(nn.Linear(cfg.feat_channels, e), nn.GELU(), nn.Linear(e, e))
        self.blocks = nn.ModuleList()
        for i in range(cfg.performer_layers):
            self.blocks.append(
                nn.ModuleDict(
                    {
                        "norm1": nn.LayerNorm(e),
                        "attn": PerformerAttention(
                            e, cfg.align_heads, cfg.performer_features, cfg.seed + i, exact=cfg.attention == "softmax"
                        ),
                        "norm2": nn.LayerNorm(e),
                        "ff": nn.Sequential(nn.Linear(e, 2 * e), nn.GELU(), nn.Linear(2 * e, e)),
                    }
                )
            )
        self.ms_convs = nn.ModuleList(nn.Conv2d(e, e, k, padding=k // 2) for k in cfg.ms_kernels)
        self.kv_norm = nn.LayerNorm(e)
        self.queries = nn.Parameter(torch.zeros(cfg.query_count, e))
        self.pool = nn.MultiheadAttention(e, cfg.align_heads, batch_first=True)
        self.norm_out = nn.LayerNorm(e)
        self.proj_out = nn.Linear(e, cfg.embed_dim)

    def forward(self, feats):
        b, c, h, w = feats.shape
        x = self.mlp_in(feats.flatten(2).transpose(1, 2))
        if self.cfg.pos_embed:
            x = x + sincos_2d(h, w, x.shape[-1], x.dtype)
        for blk in self.blocks:
            x = x + blk["attn"](blk["norm1"](x))
            x = x + blk["ff"](blk["norm2"](x))
        grid = x.transpose(1, 2).reshape(b, -1, h, w)
        kv = torch.cat([conv(grid).flatten(2).transpose(1, 2) for conv in self.ms_convs], dim=1)
        kv = self.kv_norm(kv)
        q = self.queries.unsqueeze(0).expand(b, -1, -1)
        pooled, _ = self.pool(q, kv, kv, need_weights=False)
        return self.proj_out(self.norm_out(pooled + q))


# ---------------------------------------------------------------- full model


class Saipe(nn.Module):
    def __init__(self, cfg: SaipeConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.feat_channels
        self.stem = nn.Sequential(nn.PixelUnshuffle(4), nn.Conv2d(48, c, 3, padding=1))
        self.enc_blocks = nn.ModuleList(
            RSTB(c, cfg.stl_per_rstb, cfg.heads, cfg.window, cfg.mlp_ratio) for _ in range(cfg.rstb_count)
        )
        self.enc_norm = nn.LayerNorm(c)
        self.enc_conv = nn.Conv2d(c, c, 3, padding=1)

        self.dec_blocks = nn.ModuleList(
            RSTB(c, cfg.decoder_layers, cfg.heads, cfg.window, cfg.mlp_ratio) for _ in range(cfg.rstb_count)
        )
        self.dec_norm = nn.LayerNorm(c)
        self.dec_up = nn.Sequential(nn.Conv2d(c, 48, 3, padding=1), nn.PixelShuffle(4))

        self.embedder = GuidanceEmbedder(cfg)
        trunc_normal_init_(self, std=0.02)
        nn.init.trunc_normal_(self.embedder.queries, std=0.02, a=-0.04, b=0.04)

    def encode(self, image: torch.Tensor) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValueError(f"expected N×3×H×W image, got {tuple(image.shape)}")
        if image.shape[-1] % 4 or image.shape[-2] % 4:
            raise ValueError(f"image size {tuple(image.shape[-2:])} not divisible by 4; pad first")
        shallow = self.stem(image)
        x = shallow
        for blk in self.enc_blocks:
            x = blk(x)
        return shallow + self.enc_conv(_channel_norm(self.enc_norm, x))

    def _check_features(self, feats):
        if feats.dim() != 4 or feats.shape[1] != self.cfg.feat_channels:
            raise ValueError(f"features must be N×{self.cfg.feat_channels}×h×w, got {tuple(feats.shape)}")
        if not torch.isfinite(feats).all():
            raise ValueError("non-finite values in feature map")

    def decode(self, feats: torch.Tensor) -> torch.Tensor:
        self._check_features(feats)
        x = feats
        for blk in self.dec_blocks:
            x = blk(x)
        return self.dec_up(_channel_norm(self.dec_norm, x))

    def embed_guidance(self, feats: torch.Tensor) -> torch.Tensor:
        self._check_features(feats)
        return self.embedder(feats)

    def forward(self, image):
        feats = self.encode(image)
        return self.decode(feats), self.embed_guidance(feats)


def saipe_loss(rec, hq, e_img, e_text, lambda_align: float) -> dict[str, torch.Tensor]:
    """``total = L1(rec, hq) + λ · MSE(e_img, e_text)``; all three terms returned."""
    if rec.shape != hq.shape:
        raise ValueError(f"reconstruction {tuple(rec.shape)} vs target {tuple(hq.shape)}")
    if e_img.shape != e_text.shape:
        raise ValueError(f"image prompt {tuple(e_img.shape)} vs text prompt {tuple(e_text.shape)}")
    l_rec = (rec - hq).abs().mean()
    l_align = ((e_img - e_text) ** 2).mean()
    return {"total": l_rec + lambda_align * l_align, "rec": l_rec, "align": l_align}
