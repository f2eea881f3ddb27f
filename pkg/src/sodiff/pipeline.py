"""The assembled restorer: frozen AE + SAIPE + LoRA UNet + time predictor."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .diffusion import Autoencoder, NoiseSchedule, UNet, UnetCondition, one_step_restore
from .saipe import Saipe
from .time_predictor import TimePredictor, bins_to_timestep

__all__ = ["Restoration", "SODiff"]


@dataclass
class Restoration:
    image: torch.Tensor  # N×3×H×W, unclamped decoder output
    z_hat: torch.Tensor
    z_lq: torch.Tensor
    tau: torch.Tensor  # in schedule units [0, T_max − 1]
    qf_pred: torch.Tensor | None
    prompt: torch.Tensor
    tau_bins: torch.Tensor | None = None


class SODiff(nn.Module):
    """One-step JPEG restorer.

    ``fixed_tau`` replaces the predictor (the "w/o TP" configuration); a
    ``text_prompt`` passed to :meth:`restore` replaces e_img.
    """

    def __init__(
        self,
        ae: Autoencoder,
        saipe: Saipe,
        unet: UNet,
        sched: NoiseSchedule,
        predictor: TimePredictor | None = None,
        fixed_tau: float | None = None,
    ):
        super().__init__()
        if predictor is None and fixed_tau is None:
            raise ValueError("need a time predictor or a fixed timestep")
        self.ae, self.saipe, self.unet, self.predictor = ae, saipe, unet, predictor
        self.sched = sched
        self.fixed_tau = fixed_tau

    def restore(self, lq: torch.Tensor, rng=None, stochastic: bool | None = None, temperature=None, text_prompt=None):
        with torch.no_grad():
            z_lq = self.ae.encode(lq)
            if text_prompt is None:
                prompt = self.saipe.embed_guidance(self.saipe.encode(lq))
            else:
                prompt = text_prompt
        qf_pred, tau_bins = None, None
        if self.predictor is None:
            tau = torch.full((lq.shape[0],), float(self.fixed_tau), dtype=lq.dtype)
        else:
            out = self.predictor(lq, rng=rng, stochastic=stochastic, temperature=temperature)
            tau_bins, qf_pred = out.tau_pred, out.qf_pred
            tau = bins_to_timestep(tau_bins, self.predictor.cfg.T_bins, self.sched.T_max)
        z_hat = one_step_restore(z_lq, UnetCondition(prompt, tau), self.sched, self.unet)
        image = self.ae.decode(z_hat)
        return Restoration(image=image, z_hat=z_hat, z_lq=z_lq, tau=tau, qf_pred=qf_pred, prompt=prompt, tau_bins=tau_bins)

    @torch.no_grad()
    def enhance(self, lq: torch.Tensor, reference=None) -> torch.Tensor:
        """Deterministic restored image clamped to [0, 1]; matches the evaluate() restorer protocol."""
        was = self.training
        self.eval()
        out = self.restore(lq, stochastic=False).image.clamp(0, 1)
        self.train(was)
        return out

    def forward(self, lq):
        return self.restore(lq)
