"""Training loops: autoencoder, base UNet prior, stage 1 (SAIPE), stage 2 (SODiff), QF predictor.

Every step draws its randomness from ``(seed, step, stream)`` only, so a run
resumed from a checkpoint replays exactly what an uninterrupted run would.
"""

from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import IncompatibleCheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig, config_hash, config_to_dict
from .data import SampleIndex, make_batch, random_crop, step_rng, step_torch_gen, synthetic_corpus, to_tensor
from .diffusion import (
    Autoencoder,
    UNet,
    add_noise,
    base_state_dict,
    build_schedule,
    inject_lora,
    load_lora_state_dict,
    lora_parameters,
    lora_state_dict,
)
from .losses import Discriminator, gan_losses, recon_loss, total_loss
from .nn_utils import param_checksum
from .pipeline import SODiff
from .saipe import Saipe, saipe_loss
from .text_prompt import HashTokenProvider, require_captions
from .time_predictor import TimePredictor, qf_loss

__all__ = [
    "FrozenDriftError",
    "RunResult",
    "write_log",
    "train_autoencoder",
    "train_prior",
    "run_stage1",
    "build_sodiff",
    "run_stage2",
    "train_qf_predictor",
    "load_autoencoder",
    "load_prior",
    "load_saipe",
    "load_predictor",
    "load_sodiff",
]

logger = logging.getLogger(__name__)

# RNG stream ids, one per loop, so stages never share draws
_AE, _PRIOR, _STAGE1, _STAGE2, _DISC, _QF = range(6)


class FrozenDriftError(RuntimeError):
    """A module that must stay frozen changed during training."""


@dataclass
class RunResult:
    model: torch.nn.Module
    log: list[dict]
    checkpoint: Path | None = None
    extra: dict = field(default_factory=dict)


def write_log(rows: list[dict], path) -> None:
    """Per-step loss components as CSV (columns = union of keys, first-seen order)."""
    cols: list[str] = []
    for r in rows:
        cols += [k for k in r if k not in cols]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _optimizer(cfg: TrainConfig, params, lr: float | None = None):
    cls = torch.optim.Adam if cfg.optimizer == "adam" else torch.optim.AdamW
    return cls(params, lr=cfg.lr if lr is None else lr)


def _scheduler(cfg: TrainConfig, opt):
    if cfg.lr_schedule == "onecycle" and cfg.iters > 1:
        peaks = [g["lr"] for g in opt.param_groups]
        return torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=peaks, total_steps=cfg.iters)
    if cfg.lr_schedule not in ("constant", "onecycle"):
        raise ValueError(f"unknown lr_schedule {cfg.lr_schedule!r}")
    return None


def _positions(n: int, batch: int, rng: np.random.Generator) -> list[int]:
    return rng.choice(n, size=batch, replace=n < batch).tolist()


def _f(x) -> float:
    return float(x.detach()) if torch.is_tensor(x) else float(x)


def _seeded(seed: int, build):
    # module construction is the only place the global RNG is used
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return build()
    finally:
        torch.random.set_rng_state(state)


def _save_training(out, kind, module_cfg, state, cfg, step, log, extra=None):
    if out is None:
        return None
    save_checkpoint(
        out,
        kind,
        module_cfg,
        {**state, "step": step, "log": log},
        extra={"train_config": config_to_dict(cfg), "step": step, **(extra or {})},
    )
    return Path(out)


def _load_resume(resume, kind):
    header, state = load_checkpoint(resume, kind)
    return header, state


# ---------------------------------------------------------------- autoencoder


def _pool(cfg: TrainConfig, index: SampleIndex | None, with_captions: bool = False):
    """Images (and captions) used by the pre-training stages: the index plus synthetic extras."""
    images = list(index.images) if index is not None else []
    ids = list(index.ids) if index is not None else []
    captions = [None] * len(images)
    if cfg.data.synthetic_pool:
        syn, caps = synthetic_corpus(cfg.data.synthetic_pool, cfg.data.crop, seed=cfg.seed + 10_000, captions=True)
        images += syn
        captions += caps
        ids += [f"syn_{k:05d}" for k in range(len(syn))]
    if not images:
        raise ValueError("no training images (empty index and synthetic_pool=0)")
    if with_captions:
        return images, ids, captions
    return images


def train_autoencoder(cfg: TrainConfig, index: SampleIndex | None, out=None) -> RunResult:
    """L2 + small-KL pre-training; the latent scale is fixed to 1/std afterwards."""
    images = _pool(cfg, index)
    ae = _seeded(cfg.seed, lambda: Autoencoder(cfg.autoencoder))
    kl_w = cfg.autoencoder.kl_weight if cfg.kl_weight is None else cfg.kl_weight
    opt = _optimizer(cfg, ae.parameters())
    sched = _scheduler(cfg, opt)
    log = []
    for step in range(cfg.iters):
        rng = step_rng(cfg.seed, step, _AE)
        x = to_tensor([random_crop(images[p], cfg.data.crop, rng, cfg.data.flip) for p in _positions(len(images), cfg.batch, rng)])
        recon, kl = ae(x, step_torch_gen(cfg.seed, step, _AE))
        mse = torch.mean((recon - x) ** 2)
        loss = mse + kl_w * kl
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if sched is not None:
            sched.step()
        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.append({"step": step, "total": _f(loss), "mse": _f(mse), "kl": _f(kl), "psnr": -10 * math.log10(max(_f(mse), 1e-12))})
    ae.eval().requires_grad_(False)
    with torch.no_grad():
        sample = to_tensor([random_crop(im, cfg.data.crop, step_rng(cfg.seed, k, 99), False) for k, im in enumerate(images[:256])])
        std = torch.cat([ae.posterior(sample[i : i + 32])[0] for i in range(0, len(sample), 32)]).std()
        ae.scaling.fill_(1.0 / float(std))
    ckpt = None
    if out is not None:
        save_checkpoint(out, "autoencoder", cfg.autoencoder, {"model": ae.state_dict()}, extra={"train_config": config_to_dict(cfg)})
        ckpt = Path(out)
    return RunResult(ae, log, ckpt)


# ---------------------------------------------------------------- base UNet prior


def train_prior(cfg: TrainConfig, index: SampleIndex | None, ae: Autoencoder, captions=None, provider=None, out=None) -> RunResult:
    """ε-prediction pre-training of the base UNet on frozen-AE latents, text-conditioned.

    Stands in for the pretrained text-to-image prior that stage 2 adapts.
    Images without a caption get the provider's embedding of an empty prompt token.
    """
    provider = provider or HashTokenProvider(dim=cfg.unet.context_dim, seed=cfg.text_seed)
    images, ids, syn_caps = _pool(cfg, index, with_captions=True)
    prompts = []
    for i, c in zip(ids, syn_caps):
        if captions is not None and i in captions:
            prompts.append(np.asarray(captions[i].embedding))
        else:
            prompts.append(provider.embed(i, c if c else "image"))
    prompts = torch.from_numpy(np.stack(prompts)).float()
    sched = build_schedule(cfg.schedule.T_max, cfg.schedule.beta_start, cfg.schedule.beta_end)
    unet = _seeded(cfg.seed, lambda: UNet(cfg.unet))
    ae.eval().requires_grad_(False)
    opt = _optimizer(cfg, unet.parameters())
    lr_sched = _scheduler(cfg, opt)
    log = []
    for step in range(cfg.iters):
        rng = step_rng(cfg.seed, step, _PRIOR)
        g = step_torch_gen(cfg.seed, step, _PRIOR)
        pos = _positions(len(images), cfg.batch, rng)
        x = to_tensor([random_crop(images[p], cfg.data.crop, rng, cfg.data.flip) for p in pos])
        with torch.no_grad():
            z = ae.encode(x)
        t = torch.randint(0, sched.T_max, (len(pos),), generator=g)
        noise = torch.randn(z.shape, generator=g)
        pred = unet(add_noise(z, noise, t, sched), prompts[pos], t.float())
        loss = torch.mean((pred - noise) ** 2)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(unet.parameters(), cfg.grad_clip)
        opt.step()
        if lr_sched is not None:
            lr_sched.step()
        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.append({"step": step, "total": _f(loss)})
    unet.eval().requires_grad_(False)
    ckpt = None
    if out is not None:
        save_checkpoint(
            out,
            "prior",
            cfg.unet,
            {"model": unet.state_dict()},
            extra={"train_config": config_to_dict(cfg), "requires": {"autoencoder": config_hash(cfg.autoencoder)}},
        )
        ckpt = Path(out)
    return RunResult(unet, log, ckpt)


# ---------------------------------------------------------------- stage 1


def run_stage1(cfg: TrainConfig, index: SampleIndex, captions: dict, out=None, resume=None, stop_at: int | None = None) -> RunResult:
    """Train SAIPE's encoder, decoder and embedder jointly on ``L1 + λ·MSE(e_img, e_text)``.

    With λ = 0 the alignment term is still logged but left out of the graph.
    ``stop_at`` ends the loop early (after that many steps in total) while
    keeping the schedule of a full ``cfg.iters`` run, which is how a resumable
    checkpoint is produced mid-run.
    """
    require_captions(captions, index.ids)
    text_shape = np.shape(next(iter(captions.values())).embedding)
    if text_shape != (cfg.saipe.query_count, cfg.saipe.embed_dim):
        raise ValueError(
            f"text embeddings are {text_shape} but SAIPE emits ({cfg.saipe.query_count}, {cfg.saipe.embed_dim}); "
            "query_count/embed_dim must match the text provider"
        )
    model = _seeded(cfg.seed, lambda: Saipe(cfg.saipe))
    opt = _optimizer(cfg, model.parameters())
    lr_sched = _scheduler(cfg, opt)
    log, start = [], 0
    if resume is not None:
        _, state = _load_resume(resume, "saipe")
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        if lr_sched is not None:
            lr_sched.load_state_dict(state["scheduler"])
        start, log = state["step"], list(state["log"])
    lam = cfg.saipe.lambda_align
    end = cfg.iters if stop_at is None else min(stop_at, cfg.iters)
    model.train()
    for step in range(start, end):
        rng = step_rng(cfg.seed, step, _STAGE1)
        d = cfg.data
        batch = make_batch(index, _positions(len(index), cfg.batch, rng), rng, d.crop, d.qf_range, d.flip, d.subsample, d.qf_mode, d.fixed_qf)
        e_text = torch.from_numpy(np.stack([captions[i].embedding for i in batch.ids])).float()
        rec, e_img = model(batch.lq)
        parts = saipe_loss(rec, batch.hq, e_img, e_text, lam)
        loss = parts["total"] if lam > 0 else parts["rec"]
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        if lr_sched is not None:
            lr_sched.step()
        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.append({"step": step, "total": _f(parts["total"]), "rec": _f(parts["rec"]), "align": _f(parts["align"]), "lr": opt.param_groups[0]["lr"]})
        if out is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            _save_stage1(out, cfg, model, opt, lr_sched, step + 1, log)
    model.eval()
    ckpt = _save_stage1(out, cfg, model, opt, lr_sched, end, log)
    return RunResult(model, log, ckpt)


def _save_stage1(out, cfg, model, opt, lr_sched, step, log):
    state = {"model": model.state_dict(), "optimizer": opt.state_dict()}
    if lr_sched is not None:
        state["scheduler"] = lr_sched.state_dict()
    return _save_training(out, "saipe", cfg.saipe, state, cfg, step, log)


# ---------------------------------------------------------------- stage 2


def build_sodiff(cfg: TrainConfig, ae: Autoencoder, saipe: Saipe, base_unet: UNet) -> tuple[SODiff, Discriminator]:
    """Freeze AE/SAIPE/base UNet, wrap a copy of the UNet with LoRA, attach predictor + discriminator."""
    for m in (ae, saipe, base_unet):
        m.eval().requires_grad_(False)
    unet = copy.deepcopy(base_unet)
    unet.requires_grad_(False)
    _seeded(cfg.seed, lambda: inject_lora(unet, cfg.lora))
    for p in lora_parameters(unet):
        p.requires_grad_(True)
    predictor = None
    if cfg.fixed_tau is None:
        predictor = _seeded(cfg.seed + 1, lambda: TimePredictor(cfg.predictor))
    sched = build_schedule(cfg.schedule.T_max, cfg.schedule.beta_start, cfg.schedule.beta_end)
    model = SODiff(ae, saipe, unet, sched, predictor, cfg.fixed_tau)
    disc = _seeded(cfg.seed + 2, lambda: Discriminator.from_unet(base_unet))
    return model, disc


def _frozen_sums(model: SODiff) -> dict[str, str]:
    return {
        "autoencoder": param_checksum(model.ae),
        "saipe": param_checksum(model.saipe),
        "unet_base": param_checksum(base_state_dict(model.unet)),
    }


def _generator_params(model: SODiff) -> list[torch.nn.Parameter]:
    params = lora_parameters(model.unet)
    if model.predictor is not None:
        params = params + list(model.predictor.parameters())
    return params


def run_stage2(
    cfg: TrainConfig,
    index: SampleIndex,
    ae: Autoencoder,
    saipe: Saipe,
    base_unet: UNet,
    captions: dict | None = None,
    out=None,
    resume=None,
    stop_at: int | None = None,
    upstream_hashes: dict | None = None,
) -> RunResult:
    """LoRA + time-predictor training on ``recon + α·G + β·qf``, alternating with the discriminator.

    Returns the assembled :class:`SODiff`; ``extra`` holds the discriminator,
    frozen-module checksums (before/after) and whether D was ever stepped.
    """
    if cfg.prompt_source == "text":
        if captions is None:
            raise ValueError("prompt_source='text' needs a caption file")
        require_captions(captions, index.ids)
    model, disc = build_sodiff(cfg, ae, saipe, base_unet)
    w = cfg.weights
    use_gan = w.use_gan and w.alpha > 0
    pred_lr = cfg.lr if cfg.predictor_lr is None else cfg.predictor_lr
    groups = [{"params": lora_parameters(model.unet), "lr": cfg.lr}]
    if model.predictor is not None:
        groups.append({"params": list(model.predictor.parameters()), "lr": pred_lr})
    opt_g = _optimizer(cfg, groups)
    opt_d = _optimizer(cfg, disc.parameters(), lr=cfg.disc_lr)
    sched_g = _scheduler(cfg, opt_g)
    gen_params = _generator_params(model)
    log, start, disc_steps = [], 0, 0
    if resume is not None:
        _, state = _load_resume(resume, "sodiff")
        load_lora_state_dict(model.unet, state["lora"])
        if model.predictor is not None:
            model.predictor.load_state_dict(state["predictor"])
        disc.load_state_dict(state["disc"])
        opt_g.load_state_dict(state["opt_g"])
        opt_d.load_state_dict(state["opt_d"])
        if sched_g is not None:
            sched_g.load_state_dict(state["sched_g"])
        start, log, disc_steps = state["step"], list(state["log"]), state.get("disc_steps", 0)
    before = _frozen_sums(model)
    disc_sum0 = param_checksum(disc)
    end = cfg.iters if stop_at is None else min(stop_at, cfg.iters)
    model.train()
    for step in range(start, end):
        rng = step_rng(cfg.seed, step, _STAGE2)
        g = step_torch_gen(cfg.seed, step, _STAGE2)
        d = cfg.data
        batch = make_batch(index, _positions(len(index), cfg.batch, rng), rng, d.crop, d.qf_range, d.flip, d.subsample, d.qf_mode, d.fixed_qf)
        text = None
        if cfg.prompt_source == "text":
            text = torch.from_numpy(np.stack([captions[i].embedding for i in batch.ids])).float()
        temp = cfg.predictor.temperature_at(step / max(cfg.iters - 1, 1))
        r = model.restore(batch.lq, rng=g, stochastic=True, temperature=temp, text_prompt=text)
        rec = recon_loss(r.image, batch.hq, use_ea=w.use_ea)
        with torch.no_grad():
            z_hq = model.ae.encode(batch.hq)
        l_g = torch.zeros(())
        if use_gan:
            l_g = gan_losses(r.z_hat, z_hq, disc, model.sched, g, r.prompt)["G"]
        l_qf = qf_loss(r.qf_pred, batch.qf) if r.qf_pred is not None else torch.zeros(())
        tot = total_loss(rec["total"], l_g, l_qf, w)
        opt_g.zero_grad(set_to_none=True)
        tot["total"].backward(inputs=gen_params)
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(gen_params, cfg.grad_clip)
        opt_g.step()
        if sched_g is not None:
            sched_g.step()

        l_d = torch.zeros(())
        if use_gan and step % cfg.disc_every == 0:
            gd = step_torch_gen(cfg.seed, step, _DISC)
            l_d = gan_losses(r.z_hat.detach(), z_hq, disc, model.sched, gd, r.prompt.detach())["D"]
            opt_d.zero_grad(set_to_none=True)
            l_d.backward(inputs=list(disc.parameters()))
            opt_d.step()
            disc_steps += 1

        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.append(
                {
                    "step": step,
                    "total": _f(tot["total"]),
                    "recon": _f(rec["total"]),
                    "mse": _f(rec["mse"]),
                    "ea_edge": _f(rec["ea_edge"]),
                    "ea_img": _f(rec["ea_img"]),
                    "G": _f(l_g),
                    "D": _f(l_d),
                    "qf": _f(l_qf),
                    "alpha": float(tot["alpha"]),
                    "beta": float(tot["beta"]),
                    "tau": _f(r.tau.mean()),
                    "qf_pred": _f(r.qf_pred.mean()) if r.qf_pred is not None else float("nan"),
                    "temperature": temp,
                }
            )
        if cfg.checksum_every and (step + 1) % cfg.checksum_every == 0:
            _verify_frozen(model, before, step)
        if out is not None and cfg.ckpt_every and (step + 1) % cfg.ckpt_every == 0:
            _save_stage2(out, cfg, model, disc, (opt_g, opt_d, sched_g), step + 1, log, disc_steps, upstream_hashes)
    _verify_frozen(model, before, end)
    model.eval()
    ckpt = _save_stage2(out, cfg, model, disc, (opt_g, opt_d, sched_g), end, log, disc_steps, upstream_hashes)
    extra = {
        "disc": disc,
        "frozen_before": before,
        "frozen_after": _frozen_sums(model),
        "disc_checksum_before": disc_sum0,
        "disc_checksum_after": param_checksum(disc),
        "disc_steps": disc_steps,
    }
    return RunResult(model, log, ckpt, extra)


def _verify_frozen(model: SODiff, before: dict, step: int) -> None:
    now = _frozen_sums(model)
    drift = [k for k in before if before[k] != now[k]]
    if drift:
        raise FrozenDriftError(f"frozen module(s) {drift} changed by step {step}")


def _save_stage2(out, cfg, model, disc, optim, step, log, disc_steps, upstream_hashes):
    opt_g, opt_d, sched_g = optim
    state = {
        "lora": lora_state_dict(model.unet),
        "disc": disc.state_dict(),
        "opt_g": opt_g.state_dict(),
        "opt_d": opt_d.state_dict(),
        "disc_steps": disc_steps,
    }
    if sched_g is not None:
        state["sched_g"] = sched_g.state_dict()
    if model.predictor is not None:
        state["predictor"] = model.predictor.state_dict()
    requires = upstream_hashes or {
        "autoencoder": config_hash(cfg.autoencoder),
        "prior": config_hash(cfg.unet),
        "saipe": config_hash(cfg.saipe),
    }
    return _save_training(
        out,
        "sodiff",
        {"lora": config_to_dict(cfg.lora), "predictor": config_to_dict(cfg.predictor), "fixed_tau": cfg.fixed_tau},
        state,
        cfg,
        step,
        log,
        extra={"requires": requires},
    )


# ---------------------------------------------------------------- QF predictor alone


def train_qf_predictor(cfg: TrainConfig, index: SampleIndex, out=None) -> RunResult:
    """Fit the predictor's QF head (and shared trunk) with the L1 QF loss only."""
    model = _seeded(cfg.seed + 1, lambda: TimePredictor(cfg.predictor))
    opt = _optimizer(cfg, model.parameters())
    lr_sched = _scheduler(cfg, opt)
    log = []
    model.train()
    for step in range(cfg.iters):
        rng = step_rng(cfg.seed, step, _QF)
        d = cfg.data
        batch = make_batch(index, _positions(len(index), cfg.batch, rng), rng, d.crop, d.qf_range, d.flip, d.subsample, d.qf_mode, d.fixed_qf)
        pred = model(batch.lq, rng=step_torch_gen(cfg.seed, step, _QF), stochastic=True)
        loss = qf_loss(pred.qf_pred, batch.qf)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if lr_sched is not None:
            lr_sched.step()
        if step % cfg.log_every == 0 or step == cfg.iters - 1:
            log.append({"step": step, "qf": _f(loss)})
    model.eval()
    ckpt = None
    if out is not None:
        save_checkpoint(out, "predictor", cfg.predictor, {"model": model.state_dict()}, extra={"train_config": config_to_dict(cfg)})
        ckpt = Path(out)
    return RunResult(model, log, ckpt)


# ---------------------------------------------------------------- loading


def _module_from(path, kind, cfg_cls, build):
    header, state = load_checkpoint(path, kind)
    cfg = cfg_cls(**header["config"])
    model = build(cfg)
    model.load_state_dict(state["model"])
    return model.eval().requires_grad_(False), header


def load_autoencoder(path):
    from .diffusion import AutoencoderConfig

    return _module_from(path, "autoencoder", AutoencoderConfig, Autoencoder)


def load_prior(path):
    from .diffusion import UNetConfig

    return _module_from(path, "prior", UNetConfig, UNet)


def load_saipe(path):
    from .saipe import SaipeConfig

    return _module_from(path, "saipe", SaipeConfig, Saipe)


def load_predictor(path):
    from .time_predictor import PredictorConfig

    return _module_from(path, "predictor", PredictorConfig, TimePredictor)


def load_sodiff(sodiff_path, ae_path, prior_path, saipe_path) -> SODiff:
    """Assemble a restorer from four checkpoints; refuses mismatched config hashes."""
    from .config import config_from_dict

    ae, ae_h = load_autoencoder(ae_path)
    unet, prior_h = load_prior(prior_path)
    saipe, saipe_h = load_saipe(saipe_path)
    header, state = load_checkpoint(sodiff_path, "sodiff")
    found = {"autoencoder": ae_h["config_hash"], "prior": prior_h["config_hash"], "saipe": saipe_h["config_hash"]}
    for k, want in header.get("requires", {}).items():
        if found.get(k) != want:
            raise IncompatibleCheckpointError(f"{k} checkpoint hash {found.get(k)} != {want} expected by {sodiff_path}")
    cfg = config_from_dict(header["train_config"])
    model, _ = build_sodiff(cfg, ae, saipe, unet)
    load_lora_state_dict(model.unet, state["lora"])
    if model.predictor is not None:
        model.predictor.load_state_dict(state["predictor"])
    return model.eval()
