"""Command-line entry point: ``sodiff <command> ...``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import train
from .checkpoint import load_checkpoint, read_header
from .config import ABLATIONS, apply_ablation, load_config, save_config
from .data import (
    IMAGE_SUFFIXES,
    ingest,
    read_image,
    sample_qf,
    synthetic_corpus,
    to_numpy,
    to_tensor,
    write_captions,
    write_corpus,
    write_png,
)
from .evaluate import evaluate, identity_restorer
from .jpeg_codec import degrade
from .text_prompt import HashTokenProvider, load_caption_file
from .time_predictor import bins_to_timestep

log = logging.getLogger("sodiff")

CKPT_NAMES = {"ae": "autoencoder.ckpt", "prior": "prior.ckpt", "saipe": "saipe.ckpt", "sodiff": "sodiff.ckpt"}


def _parse_qf(text: str) -> tuple[int, int]:
    if "-" in text:
        lo, hi = text.split("-", 1)
        return int(lo), int(hi)
    return int(text), int(text)


def _images_in(directory) -> list[Path]:
    return [p for p in sorted(Path(directory).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES]


def _config(args, stage):
    cfg = load_config(args.config, stage=stage, overrides=args.set)
    if getattr(args, "ablation", None):
        cfg = apply_ablation(cfg, args.ablation)
    return cfg


def _provider(cfg):
    return HashTokenProvider(dim=cfg.saipe.embed_dim, length=cfg.saipe.query_count, seed=cfg.text_seed)


def _ckpt(args, key):
    explicit = getattr(args, key, None)
    if explicit:
        return Path(explicit)
    if getattr(args, "ckpt_dir", None):
        return Path(args.ckpt_dir) / CKPT_NAMES[key]
    raise SystemExit(f"need --{key} or --ckpt-dir")


def _write_run(result, out):
    train.write_log(result.log, Path(out).with_suffix(".log.csv"))
    log.info("wrote %s (%d log rows)", out, len(result.log))


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    images, captions = synthetic_corpus(args.n, args.size, seed=args.seed, captions=True)
    paths = write_corpus(args.out, images)
    write_captions(Path(args.out) / "captions.txt", [p.stem for p in paths], captions)
    print(f"wrote {len(paths)} synthetic image(s) and captions.txt into {args.out}")


def cmd_degrade(args):
    lo, hi = _parse_qf(args.qf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    rows = []
    for p in _images_in(args.inp):
        qf = sample_qf(rng, (lo, hi)) if lo != hi else lo
        write_png(out / (p.stem + ".png"), degrade(read_image(p), qf, args.subsample))
        rows.append((p.stem + ".png", qf))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["filename", "qf"])
        w.writerows(rows)
    print(f"degraded {len(rows)} image(s) into {out}")


def cmd_train_ae(args):
    cfg = _config(args, "autoencoder")
    index = ingest(args.data, cfg.data.min_size) if args.data else None
    _write_run(train.train_autoencoder(cfg, index, args.out), args.out)


def cmd_train_prior(args):
    cfg = _config(args, "prior")
    index = ingest(args.data, cfg.data.min_size) if args.data else None
    ae, _ = train.load_autoencoder(args.ae)
    captions = load_caption_file(args.captions, _provider(cfg)) if args.captions else None
    _write_run(train.train_prior(cfg, index, ae, captions, _provider(cfg), args.out), args.out)


def cmd_train_saipe(args):
    cfg = _config(args, "saipe")
    index = ingest(args.data, cfg.data.min_size)
    captions = load_caption_file(args.manifest, _provider(cfg))
    _write_run(train.run_stage1(cfg, index, captions, args.out, resume=args.resume), args.out)


def cmd_train_sodiff(args):
    cfg = _config(args, "sodiff")
    index = ingest(args.data, cfg.data.min_size)
    ae, ae_h = train.load_autoencoder(_ckpt(args, "ae"))
    unet, prior_h = train.load_prior(_ckpt(args, "prior"))
    saipe, saipe_h = train.load_saipe(_ckpt(args, "saipe"))
    captions = load_caption_file(args.captions, _provider(cfg)) if args.captions else None
    upstream = {"autoencoder": ae_h["config_hash"], "prior": prior_h["config_hash"], "saipe": saipe_h["config_hash"]}
    cfg.autoencoder, cfg.unet, cfg.saipe = ae.cfg, unet.cfg, saipe.cfg
    result = train.run_stage2(cfg, index, ae, saipe, unet, captions, args.out, resume=args.resume, upstream_hashes=upstream)
    _write_run(result, args.out)


def cmd_train_qf(args):
    cfg = _config(args, "qf")
    index = ingest(args.data, cfg.data.min_size)
    _write_run(train.train_qf_predictor(cfg, index, args.out), args.out)


def _load_restorer(args):
    return train.load_sodiff(_ckpt(args, "sodiff"), _ckpt(args, "ae"), _ckpt(args, "prior"), _ckpt(args, "saipe"))


def _pad4(im):
    h, w = im.shape[:2]
    return np.pad(im, ((0, (-h) % 4), (0, (-w) % 4), (0, 0)), mode="edge"), h, w


def cmd_infer(args):
    model = _load_restorer(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n = 0
    for p in _images_in(args.inp):
        im, h, w = _pad4(read_image(p))
        restored = to_numpy(model.enhance(to_tensor([im])))[0][:h, :w]
        write_png(out / (p.stem + ".png"), restored)
        n += 1
    print(f"restored {n} image(s) into {out}")


def cmd_evaluate(args):
    qf_list = [int(q) for q in args.qf.split(",")]
    index = ingest(args.data, min_size=4)
    if args.restorer == "identity":
        restorer, name = identity_restorer, "identity"
    else:
        restorer, name = _load_restorer(args).enhance, "SODiff"
    report = evaluate(restorer, index, qf_list, batch=1, name=name)
    md, cs = report.write(args.out)
    print(report.to_markdown())
    print(f"wrote {md} and {cs}")


def cmd_predict_qf(args):
    header = read_header(args.ckpt)
    if header["kind"] == "predictor":
        model, _ = train.load_predictor(args.ckpt)
        T_max = 1000
    elif header["kind"] == "sodiff":
        from .config import config_from_dict
        from .time_predictor import PredictorConfig, TimePredictor

        _, state = load_checkpoint(args.ckpt, "sodiff")
        cfg = config_from_dict(header["train_config"])
        if "predictor" not in state:
            raise SystemExit("this SODiff checkpoint was trained without a time predictor")
        model = TimePredictor(PredictorConfig(**header["config"]["predictor"]))
        model.load_state_dict(state["predictor"])
        model.eval()
        T_max = cfg.schedule.T_max
    else:
        raise SystemExit(f"{args.ckpt}: expected a predictor or sodiff checkpoint, found {header['kind']!r}")
    rows = []
    with torch.no_grad():
        for p in _images_in(args.inp):
            out = model(to_tensor([read_image(p)]), stochastic=False)
            tau = bins_to_timestep(out.tau_pred, model.cfg.T_bins, T_max)
            rows.append((p.name, float(out.qf_pred), float(out.tau_pred), float(tau)))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(["filename", "qf_pred", "tau_pred_bins", "tau_pred"])
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()


def cmd_show_config(args):
    cfg = _config(args, args.stage)
    if args.out:
        save_config(cfg, args.out)
    else:
        import yaml

        from .config import config_to_dict

        print(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sodiff", description="One-step diffusion JPEG artifact removal (toy scale).")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML/JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override, e.g. --set lr=1e-4")
        return p

    def with_ckpts(p):
        p.add_argument("--ckpt-dir", help=f"directory holding {', '.join(CKPT_NAMES.values())}")
        for key in CKPT_NAMES:
            p.add_argument(f"--{key}", help=f"{key} checkpoint (overrides --ckpt-dir)")
        return p

    p = sub.add_parser("synth", help="write a synthetic captioned image corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("degrade", help="JPEG-degrade a directory of images")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--qf", required=True, help="INT or LO-HI (one uniform draw per image)")
    p.add_argument("--subsample", choices=["444", "420"], default="444")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_degrade)

    p = with_config(sub.add_parser("train-ae", help="pre-train the autoencoder"))
    p.add_argument("--data")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_ae)

    p = with_config(sub.add_parser("train-prior", help="pre-train the base UNet denoiser"))
    p.add_argument("--data")
    p.add_argument("--captions")
    p.add_argument("--ae", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_prior)

    p = with_config(sub.add_parser("train-saipe", help="stage 1: train SAIPE"))
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", "--captions", dest="manifest", required=True, help="caption file (id<TAB>caption)")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_saipe)

    p = with_ckpts(with_config(sub.add_parser("train-sodiff", help="stage 2: train LoRA + time predictor")))
    p.add_argument("--data", required=True)
    p.add_argument("--captions")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--out", required=True)
    p.add_argument("--resume")
    p.set_defaults(func=cmd_train_sodiff)

    p = with_config(sub.add_parser("train-qf", help="train the QF/timestep predictor alone"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_qf)

    p = with_ckpts(sub.add_parser("infer", help="restore a directory of JPEG-degraded images"))
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = with_ckpts(sub.add_parser("evaluate", help="degrade, restore and score a test set"))
    p.add_argument("--data", required=True)
    p.add_argument("--qf", default="5,10,20")
    p.add_argument("--restorer", choices=["sodiff", "identity"], default="sodiff")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict-qf", help="per-image (qf_pred, tau_pred) CSV")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict_qf)

    p = with_config(sub.add_parser("show-config", help="print the resolved config for a stage"))
    p.add_argument("--stage", default="sodiff")
    p.add_argument("--ablation", choices=ABLATIONS)
    p.add_argument("--out")
    p.set_defaults(func=cmd_show_config)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
