import dataclasses
import math

import numpy as np
import pytest
import torch

from conftest import TINY_MODULES
from sodiff.checkpoint import IncompatibleCheckpointError, read_header
from sodiff.config import ABLATIONS, apply_ablation, default_config
from sodiff.evaluate import EvalReport, evaluate, identity_restorer, perfect_restorer
from sodiff.text_prompt import MissingCaptionsError
from sodiff import train


def tiny(stage, **kw):
    cfg = default_config(stage, **TINY_MODULES)
    cfg.data = dataclasses.replace(cfg.data, crop=32)
    cfg.batch = 2
    cfg.log_every = 1
    for k, v in kw.items():
        setattr(cfg, k, v)
    return cfg


@pytest.fixture(scope="module")
def stack(tiny_dataset, tmp_path_factory):
    """Briefly trained AE, prior and SAIPE checkpoints on the tiny corpus."""
    root, index, records = tiny_dataset
    out = tmp_path_factory.mktemp("stack")
    ae = train.train_autoencoder(tiny("autoencoder", iters=3), index, out / "autoencoder.ckpt")
    prior = train.train_prior(tiny("prior", iters=2), index, ae.model, records, out=out / "prior.ckpt")
    s1 = train.run_stage1(tiny("saipe", iters=2), index, records, out / "saipe.ckpt")
    return out, ae.model, prior.model, s1.model


def stage2(stack, tiny_dataset, **kw):
    _, index, records = tiny_dataset
    _, ae, unet, saipe = stack
    cfg = tiny("sodiff", iters=kw.pop("iters", 3), **kw)
    return cfg, lambda c=cfg, **more: train.run_stage2(c, index, ae, saipe, unet, records, **more)


def test_autoencoder_latent_scale(stack, tiny_dataset):
    _, index, _ = tiny_dataset
    ae = stack[1]
    x = torch.from_numpy(np.stack(index.images[:4])).permute(0, 3, 1, 2).float()
    z = ae.encode(x)
    assert z.shape == (4, 4, 16, 16)
    assert 0.5 < float(z.std()) < 2.0


def test_stage1_lambda_zero_logs_align_but_ignores_it(tiny_dataset):
    _, index, records = tiny_dataset
    a = train.run_stage1(tiny("saipe", iters=3), index, records)
    cfg = tiny("saipe", iters=3)
    cfg.saipe = dataclasses.replace(cfg.saipe, lambda_align=0.0)
    b = train.run_stage1(cfg, index, records)
    assert all(math.isfinite(r["align"]) and r["align"] > 0 for r in b.log)
    assert all(r["total"] == r["rec"] for r in b.log)
    # the first step is identical; later steps differ because λ changed the gradient
    assert a.log[0]["rec"] == b.log[0]["rec"]
    assert a.log[-1]["rec"] != b.log[-1]["rec"]


def test_stage1_missing_captions(tiny_dataset):
    _, index, records = tiny_dataset
    partial = dict(list(records.items())[:-1])
    with pytest.raises(MissingCaptionsError):
        train.run_stage1(tiny("saipe", iters=1), index, partial)


def test_stage1_rejects_shape_mismatch(tiny_dataset):
    _, index, records = tiny_dataset
    cfg = tiny("saipe", iters=1)
    cfg.saipe = dataclasses.replace(cfg.saipe, query_count=16)
    with pytest.raises(ValueError, match="query_count"):
        train.run_stage1(cfg, index, records)


def test_stage1_resume_matches_uninterrupted(tiny_dataset, tmp_path):
    _, index, records = tiny_dataset
    cfg = tiny("saipe", iters=4)
    full = train.run_stage1(cfg, index, records)
    train.run_stage1(cfg, index, records, out=tmp_path / "half.ckpt", stop_at=2)
    resumed = train.run_stage1(cfg, index, records, resume=tmp_path / "half.ckpt")
    assert [r["total"] for r in resumed.log] == [r["total"] for r in full.log]


@pytest.mark.parametrize("schedule", ["constant", "onecycle"])
def test_stage2_resume_matches_uninterrupted(stack, tiny_dataset, tmp_path, schedule):
    cfg, run = stage2(stack, tiny_dataset, iters=4, lr_schedule=schedule)
    full = run()
    run(out=tmp_path / "half.ckpt", stop_at=2)
    resumed = run(resume=tmp_path / "half.ckpt")
    assert resumed.log == full.log


def test_stage2_only_trains_lora_predictor_disc(stack, tiny_dataset):
    _, run = stage2(stack, tiny_dataset)
    res = run()
    assert res.extra["frozen_before"] == res.extra["frozen_after"]
    assert res.extra["disc_checksum_before"] != res.extra["disc_checksum_after"]
    assert res.extra["disc_steps"] == 3
    keys = {"step", "total", "recon", "mse", "ea_edge", "ea_img", "G", "D", "qf", "alpha", "beta", "tau", "qf_pred", "temperature"}
    assert all(set(r) == keys for r in res.log)


def test_frozen_drift_is_caught(stack, tiny_dataset, monkeypatch):
    _, index, records = tiny_dataset
    saipe = train.load_saipe(stack[0] / "saipe.ckpt")[0]
    stack = (stack[0], stack[1], stack[2], saipe)  # private copy to corrupt
    cfg = tiny("sodiff", iters=3, checksum_every=1)
    run = lambda: train.run_stage2(cfg, index, stack[1], saipe, stack[2], records)
    real = train.recon_loss

    def sabotage(x, y, **kw):
        with torch.no_grad():
            next(stack[3].parameters()).add_(1e-3)
        return real(x, y, **kw)

    monkeypatch.setattr(train, "recon_loss", sabotage)
    with pytest.raises(train.FrozenDriftError, match="saipe"):
        run()


@pytest.mark.parametrize("name", ABLATIONS)
def test_ablations_run(stack, tiny_dataset, name):
    cfg, _ = stage2(stack, tiny_dataset, iters=2)
    cfg = apply_ablation(cfg, name)
    _, index, records = tiny_dataset
    res = train.run_stage2(cfg, index, stack[1], stack[3], stack[2], records)
    assert len(res.log) == 2 and all(math.isfinite(r["total"]) for r in res.log)
    if name == "wo_gan":
        assert res.extra["disc_steps"] == 0
        assert res.extra["disc_checksum_before"] == res.extra["disc_checksum_after"]
        assert all(r["G"] == 0 for r in res.log)
    if name == "wo_tp":
        assert res.model.predictor is None and all(r["tau"] == 500 for r in res.log)
    if name == "wo_qf":
        assert all(r["beta"] == 0 for r in res.log)


def test_text_prompt_needs_captions(stack, tiny_dataset):
    _, index, _ = tiny_dataset
    cfg = apply_ablation(tiny("sodiff", iters=1), "text_prompt")
    with pytest.raises(ValueError, match="caption"):
        train.run_stage2(cfg, index, stack[1], stack[3], stack[2], None)


def test_sodiff_checkpoint_round_trip(stack, tiny_dataset, tmp_path):
    out = stack[0]
    _, run = stage2(stack, tiny_dataset, iters=2)
    res = run(out=tmp_path / "sodiff.ckpt")
    header = read_header(tmp_path / "sodiff.ckpt")
    assert set(header["requires"]) == {"autoencoder", "prior", "saipe"}
    model = train.load_sodiff(tmp_path / "sodiff.ckpt", out / "autoencoder.ckpt", out / "prior.ckpt", out / "saipe.ckpt")
    lq = torch.rand(2, 3, 32, 32)
    assert torch.equal(model.enhance(lq), res.model.enhance(lq))


def test_sodiff_refuses_foreign_checkpoint(stack, tiny_dataset, tmp_path):
    out = stack[0]
    _, index, records = tiny_dataset
    cfg = tiny("saipe", iters=1)
    cfg.saipe = dataclasses.replace(cfg.saipe, feat_channels=24)
    train.run_stage1(cfg, index, records, tmp_path / "other_saipe.ckpt")
    _, run = stage2(stack, tiny_dataset, iters=1)
    run(out=tmp_path / "sodiff.ckpt")
    with pytest.raises(IncompatibleCheckpointError, match="saipe"):
        train.load_sodiff(tmp_path / "sodiff.ckpt", out / "autoencoder.ckpt", out / "prior.ckpt", tmp_path / "other_saipe.ckpt")
    with pytest.raises(IncompatibleCheckpointError):
        train.load_sodiff(out / "saipe.ckpt", out / "autoencoder.ckpt", out / "prior.ckpt", out / "saipe.ckpt")


def test_qf_predictor_trains(tiny_dataset, tmp_path):
    _, index, _ = tiny_dataset
    cfg = tiny("qf", iters=3)
    cfg.predictor = TINY_MODULES["predictor"]
    res = train.train_qf_predictor(cfg, index, tmp_path / "qf.ckpt")
    model, header = train.load_predictor(tmp_path / "qf.ckpt")
    assert header["kind"] == "predictor" and len(res.log) == 3


def test_write_log(tmp_path):
    train.write_log([{"step": 0, "a": 0.1}, {"step": 1, "a": 0.2, "b": 1.0}], tmp_path / "log.csv")
    assert (tmp_path / "log.csv").read_text().splitlines() == ["step,a,b", "0,0.1,", "1,0.2,1.0"]


# ---------------------------------------------------------------- evaluation


def test_evaluate_identity_and_perfect(tiny_dataset):
    _, index, _ = tiny_dataset
    ident = evaluate(identity_restorer, index, (10, 50), batch=4)
    assert len(ident.rows) == 2 * len(index)
    for q in (10, 50):
        assert ident.aggregate(q) == ident.aggregate(q, "lq")
    assert ident.aggregate(10)["psnr"] < ident.aggregate(50)["psnr"]
    perfect = evaluate(perfect_restorer, index, (10,), batch=4)
    agg = perfect.aggregate(10)
    assert agg["psnr"] == math.inf and agg["mse"] == 0 and agg["l1"] == 0 and agg["dists"] < 1e-6


def test_report_files(tiny_dataset, tmp_path):
    _, index, _ = tiny_dataset
    rep = evaluate(identity_restorer, index.images[:2], (5, 20), ids=["a", "b"], name="Identity")
    md, cs = rep.write(tmp_path)
    lines = md.read_text().splitlines()
    assert lines[0].startswith("| Method | QF5 PSNR") and lines[2].startswith("| JPEG") and lines[3].startswith("| Identity")
    assert len(cs.read_text().splitlines()) == 1 + 4


def test_aggregate_is_mean():
    from sodiff.evaluate import EvalRow

    row = lambda i, v: EvalRow(str(i), 10, {"psnr": v, "mse": v, "dists": v, "l1": v}, {"psnr": 0, "mse": 0, "dists": 0, "l1": 0})
    rep = EvalReport([row(0, 1.0), row(1, 3.0)], (10,))
    assert rep.aggregate(10)["psnr"] == 2.0
    with pytest.raises(ValueError):
        rep.aggregate(20)
