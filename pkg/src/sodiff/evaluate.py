"""Evaluation: degrade at each QF, restore, score; Markdown + CSV reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .data import SampleIndex, to_tensor
from .jpeg_codec import degrade
from .losses import DistsLite, dists

__all__ = ["METRICS", "EvalRow", "EvalReport", "evaluate", "psnr", "identity_restorer", "perfect_restorer"]

METRICS = ("psnr", "mse", "dists", "l1")

Restorer = Callable[..., torch.Tensor]  # (lq N×3×H×W, reference=hq) -> restored


def psnr(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Per-image PSNR in dB for [0, 1] data; +inf when identical."""
    mse = torch.mean((x.double() - y.double()) ** 2, dim=(1, 2, 3))
    return 10 * torch.log10(1.0 / mse)


def identity_restorer(lq, reference=None):
    return lq


def perfect_restorer(lq, reference=None):
    if reference is None:
        raise ValueError("perfect restorer needs the reference image")
    return reference


def _scores(out: torch.Tensor, hq: torch.Tensor, model: DistsLite) -> dict[str, np.ndarray]:
    o, h = out.double(), hq.double()
    return {
        "psnr": psnr(o, h).numpy(),
        "mse": torch.mean((o - h) ** 2, dim=(1, 2, 3)).numpy(),
        "dists": dists(o, h, model, reduction="none").clamp_min(0).numpy(),
        "l1": torch.mean((o - h).abs(), dim=(1, 2, 3)).numpy(),
    }


@dataclass
class EvalRow:
    image_id: str
    qf: int
    restored: dict[str, float]
    lq: dict[str, float]


@dataclass
class EvalReport:
    rows: list[EvalRow]
    qf_list: tuple[int, ...]
    name: str = "restored"
    meta: dict = field(default_factory=dict)

    def aggregate(self, qf: int | None = None, which: str = "restored") -> dict[str, float]:
        """Mean of each metric over images (optionally one QF)."""
        rows = [r for r in self.rows if qf is None or r.qf == qf]
        if not rows:
            raise ValueError(f"no rows for qf={qf}")
        return {m: float(np.mean([getattr(r, which)[m] for r in rows])) for m in METRICS}

    def per_qf(self, which: str = "restored") -> dict[int, dict[str, float]]:
        return {q: self.aggregate(q, which) for q in self.qf_list}

    def to_markdown(self) -> str:
        """Methods as rows, QF × metric as columns."""
        head = ["Method"] + [f"QF{q} {m.upper()}" for q in self.qf_list for m in METRICS]
        lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
        for label, which in (("JPEG", "lq"), (self.name, "restored")):
            cells = [label]
            for q in self.qf_list:
                agg = self.aggregate(q, which)
                cells += [f"{agg[m]:.4f}" if m != "psnr" else f"{agg[m]:.2f}" for m in METRICS]
            lines.append("| " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "qf"] + list(METRICS) + [f"lq_{m}" for m in METRICS])
            for r in self.rows:
                w.writerow([r.image_id, r.qf] + [repr(r.restored[m]) for m in METRICS] + [repr(r.lq[m]) for m in METRICS])

    def write(self, out_dir) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        md, cs = out_dir / "report.md", out_dir / "report.csv"
        md.write_text(self.to_markdown(), encoding="utf-8")
        self.write_csv(cs)
        return md, cs


def evaluate(
    restorer: Restorer,
    images,
    qf_list=(5, 10, 20),
    ids: list[str] | None = None,
    batch: int = 8,
    subsample: str = "444",
    name: str = "restored",
    dists_model: DistsLite | None = None,
) -> EvalReport:
    """Degrade every image at every QF, restore in batches, score both LQ and output.

    ``images`` is a list of H×W×3 arrays in [0, 1] (equal sizes per batch) or a
    :class:`SampleIndex`. Image sides must suit the restorer (multiples of 4 for SODiff).
    """
    if isinstance(images, SampleIndex):
        ids = ids or images.ids
        images = images.images
    ids = ids or [f"{k:04d}" for k in range(len(images))]
    model = (dists_model or DistsLite()).double()
    rows: list[EvalRow] = []
    for qf in qf_list:
        for start in range(0, len(images), batch):
            chunk = images[start : start + batch]
            hq = to_tensor(chunk)
            lq = to_tensor([degrade(im, int(qf), subsample) for im in chunk])
            with torch.no_grad():
                out = restorer(lq, reference=hq).clamp(0, 1)
            s_out, s_lq = _scores(out, hq, model), _scores(lq, hq, model)
            for k in range(len(chunk)):
                rows.append(
                    EvalRow(
                        ids[start + k],
                        int(qf),
                        {m: float(s_out[m][k]) for m in METRICS},
                        {m: float(s_lq[m][k]) for m in METRICS},
                    )
                )
    return EvalReport(rows, tuple(int(q) for q in qf_list), name)
