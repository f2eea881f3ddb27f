"""Image I/O, procedural toy corpora and the crop/flip/degrade sample stream."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .jpeg_codec import degrade

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".webp"}


def read_image(path) -> np.ndarray:
    """Read any PIL-readable file as float64 H×W×3 RGB in [0, 1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def write_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def to_tensor(images) -> torch.Tensor:
    """H×W×3 array (or list of them) -> float32 N×3×H×W tensor."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(im) for im in images]).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr)).float()


def to_numpy(batch: torch.Tensor) -> np.ndarray:
    """N×3×H×W tensor -> float64 N×H×W×3 array."""
    return batch.detach().cpu().double().numpy().transpose(0, 2, 3, 1)


# --------------------------------------------------------------------------
# procedural corpus


def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.random((cells, cells, 3))
    img = Image.fromarray((coarse * 255).astype(np.uint8), mode="RGB")
    img = img.resize((size, size), Image.BICUBIC)
    return np.asarray(img, dtype=np.float64) / 255.0


_COLOR_NAMES = {
    "red": (0.85, 0.1, 0.1),
    "green": (0.15, 0.7, 0.2),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.9, 0.85, 0.15),
    "cyan": (0.15, 0.8, 0.85),
    "magenta": (0.8, 0.15, 0.75),
    "orange": (0.95, 0.55, 0.1),
    "purple": (0.45, 0.2, 0.6),
    "white": (0.95, 0.95, 0.95),
    "black": (0.05, 0.05, 0.05),
    "gray": (0.5, 0.5, 0.5),
    "pink": (0.95, 0.6, 0.7),
    "brown": (0.5, 0.3, 0.15),
}
_SHAPE_NAMES = ("circle", "rectangle", "edge")


def color_name(rgb) -> str:
    names = list(_COLOR_NAMES)
    ref = np.array([_COLOR_NAMES[n] for n in names])
    return names[int(np.argmin(((ref - np.asarray(rgb)) ** 2).sum(axis=1)))]


def synthetic_sample(rng: np.random.Generator, size: int = 64) -> tuple[np.ndarray, str]:
    """A toy "natural" image and a caption describing what was drawn.

    Smooth background, soft-edged shapes, optional stripes, band-limited texture.
    """
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = 0.35 + 0.4 * _smooth_field(rng, size, int(rng.integers(2, 5)))
    words = [color_name(img.mean(axis=(0, 1))), "background"]

    for _ in range(int(rng.integers(2, 6))):
        color = rng.random(3)
        softness = rng.uniform(0.004, 0.04)
        kind = int(rng.integers(0, 3))
        cx, cy = rng.random(2)
        if kind == 0:
            r = rng.uniform(0.08, 0.3)
            d = np.sqrt((xx - cx) ** 2 + (yy - cy) ** 2) - r
        elif kind == 1:
            hw, hh = rng.uniform(0.06, 0.3, size=2)
            d = np.maximum(np.abs(xx - cx) - hw, np.abs(yy - cy) - hh)
        else:
            theta = rng.uniform(0, np.pi)
            d = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        mask = 1.0 / (1.0 + np.exp(d / softness))
        img = img * (1 - mask[..., None]) + color * mask[..., None]
        words += [color_name(color), _SHAPE_NAMES[kind]]

    if rng.random() < 0.5:
        freq = rng.uniform(3, 10)
        theta = rng.uniform(0, np.pi)
        phase = (xx * np.cos(theta) + yy * np.sin(theta)) * freq * 2 * np.pi
        img = img + 0.08 * np.sin(phase)[..., None] * rng.random(3)
        words.append("stripes")

    amount = rng.uniform(0.0, 0.12)
    texture = _smooth_field(rng, size, size // 4) - 0.5
    img = img + amount * texture
    words.append("textured" if amount > 0.06 else "smooth")
    return np.clip(img, 0.0, 1.0), " ".join(words)


def synthetic_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    return synthetic_sample(rng, size)[0]


def synthetic_corpus(n: int, size: int = 64, seed: int = 0, captions: bool = False):
    """Deterministic list of ``n`` synthetic images; image k depends only on (seed, k).

    With ``captions=True`` returns ``(images, captions)``.
    """
    samples = [synthetic_sample(np.random.default_rng([seed, k]), size) for k in range(n)]
    images = [s[0] for s in samples]
    if captions:
        return images, [s[1] for s in samples]
    return images


def write_captions(path, ids, captions) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, c in zip(ids, captions):
            fh.write(f"{i}\t{c}\n")


def write_corpus(directory, images, prefix: str = "img") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, im in enumerate(images):
        p = directory / f"{prefix}_{k:04d}.png"
        write_png(p, im)
        paths.append(p)
    return paths


# --------------------------------------------------------------------------
# dataset index


class NoUsableImagesError(ValueError):
    pass


@dataclass
class SampleIndex:
    """Usable image files plus the number skipped while scanning."""

    paths: list[Path]
    skipped: int = 0
    images: list[np.ndarray] = field(default_factory=list, repr=False)

    def __len__(self) -> int:
        return len(self.paths)

    @property
    def ids(self) -> list[str]:
        return [p.stem for p in self.paths]


def ingest(dataset_dir, min_size: int = 64, preload: bool = True) -> SampleIndex:
    """Scan ``dataset_dir`` for readable images at least ``min_size`` on each side."""
    dataset_dir = Path(dataset_dir)
    if not dataset_dir.is_dir():
        raise NoUsableImagesError(f"no usable images: {dataset_dir} is not a directory")
    paths, images, skipped = [], [], 0
    for p in sorted(dataset_dir.iterdir()):
        if p.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            im = read_image(p)
        except Exception:  # corrupt file: PIL raises a zoo of types
            skipped += 1
            continue
        if min(im.shape[:2]) < min_size:
            skipped += 1
            continue
        paths.append(p)
        if preload:
            images.append(im)
    if skipped:
        logger.warning("ingest: skipped %d undersized or unreadable file(s) in %s", skipped, dataset_dir)
    if not paths:
        raise NoUsableImagesError(f"no usable images in {dataset_dir}")
    return SampleIndex(paths=paths, skipped=skipped, images=images)


def random_crop(image: np.ndarray, crop: int, rng: np.random.Generator, flip: bool = True) -> np.ndarray:
    h, w = image.shape[:2]
    top = int(rng.integers(0, h - crop + 1))
    left = int(rng.integers(0, w - crop + 1))
    out = image[top : top + crop, left : left + crop]
    if flip and rng.random() < 0.5:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def sample_qf(rng: np.random.Generator, qf_range, mode: str = "uniform") -> int:
    """Draw one integer QF from the inclusive range.

    ``stratified`` picks one of five equal-width bands first, then a value in it,
    which flattens the distribution when the range is later narrowed.
    """
    lo, hi = int(qf_range[0]), int(qf_range[1])
    if mode == "uniform":
        return int(rng.integers(lo, hi + 1))
    if mode == "stratified":
        edges = np.linspace(lo, hi + 1, 6)
        band = int(rng.integers(0, 5))
        return int(rng.integers(int(edges[band]), max(int(edges[band + 1]), int(edges[band]) + 1)))
    raise ValueError(f"unknown qf sampling mode {mode!r}")


@dataclass
class Batch:
    ids: list[str]
    hq: torch.Tensor
    lq: torch.Tensor
    qf: torch.Tensor


def make_batch(
    index: SampleIndex,
    positions,
    rng: np.random.Generator,
    crop: int,
    qf_range=(5, 95),
    flip: bool = True,
    subsample: str = "444",
    qf_mode: str = "uniform",
    fixed_qf: int | None = None,
) -> Batch:
    """Crop, flip and JPEG-degrade the images at ``positions`` on the fly."""
    hqs, lqs, qfs, ids = [], [], [], []
    for pos in positions:
        im = index.images[pos] if index.images else read_image(index.paths[pos])
        hq = random_crop(im, crop, rng, flip=flip)
        qf = fixed_qf if fixed_qf is not None else sample_qf(rng, qf_range, qf_mode)
        hqs.append(hq)
        lqs.append(degrade(hq, qf, subsample))
        qfs.append(qf)
        ids.append(index.paths[pos].stem)
    return Batch(ids=ids, hq=to_tensor(hqs), lq=to_tensor(lqs), qf=torch.tensor(qfs, dtype=torch.float32))


def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    """Per-step generator: a resumed run draws exactly what an uninterrupted one would."""
    return np.random.default_rng([seed, stream, step])


def step_torch_gen(seed: int, step: int, stream: int = 0) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(np.random.SeedSequence([seed, stream, step]).generate_state(1, dtype=np.uint64)[0] >> 1))
    return g
