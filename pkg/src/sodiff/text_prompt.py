"""Text-prompt embeddings used as alignment targets for the image prompt.

Two providers share one interface: a hashed-token toy embedder with no
external dependencies, and a reader for embeddings precomputed by any real
text encoder (raw array + JSON sidecar).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "CaptionRecord",
    "CaptionFileError",
    "MissingCaptionsError",
    "HashTokenProvider",
    "PrecomputedProvider",
    "normalize_caption",
    "embed_text",
    "load_caption_file",
    "require_captions",
    "save_precomputed",
]


class CaptionFileError(ValueError):
    pass


class MissingCaptionsError(KeyError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__(f"missing captions for {len(self.missing)} image(s): {', '.join(self.missing)}")


@dataclass(frozen=True)
class CaptionRecord:
    image_id: str
    caption: str
    embedding: np.ndarray


def normalize_caption(caption: str) -> str:
    """Trim, lowercase and collapse internal whitespace."""
    return " ".join(caption.strip().lower().split())


class HashTokenProvider:
    """Deterministic toy text embedder.

    Each whitespace token is hashed (blake2b, so independent of
    ``PYTHONHASHSEED``) into a row of a seeded Gaussian table. Output is
    ``[BOS, tok_1, ..., tok_k, PAD, ...]`` with ``length`` rows; PAD is the
    zero vector and captions longer than ``length - 1`` tokens are truncated.
    """

    def __init__(self, dim: int = 64, length: int = 77, vocab: int = 4096, seed: int = 0):
        if dim < 1 or length < 2 or vocab < 1:
            raise ValueError("dim, vocab must be >= 1 and length >= 2")
        self.dim, self.length, self.vocab, self.seed = dim, length, vocab, seed
        rng = np.random.default_rng(seed)
        self.table = rng.standard_normal((vocab, dim)).astype(np.float32)
        self.bos = rng.standard_normal(dim).astype(np.float32)
        self.pad = np.zeros(dim, dtype=np.float32)

    def token_index(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.vocab

    def embed(self, image_id: str | None, caption: str) -> np.ndarray:
        text = normalize_caption(caption)
        if not text:
            raise ValueError("caption is empty after normalization")
        tokens = text.split()[: self.length - 1]
        out = np.tile(self.pad, (self.length, 1))
        out[0] = self.bos
        for k, tok in enumerate(tokens, start=1):
            out[k] = self.table[self.token_index(tok)]
        return out

    def __call__(self, caption: str) -> np.ndarray:
        return self.embed(None, caption)


class PrecomputedProvider:
    """Embeddings stored as ``<name>.bin`` + ``<name>.json``.

    The sidecar holds ``{"shape": [N, L, D], "dtype": "float32", "ids": [...]}``;
    row ``k`` of the array belongs to ``ids[k]``.
    """

    def __init__(self, path):
        path = Path(path)
        bin_path = path.with_suffix(".bin")
        meta = json.loads(path.with_suffix(".json").read_text())
        shape = tuple(int(s) for s in meta["shape"])
        if len(shape) != 3:
            raise ValueError(f"precomputed embeddings must be N×L×D, sidecar says {shape}")
        data = np.fromfile(bin_path, dtype=np.dtype(meta["dtype"]))
        if data.size != int(np.prod(shape)):
            raise ValueError(f"{bin_path}: {data.size} values, sidecar shape {shape}")
        self.data = data.reshape(shape)
        ids = list(meta["ids"])
        if len(ids) != shape[0] or len(set(ids)) != len(ids):
            raise ValueError("sidecar ids must be unique and match the leading dimension")
        self._row = {i: k for k, i in enumerate(ids)}
        self.length, self.dim = shape[1], shape[2]

    def embed(self, image_id: str | None, caption: str) -> np.ndarray:
        if image_id not in self._row:
            raise KeyError(f"no precomputed embedding for image id {image_id!r}")
        return np.array(self.data[self._row[image_id]], dtype=np.float32)


def save_precomputed(path, embeddings: dict[str, np.ndarray]) -> None:
    path = Path(path)
    ids = list(embeddings)
    arr = np.stack([np.asarray(embeddings[i], dtype=np.float32) for i in ids])
    arr.tofile(path.with_suffix(".bin"))
    meta = {"shape": list(arr.shape), "dtype": "float32", "ids": ids}
    path.with_suffix(".json").write_text(json.dumps(meta, indent=1))


_DEFAULT = HashTokenProvider()


def embed_text(caption: str, provider=None) -> np.ndarray:
    return (provider or _DEFAULT).embed(None, caption)


def load_caption_file(path, provider=None) -> dict[str, CaptionRecord]:
    """Parse ``image_id<TAB>caption`` lines into embedded caption records."""
    provider = provider or _DEFAULT
    records: dict[str, CaptionRecord] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
                raise CaptionFileError(f"{path}:{lineno}: expected 'image_id<TAB>caption'")
            image_id, caption = parts[0].strip(), parts[1]
            if image_id in records:
                raise CaptionFileError(f"{path}:{lineno}: duplicate image id {image_id!r}")
            records[image_id] = CaptionRecord(image_id, caption, provider.embed(image_id, caption))
    return records


def require_captions(records: dict, image_ids) -> None:
    missing = [i for i in image_ids if i not in records]
    if missing:
        raise MissingCaptionsError(missing)
