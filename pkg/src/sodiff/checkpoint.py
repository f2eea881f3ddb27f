"""Single-file module checkpoints: a zip holding ``header.json`` and ``state.pt``."""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import torch

from .config import config_hash

__all__ = ["IncompatibleCheckpointError", "save_checkpoint", "load_checkpoint", "read_header", "FORMAT_VERSION"]

FORMAT_VERSION = 1


class IncompatibleCheckpointError(ValueError):
    pass


def save_checkpoint(path, kind: str, module_config, state: dict, extra: dict | None = None) -> dict:
    """Write ``state`` (anything ``torch.save`` accepts) with a JSON header.

    The header records ``kind``, the module config and its hash, plus ``extra``.
    Returns the header.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    from .config import config_to_dict

    cfg_dict = config_to_dict(module_config) if hasattr(module_config, "__dataclass_fields__") else module_config
    header = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "config": cfg_dict,
        "config_hash": config_hash(cfg_dict),
        **(extra or {}),
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2, sort_keys=True))
        zf.writestr("state.pt", buf.getvalue())
    tmp.replace(path)
    return header


def read_header(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("header.json"))


def load_checkpoint(path, kind: str | None = None, expect_hash: str | None = None) -> tuple[dict, dict]:
    """Return ``(header, state)``; checks kind and (optionally) the config hash."""
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            state = torch.load(io.BytesIO(zf.read("state.pt")), map_location="cpu", weights_only=False)
    except (zipfile.BadZipFile, KeyError) as exc:
        raise IncompatibleCheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    if header.get("format") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(f"{path}: format {header.get('format')} != {FORMAT_VERSION}")
    if kind is not None and header.get("kind") != kind:
        raise IncompatibleCheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    if expect_hash is not None and header.get("config_hash") != expect_hash:
        raise IncompatibleCheckpointError(
            f"{path}: config hash {header.get('config_hash')} does not match expected {expect_hash}"
        )
    return header, state
