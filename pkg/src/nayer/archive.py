"""Versioned parameter archive used by every checkpoint in the project.

An archive is a single file holding a format-version integer, a flat map of
named tensors, and a JSON-compatible metadata dict. Loading a file whose
version differs from ``FORMAT_VERSION`` fails loudly; see
``docs/checkpoint-format.md`` for the on-disk layout.
"""

from __future__ import annotations

import torch

from .errors import ArchiveError

FORMAT_VERSION = 1
_MAGIC = "nayer-archive"


def save_archive(path: str, arrays: dict[str, torch.Tensor], meta: dict) -> None:
    payload = {
        "magic": _MAGIC,
        "format_version": FORMAT_VERSION,
        "arrays": {name: t.detach().cpu() for name, t in arrays.items()},
        "meta": meta,
    }
    torch.save(payload, path)


def load_archive(path: str) -> tuple[dict[str, torch.Tensor], dict]:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise ArchiveError(f"archive not found: {path}") from None
    except Exception as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != _MAGIC:
        raise ArchiveError(f"{path} is not a parameter archive")
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"{path}: format version {version} != supported {FORMAT_VERSION}")
    return payload["arrays"], payload["meta"]
