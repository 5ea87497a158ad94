"""Seed derivation and parameter fingerprinting helpers."""

from __future__ import annotations

import hashlib

import torch


def stable_seed(*parts: object) -> int:
    """Collapse a path of ints/strings into a 63-bit seed.

    The mapping is a pure function of the parts, so any draw site can be
    re-derived after a resume without serializing RNG state.
    """
    joined = "/".join(str(p) for p in parts)
    digest = hashlib.blake2b(joined.encode(), digest_size=8).digest()
    return int.from_bytes(digest, "big") >> 1


def generator_from(*parts: object) -> torch.Generator:
    """CPU torch.Generator seeded from a stable seed path."""
    g = torch.Generator()
    g.manual_seed(stable_seed(*parts))
    return g


def params_fingerprint(module: torch.nn.Module) -> str:
    """SHA-256 over the module's full state dict (parameters and buffers)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(str(tuple(tensor.shape)).encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def tensor_fingerprint(tensor: torch.Tensor) -> str:
    h = hashlib.sha256()
    h.update(str(tuple(tensor.shape)).encode())
    h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
