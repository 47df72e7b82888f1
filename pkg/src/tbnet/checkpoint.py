"""Checkpoint archive: one .npz mapping slash-separated names to arrays.

Naming scheme: ``model/<stream>/<block>/<layer>/<tensor>`` for network
tensors (parameters and batch-norm buffers), ``opt/...`` for optimizer
accumulators, ``meta/...`` for scalars and RNG state, and three text
entries (``config``, ``flags``, ``taxonomy``) so a checkpoint is
self-describing. Loading is name-based.
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
import torch

from .core import ConfigError


def _to_archive_key(name: str, prefix: str) -> str:
    return f"{prefix}/{name.replace('.', '/')}"


def _from_archive_key(key: str, prefix: str) -> str:
    return key[len(prefix) + 1 :].replace("/", ".")


def write_archive(
    path: str | os.PathLike,
    model_state: dict[str, torch.Tensor],
    opt_state: dict[str, torch.Tensor],
    meta: dict[str, np.ndarray],
    texts: dict[str, str],
) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, tensor in model_state.items():
        arrays[_to_archive_key(name, "model")] = tensor.detach().cpu().numpy()
    for name, tensor in opt_state.items():
        arrays[_to_archive_key(name, "opt")] = tensor.detach().cpu().numpy()
    for name, value in meta.items():
        arrays[f"meta/{name}"] = np.asarray(value)
    for name, text in texts.items():
        arrays[f"text/{name}"] = np.asarray(text)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_archive(path: str | os.PathLike):
    """Return (model_state, opt_state, meta, texts) dicts keyed by dotted names."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint {path} does not exist")
    with np.load(path, allow_pickle=False) as archive:
        model_state: dict[str, torch.Tensor] = {}
        opt_state: dict[str, torch.Tensor] = {}
        meta: dict[str, np.ndarray] = {}
        texts: dict[str, str] = {}
        for key in archive.files:
            value = archive[key]
            if key.startswith("model/"):
                model_state[_from_archive_key(key, "model")] = torch.from_numpy(value)
            elif key.startswith("opt/"):
                opt_state[_from_archive_key(key, "opt")] = torch.from_numpy(value)
            elif key.startswith("meta/"):
                meta[key[len("meta/") :]] = value
            elif key.startswith("text/"):
                texts[key[len("text/") :]] = str(value)
    return model_state, opt_state, meta, texts


def archive_parameter_names(path: str | os.PathLike) -> list[str]:
    """Slash-separated model tensor names stored in a checkpoint."""
    with np.load(Path(path), allow_pickle=False) as archive:
        return sorted(k[len("model/") :] for k in archive.files if k.startswith("model/"))
