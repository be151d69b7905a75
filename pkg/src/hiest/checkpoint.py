"""Checkpoint container.

A checkpoint is an uncompressed ``.npz`` archive.  Every parameter is stored
under its stable name (``input.weight``, ``layer{l}.tcn_filter``,
``layer{l}.gcn``, ``mapping.theta``, ``output.bias``, ...) as a float64 array
of its own shape.  The ``__header__`` entry is a UTF-8 JSON document with

* ``format``: ``"hiest-checkpoint"`` and ``version``: ``1``
* ``config``: every :class:`~hiest.model.HiestConfig` field
* ``extra``: free-form run metadata (standardization statistics, epoch, ...)

Optimizer moments, when saved, live under ``optim.m.<name>`` and
``optim.v.<name>``.  Round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Optional

import numpy as np

from .model import HiestConfig

FORMAT = "hiest-checkpoint"
VERSION = 1


def save_checkpoint(path: str | Path, config: HiestConfig, params: dict[str, np.ndarray],
                    extra: Optional[dict] = None, optimizer: Optional[dict[str, np.ndarray]] = None) -> None:
    header = {"format": FORMAT, "version": VERSION, "config": config.to_dict(), "extra": extra or {}}
    arrays = {name: np.asarray(v, dtype=np.float64) for name, v in params.items()}
    for name, v in (optimizer or {}).items():
        arrays[f"optim.{name}"] = np.asarray(v, dtype=np.float64)
    arrays["__header__"] = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path):
    """Return ``(config, params, extra, optimizer_state)``."""
    with np.load(path, allow_pickle=False) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path} is not a checkpoint (no header)")
        header = json.loads(bytes(z["__header__"]).decode("utf-8"))
        if header.get("format") != FORMAT:
            raise ValueError(f"{path}: unknown format {header.get('format')!r}")
        if header.get("version") != VERSION:
            raise ValueError(f"{path}: unsupported version {header.get('version')}")
        params, optim = {}, {}
        for name in z.files:
            if name == "__header__":
                continue
            if name.startswith("optim."):
                optim[name[len("optim."):]] = z[name].copy()
            else:
                params[name] = z[name].copy()
    return HiestConfig.from_dict(header["config"]), params, header.get("extra", {}), optim
