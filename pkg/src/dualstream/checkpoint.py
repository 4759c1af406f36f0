"""Named-array checkpoint archives.

An archive is an uncompressed ``.npz`` file.  Every entry is a plain numpy
array named by its dotted parameter path (``model.semantic.convs.0.weight``)
plus one reserved entry, ``__header__``, holding UTF-8 JSON with at least::

    {"format": "dualstream-checkpoint", "format_version": 1, "kind": ..., "shapes": {name: [...]}}

Loading never unpickles anything.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from torch import nn

FORMAT = "dualstream-checkpoint"
FORMAT_VERSION = 1
HEADER_KEY = "__header__"


class CheckpointError(ValueError):
    pass


class CheckpointMismatchError(CheckpointError):
    def __init__(self, missing=(), unexpected=(), shape=()):
        parts = []
        if missing:
            parts.append(f"missing arrays: {', '.join(sorted(missing))}")
        if unexpected:
            parts.append(f"unexpected arrays: {', '.join(sorted(unexpected))}")
        if shape:
            parts.append("shape mismatch: " + ", ".join(f"{n} {a} vs {b}" for n, a, b in shape))
        super().__init__("checkpoint does not match architecture; " + "; ".join(parts))
        self.missing, self.unexpected, self.shape = list(missing), list(unexpected), list(shape)


def save_archive(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> Path:
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_suffix(".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: np.asarray(v) for k, v in arrays.items()}
    if HEADER_KEY in arrays:
        raise CheckpointError(f"{HEADER_KEY} is reserved")
    header = {"format": FORMAT, "format_version": FORMAT_VERSION,
              "shapes": {k: list(v.shape) for k, v in arrays.items()}}
    header.update(meta or {})
    blob = np.frombuffer(json.dumps(header).encode("utf-8"), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, **{HEADER_KEY: blob}, **arrays)
    tmp.replace(path)
    return path


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if HEADER_KEY not in data.files:
            raise CheckpointError(f"{path} has no {HEADER_KEY} entry")
        header = json.loads(bytes(data[HEADER_KEY]).decode("utf-8"))
        arrays = {k: data[k] for k in data.files if k != HEADER_KEY}
    if header.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} archive")
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {header.get('format_version')}; "
                              f"this build reads version {FORMAT_VERSION}")
    return arrays, header


def module_arrays(module: nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(module: nn.Module, arrays: Mapping[str, np.ndarray], prefix: str) -> None:
    """Copy ``prefix.*`` arrays into ``module``; any disagreement in names or
    shapes raises :class:`CheckpointMismatchError` naming the arrays."""
    own = module.state_dict()
    want = {f"{prefix}.{k}": v for k, v in own.items()}
    have = {k: v for k, v in arrays.items() if k.startswith(prefix + ".")}
    missing = set(want) - set(have)
    unexpected = set(have) - set(want)
    shape = [(k, tuple(have[k].shape), tuple(want[k].shape))
             for k in set(want) & set(have) if tuple(have[k].shape) != tuple(want[k].shape)]
    if missing or unexpected or shape:
        raise CheckpointMismatchError(missing, unexpected, shape)
    module.load_state_dict({k[len(prefix) + 1:]: torch.as_tensor(v) for k, v in have.items()})


def optimizer_arrays(opt: torch.optim.Optimizer, prefix: str) -> tuple[dict[str, np.ndarray], dict]:
    sd = opt.state_dict()
    arrays = {}
    for idx, state in sd["state"].items():
        for key, value in state.items():
            arrays[f"{prefix}.{idx}.{key}"] = torch.as_tensor(value).detach().cpu().numpy().copy()
    return arrays, {"param_groups": sd["param_groups"]}


def load_optimizer(opt: torch.optim.Optimizer, arrays: Mapping[str, np.ndarray], meta: dict, prefix: str) -> None:
    state: dict[int, dict] = {}
    for name, value in arrays.items():
        if not name.startswith(prefix + "."):
            continue
        idx, key = name[len(prefix) + 1:].split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.as_tensor(value)
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
