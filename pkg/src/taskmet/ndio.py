"""Flat named-array files and CSV helpers.

Checkpoints (metrics, predictors, per-point quadratic losses) are a single
JSON document: a metadata dict plus base64-encoded little-endian arrays keyed
by name. Round-trips are exact for float64/int64 payloads.
"""

from __future__ import annotations

import base64
import csv
import json
from pathlib import Path

import numpy as np
import torch


def save_named_arrays(path: str | Path, arrays: dict[str, torch.Tensor | np.ndarray], meta: dict | None = None) -> None:
    doc: dict = {"format": "taskmet-named-arrays-v1", "meta": meta or {}, "arrays": {}}
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr.detach().cpu().numpy() if isinstance(arr, torch.Tensor) else arr)
        a = a.astype("<" + a.dtype.str.lstrip("<>=|"), copy=False)
        doc["arrays"][name] = {
            "dtype": a.dtype.str,
            "shape": list(a.shape),
            "data": base64.b64encode(a.tobytes()).decode("ascii"),
        }
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_named_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "taskmet-named-arrays-v1":
        raise ValueError(f"{path}: not a named-array checkpoint")
    arrays = {}
    for name, spec in doc["arrays"].items():
        raw = base64.b64decode(spec["data"])
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(spec["dtype"])).reshape(spec["shape"]).copy()
    return arrays, doc["meta"]


def save_module(path: str | Path, module: torch.nn.Module, meta: dict | None = None) -> None:
    arrays = {n: p for n, p in module.state_dict().items()}
    save_named_arrays(path, arrays, meta)


def load_module(path: str | Path, module: torch.nn.Module) -> dict:
    arrays, meta = load_named_arrays(path)
    state = {n: torch.as_tensor(a) for n, a in arrays.items()}
    module.load_state_dict(state)
    return meta


def write_csv(path: str | Path, rows: list[dict], columns: list[str] | None = None) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = columns or list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow({c: _fmt(row.get(c)) for c in cols})


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def _fmt(v):
    if isinstance(v, float):
        return repr(v)  # repr round-trips float64 and is deterministic
    if isinstance(v, torch.Tensor):
        return repr(float(v))
    return v
