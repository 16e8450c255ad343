"""Versioned model checkpoint container.

Layout (all integers little-endian):

    bytes 0..5    magic b"MSMV1\\n"
    bytes 6..9    uint32 length L of the JSON header
    bytes 10..    UTF-8 JSON header
    then          raw array bytes, little-endian, at the offsets the
                  header's array index records (relative to the end of
                  the header)

The header carries the format version, both configuration blocks, the
frozen parameter names, and an index of named arrays (every parameter and
buffer of the model). An optional "extra" object stores provenance such
as the training configuration.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .backbone import BackboneConfig
from .fusion import FusionConfig, MsmvModel

MAGIC = b"MSMV1\n"
VERSION = 1

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
}


def _config_dict(cfg) -> dict:
    d = dataclasses.asdict(cfg)
    for k, v in d.items():
        if hasattr(v, "value"):
            d[k] = v.value
    return d


def save_model(model: MsmvModel, path: Path, extra: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    index, blobs, offset = [], [], 0
    for name, tensor in state.items():
        code = _DTYPES[tensor.dtype]
        arr = tensor.detach().cpu().numpy().astype(np.dtype(code), copy=False)
        raw = np.ascontiguousarray(arr).tobytes()
        index.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(tensor.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "backbone": _config_dict(model.backbone_cfg),
        "fusion": _config_dict(model.fusion_cfg),
        "seed": model.seed,
        "frozen": sorted(n for n, p in model.named_parameters() if not p.requires_grad),
        "arrays": index,
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for raw in blobs:
            fh.write(raw)


def read_header(path: Path) -> dict:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (length,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(length).decode("utf-8"))


def load_model(path: Path) -> tuple[MsmvModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra)."""
    path = Path(path)
    header = read_header(path)
    if header["version"] != VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    backbone_cfg = BackboneConfig(**{
        k: tuple(v) if isinstance(v, list) else v for k, v in header["backbone"].items()
    })
    fusion_cfg = FusionConfig(**header["fusion"])
    model = MsmvModel(backbone_cfg, fusion_cfg, seed=header.get("seed", 0))
    if any(a["dtype"] == "<f8" for a in header["arrays"] if a["name"].endswith(("weight", "bias"))):
        model.double()

    base = len(MAGIC) + 4 + len(json.dumps(header, sort_keys=True).encode("utf-8"))
    state = {}
    with open(path, "rb") as fh:
        data = fh.read()
    for entry in header["arrays"]:
        start = base + entry["offset"]
        raw = data[start : start + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr)
    model.load_state_dict(state)

    frozen = set(header["frozen"])
    for name, p in model.named_parameters():
        p.requires_grad_(name not in frozen)
    return model, header.get("extra", {})
