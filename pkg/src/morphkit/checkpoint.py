"""Versioned binary blobs for model checkpoints.

Layout: 4-byte magic, ``uint32`` format version, ``uint64`` header length, a UTF-8
JSON header (metadata plus a tensor index) and the raw little-endian tensor bytes.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    arr = np.ascontiguousarray(t)
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def dumps(magic: bytes, meta: dict, tensors: dict[str, object]) -> bytes:
    index = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = _to_numpy(tensors[name])
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode()
    return magic + struct.pack("<IQ", FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def loads(magic: bytes, blob: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if blob[:4] != magic:
        raise CheckpointError(f"bad magic {blob[:4]!r}, expected {magic!r}")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen].decode())
    base = 16 + hlen
    tensors = {}
    for item in header["tensors"]:
        start = base + item["offset"]
        arr = np.frombuffer(blob[start:start + item["nbytes"]], dtype=np.dtype(item["dtype"]))
        tensors[item["name"]] = torch.from_numpy(arr.reshape(item["shape"]).copy())
    return header["meta"], tensors


def write_atomic(path, blob: bytes):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def flatten_optimizer(prefix: str, opt: torch.optim.Optimizer) -> tuple[list, dict]:
    sd = opt.state_dict()
    tensors = {}
    for pid, st in sd["state"].items():
        for key, val in st.items():
            tensors[f"{prefix}/state/{pid}/{key}"] = val if isinstance(val, torch.Tensor) else torch.tensor(val)
    groups = [{k: (list(v) if isinstance(v, tuple) else v) for k, v in g.items()} for g in sd["param_groups"]]
    return groups, tensors


def restore_optimizer(prefix: str, opt: torch.optim.Optimizer, groups: list, tensors: dict):
    state: dict = {}
    head = f"{prefix}/state/"
    for name, val in tensors.items():
        if not name.startswith(head):
            continue
        pid, key = name[len(head):].split("/", 1)
        state.setdefault(int(pid), {})[key] = val
    groups = [{k: (tuple(v) if k == "betas" else v) for k, v in g.items()} for g in groups]
    opt.load_state_dict({"state": state, "param_groups": groups})
