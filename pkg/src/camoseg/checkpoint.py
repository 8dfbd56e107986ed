"""Single-file checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"CAMOCKPT"
    8 bytes   uint64 manifest length L
    L bytes   UTF-8 JSON manifest (sorted keys, no whitespace)
    ...       raw tensor payloads, C order, in manifest order

The manifest records ``format_version``, ``endianness`` ("little"),
``iteration``, ``seed``, ``config_hash``, ``config``, optimizer
hyper-parameters, and for every tensor its ``name``, ``dtype`` (numpy
type string such as "<f4"), ``shape``, ``offset`` (from the payload start)
and ``nbytes``. Parameter tensors are named ``model/<name>``; AdamW state
tensors ``optim/<param name>/<field>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, DataError

MAGIC = b"CAMOCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: dict[str, np.ndarray]
    optimizer: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_groups: list[dict] = field(default_factory=list)
    iteration: int = 0
    seed: int = 0
    config_hash: str = ""
    config: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        entries, blobs, offset = [], [], 0
        for prefix, table in (("model", self.model), ("optim", self.optimizer)):
            for name in sorted(table):
                arr = np.asarray(table[name], order="C")  # ascontiguousarray would promote 0-d to 1-d
                arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
                raw = arr.tobytes(order="C")
                entries.append({"name": f"{prefix}/{name}", "dtype": arr.dtype.str, "shape": list(arr.shape),
                                "offset": offset, "nbytes": len(raw)})
                blobs.append(raw)
                offset += len(raw)
        manifest = {
            "format_version": FORMAT_VERSION, "endianness": "little", "iteration": self.iteration,
            "seed": self.seed, "config_hash": self.config_hash, "config": self.config,
            "optimizer_groups": self.optimizer_groups, "tensors": entries,
        }
        head = json.dumps(manifest, sort_keys=True, separators=(",", ":"), default=list).encode()
        return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(blobs)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[:8] != MAGIC:
            raise DataError("not a camoseg checkpoint (bad magic)")
        (n,) = struct.unpack("<Q", data[8:16])
        manifest = json.loads(data[16:16 + n])
        if manifest.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported checkpoint version {manifest.get('format_version')}")
        payload = memoryview(data)[16 + n:]
        model, optim = {}, {}
        for e in manifest["tensors"]:
            raw = payload[e["offset"]:e["offset"] + e["nbytes"]]
            arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
            prefix, name = e["name"].split("/", 1)
            (model if prefix == "model" else optim)[name] = arr
        return cls(model, optim, manifest["optimizer_groups"], manifest["iteration"], manifest["seed"],
                   manifest["config_hash"], manifest["config"])

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        try:
            return cls.from_bytes(Path(path).read_bytes())
        except OSError as exc:
            raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def capture(model, optimizer, iteration: int, cfg) -> Checkpoint:
    named = model.trainable_named_parameters()
    params = {n: p.detach().cpu().numpy().copy() for n, p in named}
    optim, groups = {}, []
    if optimizer is not None:
        index = {id(p): n for n, p in named}
        for p, state in optimizer.state.items():
            for key, val in state.items():
                optim[f"{index[id(p)]}/{key}"] = torch.as_tensor(val).detach().cpu().numpy().copy()
        for g in optimizer.param_groups:
            groups.append({k: v for k, v in g.items() if k != "params"} | {"params": [index[id(p)] for p in g["params"]]})
    return Checkpoint(params, optim, groups, iteration, cfg.train.seed, cfg.hash(), cfg.to_dict())


def restore(ckpt: Checkpoint, model, optimizer=None, cfg=None) -> None:
    if cfg is not None and ckpt.config_hash and ckpt.config_hash != cfg.hash():
        raise ConfigError("checkpoint was produced with a different configuration")
    named = dict(model.trainable_named_parameters())
    missing = set(named) - set(ckpt.model)
    if missing:
        raise DataError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
    with torch.no_grad():
        for n, p in named.items():
            p.copy_(torch.from_numpy(ckpt.model[n]))
    if optimizer is not None and ckpt.optimizer:
        for p in named.values():
            optimizer.state.pop(p, None)
        by_param: dict[str, dict] = {}
        for key, arr in ckpt.optimizer.items():
            pname, field_name = key.rsplit("/", 1)
            by_param.setdefault(pname, {})[field_name] = torch.from_numpy(arr.copy())
        for pname, state in by_param.items():
            optimizer.state[named[pname]] = state
        for g, saved in zip(optimizer.param_groups, ckpt.optimizer_groups):
            for k, v in saved.items():
                if k != "params":
                    g[k] = tuple(v) if isinstance(g.get(k), tuple) else v
