"""Checkpoint archive: a JSON metadata document plus raw little-endian float32 arrays.

The archive is an uncompressed zip with two members, ``meta.json`` and
``arrays.bin``.  Member timestamps are pinned so identical content gives
identical bytes.  ``meta.json`` holds the model config, the vocabulary,
the format version, free-form run state, and a table of contents mapping
each array name to ``shape``, byte ``offset`` into ``arrays.bin``,
``nbytes`` and its ``trainable`` flag.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any

import numpy as np

from .config import ModelConfig
from .model import ModelParams
from .tokenizer import Vocab

FORMAT_VERSION = 1
_DATE = (1980, 1, 1, 0, 0, 0)
_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _pack(arrays: dict[str, np.ndarray], trainable: dict[str, bool]):
    toc = []
    buf = io.BytesIO()
    for name, arr in arrays.items():
        raw = np.ascontiguousarray(arr, dtype=_DTYPE).tobytes(order="C")
        toc.append({"name": name, "shape": list(arr.shape), "offset": buf.tell(),
                    "nbytes": len(raw), "trainable": bool(trainable.get(name, False))})
        buf.write(raw)
    return toc, buf.getvalue()


def save_checkpoint(path: str | Path, params: ModelParams, vocab: Vocab | None = None, *,
                    optimizer=None, state: dict[str, Any] | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> str:
    """Write the archive and return its sha256 hex digest."""
    arrays = dict(params.arrays)
    trainable = dict(params.trainable)
    if extra_arrays:
        arrays.update(extra_arrays)
    opt_meta = None
    if optimizer is not None:
        opt_meta = {"t": optimizer.t, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                    "eps": optimizer.eps, "weight_decay": optimizer.weight_decay,
                    "names": sorted(optimizer.m)}
        for name in sorted(optimizer.m):
            arrays["opt.m/" + name] = optimizer.m[name]
            arrays["opt.v/" + name] = optimizer.v[name]
    toc, blob = _pack(arrays, trainable)
    meta = {
        "format_version": FORMAT_VERSION,
        "model_config": dataclasses.asdict(params.config),
        "vocab": None if vocab is None else vocab.itos,
        "optimizer": opt_meta,
        "state": state or {},
        "toc": toc,
    }
    meta_bytes = json.dumps(meta, indent=1, sort_keys=False).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    out = io.BytesIO()
    with zipfile.ZipFile(out, "w", compression=zipfile.ZIP_STORED) as zf:
        for member, data in (("meta.json", meta_bytes), ("arrays.bin", blob)):
            info = zipfile.ZipInfo(member, date_time=_DATE)
            info.external_attr = 0o644 << 16
            zf.writestr(info, data)
    data = out.getvalue()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return hashlib.sha256(data).hexdigest()


class Checkpoint:
    """Loaded archive contents."""

    def __init__(self, meta: dict, arrays: dict[str, np.ndarray], digest: str):
        self.meta = meta
        self.arrays = arrays
        self.digest = digest

    @property
    def config(self) -> ModelConfig:
        return ModelConfig(**self.meta["model_config"])

    @property
    def vocab(self) -> Vocab | None:
        itos = self.meta.get("vocab")
        if itos is None:
            return None
        vocab = Vocab.__new__(Vocab)
        vocab.itos = list(itos)
        vocab.stoi = {w: i for i, w in enumerate(vocab.itos)}
        return vocab

    @property
    def state(self) -> dict:
        return self.meta.get("state", {})

    def params(self) -> ModelParams:
        cfg = self.config
        trainable = {e["name"]: e["trainable"] for e in self.meta["toc"]}
        arrays = {k: v.copy() for k, v in self.arrays.items()
                  if k.startswith(("text.", "vit."))}
        return ModelParams(cfg, arrays, {k: trainable[k] for k in arrays})

    def optimizer(self):
        from .training import AdamW

        om = self.meta.get("optimizer")
        if om is None:
            return None
        opt = AdamW(om["beta1"], om["beta2"], om["eps"], om["weight_decay"], om["t"])
        for name in om["names"]:
            opt.m[name] = self.arrays["opt.m/" + name].copy()
            opt.v[name] = self.arrays["opt.v/" + name].copy()
        return opt

    def extra(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays.items() if k.startswith(prefix)}


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    try:
        with zipfile.ZipFile(io.BytesIO(raw)) as zf:
            meta = json.loads(zf.read("meta.json").decode("utf-8"))
            blob = zf.read("arrays.bin")
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: not a checkpoint archive ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {meta.get('format_version')}")
    arrays = {}
    for entry in meta["toc"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(blob[start:start + n], dtype=_DTYPE).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float32)
    return Checkpoint(meta, arrays, hashlib.sha256(raw).hexdigest())


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
