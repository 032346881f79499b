"""Bit-exact checkpoint files.

Layout (all integers little-endian)::

    8 bytes   magic  b"DEPTHUP\\x00"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header, keys sorted, no whitespace
    ...       raw float32 little-endian tensor data, in header table order
    32 bytes  SHA-256 of every preceding byte

The header holds the format version, the model config, one record per
layer (kind, origin, LoRA scale), the parameter table (name, shape, origin,
trainable, byte offset), optional optimizer state, and free-form metadata.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from depthup.model import Block, Model, ModelConfig
from depthup.surgery import FreezeManifest, ManifestEntry
from depthup.tensor import Tensor

MAGIC = b"DEPTHUP\x00"
FORMAT_VERSION = 1
DIGEST_BYTES = 32


class CheckpointError(IOError):
    """Unreadable, truncated, or digest-mismatched checkpoint."""


@dataclass
class Checkpoint:
    model: Model
    manifest: FreezeManifest
    optimizer: dict | None = None  # {"step": int, "m": {name: arr}, "v": {name: arr}}
    meta: dict = field(default_factory=dict)


def _lora_names(layer: Block) -> list[str]:
    return [f"{n}.lora_{ab}" for n in layer.lora for ab in ("a", "b")]


def to_bytes(ckpt: Checkpoint) -> bytes:
    model, manifest = ckpt.model, ckpt.manifest
    named = model.named_parameters()
    if set(named) != set(manifest.entries):
        raise CheckpointError("manifest does not describe the model being saved")
    table = []
    chunks = []
    offset = 0

    def put(name: str, arr: np.ndarray, origin: str | None = None, trainable: bool | None = None) -> None:
        nonlocal offset
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        rec = {"name": name, "shape": list(arr.shape), "offset": offset}
        if origin is not None:
            rec["origin"] = origin
            rec["trainable"] = trainable
        table.append(rec)
        chunks.append(raw)
        offset += len(raw)

    for name, t in named.items():
        e = manifest.entries[name]
        put(name, t.data, e.origin, e.trainable)
    opt_header = None
    if ckpt.optimizer is not None:
        names = list(ckpt.optimizer["m"])
        for n in names:
            put(f"opt.m.{n}", ckpt.optimizer["m"][n])
            put(f"opt.v.{n}", ckpt.optimizer["v"][n])
        opt_header = {"step": int(ckpt.optimizer["step"]), "names": names}
    header = {
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "layers": [{"kind": l.kind, "origin": l.origin, "lora_scale": l.lora_scale, "lora": list(l.lora)} for l in model.layers],
        "full_finetune": manifest.full_finetune,
        "params": table,
        "optimizer": opt_header,
        "meta": ckpt.meta,
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < len(MAGIC) + 4 + DIGEST_BYTES or raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not a depthup checkpoint")
    body, digest = raw[:-DIGEST_BYTES], raw[-DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint digest mismatch")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(body[start : start + hlen])
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    data = body[start + hlen :]

    arrays: dict[str, np.ndarray] = {}
    entries: dict[str, ManifestEntry] = {}
    for rec in header["params"]:
        n = int(np.prod(rec["shape"])) if rec["shape"] else 1
        end = rec["offset"] + 4 * n
        if end > len(data):
            raise CheckpointError(f"tensor {rec['name']} runs past the end of the file")
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=rec["offset"]).astype(np.float32).reshape(rec["shape"])
        arrays[rec["name"]] = arr
        if "origin" in rec:
            entries[rec["name"]] = ManifestEntry(rec["origin"], bool(rec["trainable"]), n)

    cfg = ModelConfig.from_dict(header["config"])
    layers = []
    for i, spec in enumerate(header["layers"]):
        prefix = f"layers.{i}."
        params = {}
        for name in arrays:
            if name.startswith(prefix) and ".lora_" not in name:
                params[name[len(prefix) :]] = Tensor(arrays[name])
        block = Block(spec["kind"], params, lora_scale=spec["lora_scale"], origin=spec["origin"])
        for proj in spec["lora"]:
            block.lora[proj] = (Tensor(arrays[f"{prefix}{proj}.lora_a"]), Tensor(arrays[f"{prefix}{proj}.lora_b"]))
        layers.append(block)
    speech = Tensor(arrays["embed.speech"]) if "embed.speech" in arrays else None
    model = Model(cfg, Tensor(arrays["embed.text"]), speech, Tensor(arrays["final_norm"]), layers)
    # keep table order so a re-save is byte-identical
    manifest = FreezeManifest({k: entries[k] for k in model.named_parameters()}, bool(header["full_finetune"]))

    optimizer = None
    if header["optimizer"] is not None:
        names = header["optimizer"]["names"]
        optimizer = {
            "step": header["optimizer"]["step"],
            "m": {n: arrays[f"opt.m.{n}"] for n in names},
            "v": {n: arrays[f"opt.v.{n}"] for n in names},
        }
    return Checkpoint(model, manifest, optimizer, header["meta"])


def save(path: str | Path, ckpt: Checkpoint) -> str:
    """Write ``ckpt`` and return its hex digest."""
    raw = to_bytes(ckpt)
    Path(path).write_bytes(raw)
    return raw[-DIGEST_BYTES:].hex()


def load(path: str | Path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(raw)


def digest(path: str | Path) -> str:
    return Path(path).read_bytes()[-DIGEST_BYTES:].hex()
