"""Bit-exact checkpoint format.

Layout: magic `BLSM`, u32 version, u32 header length, UTF-8 JSON header,
tensor payload as little-endian float32, and a trailing 64-bit checksum
(first 8 bytes of SHA-256 over everything before it).  The header embeds
the vocabulary and the freeze mask so a checkpoint is self-contained.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .model import FreezeMask, LoRAAdapter, ModelConfig, ModelState
from .tokenizer import Kind, VocabEntry, Vocabulary

MAGIC = b"BLSM"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _checksum(blob: bytes) -> int:
    return struct.unpack("<Q", hashlib.sha256(blob).digest()[:8])[0]


def _mask_header(mask: FreezeMask) -> dict:
    rows = {}
    for name, arr in mask.rows.items():
        # encode as [start, end) runs of trainable rows
        runs = []
        start = None
        for i, flag in enumerate(arr.tolist() + [False]):
            if flag and start is None:
                start = i
            elif not flag and start is not None:
                runs.append([start, i])
                start = None
        rows[name] = {"length": int(arr.shape[0]), "trainable_runs": runs}
    return {"tensors": mask.tensors, "rows": rows}


def _mask_from_header(h: dict) -> FreezeMask:
    rows = {}
    for name, spec in h["rows"].items():
        arr = np.zeros(spec["length"], dtype=bool)
        for start, end in spec["trainable_runs"]:
            arr[start:end] = True
        rows[name] = arr
    return FreezeMask(dict(h["tensors"]), rows)


def _vocab_header(vocab: Vocabulary) -> list[list]:
    return [[e.render(), e.score, e.kind.value] for e in vocab.entries]


def _vocab_from_header(rows: list[list]) -> Vocabulary:
    entries = []
    for surface_text, score, kind_text in rows:
        kind = Kind(kind_text)
        if kind is Kind.BYTE:
            surface = bytes([int(surface_text[3:5], 16)])
        else:
            surface = surface_text.encode("utf-8")
        entries.append(VocabEntry(surface, float(score), kind, len(entries)))
    return Vocabulary(entries)


def save_checkpoint(state: ModelState, vocab: Vocabulary, path: str) -> None:
    tensors = []
    payload = bytearray()
    for name, arr in state.tensor_items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": len(payload)})
        payload.extend(data)
    header = {
        "config": asdict(state.config),
        "vocab_size": state.config.vocab_size,
        "old_vocab_size": state.old_vocab_size,
        "stage_history": state.stage_history,
        "adapter_alpha": state.config.lora_alpha,
        "mask": _mask_header(state.mask),
        "vocab": _vocab_header(vocab),
        "tensors": tensors,
    }
    header_blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
    blob = MAGIC + struct.pack("<II", VERSION, len(header_blob)) + header_blob + bytes(payload)
    blob += struct.pack("<Q", _checksum(blob))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_header(path: str) -> dict:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    body, tail = blob[:-8], blob[-8:]
    if struct.unpack("<Q", tail)[0] != _checksum(body):
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    header = json.loads(blob[12 : 12 + header_len].decode("utf-8"))
    header["_payload_start"] = 12 + header_len
    return header


def load_checkpoint(path: str) -> tuple[ModelState, Vocabulary]:
    header = read_header(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    payload = blob[header["_payload_start"] : -8]
    arrays: dict[str, np.ndarray] = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = spec["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start).reshape(shape)
        arrays[spec["name"]] = arr.copy()
    config = ModelConfig(**header["config"])
    params = {name: arr for name, arr in arrays.items() if not name.startswith("lora.")}
    adapters: list[LoRAAdapter] = []
    seen: dict[tuple[int, str], dict[str, np.ndarray]] = {}
    for name, arr in arrays.items():
        if not name.startswith("lora."):
            continue
        _, layer, target, which = name.split(".")
        seen.setdefault((int(layer), target), {})[which] = arr
    for (layer, target), parts in sorted(seen.items()):
        adapters.append(LoRAAdapter(layer, target, parts["A"], parts["B"], header["adapter_alpha"]))
    state = ModelState(
        config=config,
        params=params,
        mask=_mask_from_header(header["mask"]),
        adapters=adapters,
        old_vocab_size=header["old_vocab_size"],
        stage_history=list(header["stage_history"]),
    )
    return state, _vocab_from_header(header["vocab"])


def describe(path: str) -> dict:
    """Header summary for `ckpt inspect`."""
    header = read_header(path)
    return {
        "config": header["config"],
        "vocab_size": header["vocab_size"],
        "old_vocab_size": header["old_vocab_size"],
        "stage_history": header["stage_history"],
        "n_tensors": len(header["tensors"]),
        "n_scalars": sum(int(np.prod(t["shape"])) for t in header["tensors"]),
    }
