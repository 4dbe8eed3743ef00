"""Checkpoint files: a JSON header followed by raw little-endian float64 arrays.

Layout::

    ADVTEXT-CHECKPOINT\\n
    <header byte length>\\n
    <header JSON, UTF-8>
    <payload: each tensor's values, '<f8', in header order>
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .models import ModelParams
from .train import TrainConfig
from .vocab import Vocabulary

MAGIC = b"ADVTEXT-CHECKPOINT\n"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def dumps(params: ModelParams, vocab: Vocabulary, label_names: list[str], config: TrainConfig) -> bytes:
    header = {
        "format_version": FORMAT_VERSION,
        "task": params.task,
        "method": config.method,
        "label_names": list(label_names),
        "vocab": list(vocab.id_to_token),
        "config": config.to_dict(),
        "tensors": [{"name": k, "shape": list(t.shape)} for k, t in params.tensors.items()],
    }
    head = json.dumps(header, sort_keys=True, ensure_ascii=False).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in params.tensors.values())
    return MAGIC + str(len(head)).encode() + b"\n" + head + payload


def save(path: str | Path, params: ModelParams, vocab: Vocabulary, label_names: list[str], config: TrainConfig) -> None:
    Path(path).write_bytes(dumps(params, vocab, label_names, config))


def loads(blob: bytes):
    """Parse checkpoint bytes -> (params, vocab, label_names, config)."""
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an advtext checkpoint")
    rest = blob[len(MAGIC) :]
    nl = rest.find(b"\n")
    if nl < 0:
        raise CheckpointError("truncated header")
    try:
        n = int(rest[:nl])
        header = json.loads(rest[nl + 1 : nl + 1 + n].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"corrupt header: {exc}") from None
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    payload = memoryview(rest)[nl + 1 + n :]
    tensors = {}
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if offset + nbytes > len(payload):
            raise CheckpointError(f"payload too short for tensor {entry['name']}")
        arr = np.frombuffer(payload[offset : offset + nbytes], dtype="<f8").astype(np.float64).reshape(shape)
        tensors[entry["name"]] = Tensor(arr, requires_grad=True, name=entry["name"])
        offset += nbytes
    if offset != len(payload):
        raise CheckpointError("payload length does not match declared shapes")
    params = ModelParams(header["task"], tensors)
    try:
        params.check()
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"inconsistent parameters: {exc}") from None
    config = TrainConfig.from_dict(header["config"])
    return params, Vocabulary(header["vocab"]), header["label_names"], config


def load(path: str | Path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from None
    return loads(blob)
