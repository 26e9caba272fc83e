"""Checkpoint container: a JSON header plus raw float64 parameter blobs.

Layout: 4-byte magic "3MCK", little-endian u32 header length, UTF-8 JSON
header, then each parameter's float64 little-endian bytes back to back.
The header records the kind ("model" or "embedding"), the architecture
config, and per-parameter name/shape/offset, so a file is self-describing
and loads bit-exactly on any host.
"""

from __future__ import annotations

import dataclasses
import json
import struct

import numpy as np

from .config import ModelConfig
from .encoder import EmbeddingNetwork
from .model import SpeechModel

MAGIC = b"3MCK"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Malformed or mismatched checkpoint file."""


def write_params(path, kind, config, params):
    """Write an ordered {name: array} mapping under the given kind/config."""
    entries, blobs, offset = [], [], 0
    for name, value in params.items():
        data = np.ascontiguousarray(value, dtype="<f8")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        blobs.append(data.tobytes())
        offset += data.nbytes
    header = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "config": dict(config),
        "params": entries,
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def read_params(path):
    """Returns (kind, config dict, ordered {name: float64 array})."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("format") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format {header.get('format')}")
    blob = raw[8 + header_len :]
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        start = entry["offset"]
        end = start + 8 * count
        if end > len(blob):
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        params[entry["name"]] = (
            np.frombuffer(blob[start:end], dtype="<f8").astype(np.float64).reshape(shape)
        )
    return header["kind"], header["config"], params


def _gather(module):
    return {name: p.data for name, p in module.named_parameters().items()}


def _restore(module, params, context):
    own = module.named_parameters()
    missing = sorted(set(own) - set(params))
    unexpected = sorted(set(params) - set(own))
    if missing or unexpected:
        raise CheckpointError(
            f"{context}: parameter names do not match"
            f" (missing {missing[:5]}, unexpected {unexpected[:5]})"
        )
    for name, param in own.items():
        if param.data.shape != params[name].shape:
            raise CheckpointError(
                f"{context}: shape mismatch for {name}:"
                f" {param.data.shape} vs {params[name].shape}"
            )
        param.data[...] = params[name]


def save_model(path, model):
    write_params(path, "model", dataclasses.asdict(model.cfg), _gather(model))


def load_model(path):
    """Rebuild a SpeechModel from a checkpoint; parameters load bit-exactly.

    Dropout generators are left unseeded: call seed_dropout before resuming
    training, or eval() for inference.
    """
    kind, config, params = read_params(path)
    if kind != "model":
        raise CheckpointError(f"{path}: expected a model checkpoint, found {kind!r}")
    model = SpeechModel(ModelConfig(**config))
    _restore(model, params, path)
    return model


def save_embedding(path, embedding_net, cfg):
    write_params(path, "embedding", dataclasses.asdict(cfg), _gather(embedding_net))


def load_embedding(path):
    kind, config, params = read_params(path)
    if kind != "embedding":
        raise CheckpointError(f"{path}: expected an embedding checkpoint, found {kind!r}")
    cfg = ModelConfig(**config)
    net = EmbeddingNetwork(cfg)
    _restore(net, params, path)
    return cfg, net


def load_pretrained_embedding(model, path):
    """Overwrite a joint model's embedding network with pretrained weights.

    The checkpoint's architecture must agree with the model's on every field
    the embedding network reads.
    """
    if model.embedding_net is None:
        raise CheckpointError("model is dense; it has no embedding network to load into")
    kind, config, params = read_params(path)
    if kind != "embedding":
        raise CheckpointError(f"{path}: expected an embedding checkpoint, found {kind!r}")
    stored = ModelConfig(**config)
    for field in ("feat_dim", "d_emb", "d_ff", "heads", "kernel", "embedding_blocks", "vocab_size"):
        if getattr(stored, field) != getattr(model.cfg, field):
            raise CheckpointError(
                f"{path}: embedding architecture mismatch on {field}:"
                f" {getattr(stored, field)} vs {getattr(model.cfg, field)}"
            )
    _restore(model.embedding_net, params, path)


def strip_auxiliary(src, dst):
    """Copy a model checkpoint without auxiliary decoders (num_levels=1).

    Every surviving parameter is byte-identical to the source; only the
    train-only heads disappear, so decoding behavior cannot change.
    """
    kind, config, params = read_params(src)
    if kind != "model":
        raise CheckpointError(f"{src}: expected a model checkpoint, found {kind!r}")
    config = dict(config, num_levels=1)
    kept = {k: v for k, v in params.items() if not k.startswith("aux_decoders.")}
    write_params(dst, "model", dict(dataclasses.asdict(ModelConfig(**config))), kept)
