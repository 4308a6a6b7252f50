"""Checkpoint format: magic "MMTH", length-prefixed text header, f32 payload.

Layout (little-endian):

    bytes 0-3   magic b"MMTH"
    bytes 4-7   u32 header byte length
    header      utf-8 text; "cfg <key> <json-value>" lines describing the
                run configuration, then "tensor <name> <d0[xd1[xd2]]>
                <offset> <nbytes>" lines, offsets relative to payload start
    payload     concatenated float32 little-endian tensor data

Offsets never overlap and the table is written in parameter order, so
save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .errors import BagParseError
from .model import BagClassifier, build_model

MAGIC = b"MMTH"

_MODEL_KEYS = ("heads", "partition_dim", "experts", "slots", "q", "total_slots",
               "topk", "sinkhorn_iters", "mh_heads")


def model_from_config(cfg: dict, rng=None) -> BagClassifier:
    """Rebuild an (uninitialized-weights) model from a flat run config."""
    rng = rng or np.random.default_rng(int(cfg.get("seed", 0)))
    layer_kw = {k: cfg[k] for k in _MODEL_KEYS if cfg.get(k) is not None}
    return build_model(cfg["layer"], cfg["agg"], d=cfg["d"], d_out=cfg["d_out"],
                       num_classes=cfg["num_classes"], rng=rng,
                       abmil_dim=cfg.get("abmil_dim", 256), **layer_kw)


def save_checkpoint(model: BagClassifier, config: dict, path):
    header_lines = []
    for key in sorted(config):
        header_lines.append(f"cfg {key} {json.dumps(config[key])}")
    chunks = []
    offset = 0
    for name, tensor in model.params.items():
        data = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
        dims = "x".join(str(s) for s in tensor.data.shape) or "1"
        header_lines.append(f"tensor {name} {dims} {offset} {len(data)}")
        chunks.append(data)
        offset += len(data)
    header = ("\n".join(header_lines) + "\n").encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)
    os.replace(tmp, path)


def read_header(path):
    """(config dict, tensor table) without loading tensor data."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise BagParseError(f"bad checkpoint magic at byte 0: {magic!r}")
        raw_len = fh.read(4)
        if len(raw_len) < 4:
            raise BagParseError(f"truncated header length at byte {4 + len(raw_len)}")
        (header_len,) = struct.unpack("<I", raw_len)
        header = fh.read(header_len)
        if len(header) < header_len:
            raise BagParseError(f"truncated header: file ends at byte {8 + len(header)}")
    config, table = {}, []
    for line in header.decode("utf-8").splitlines():
        if not line.strip():
            continue
        kind, rest = line.split(" ", 1)
        if kind == "cfg":
            key, value = rest.split(" ", 1)
            config[key] = json.loads(value)
        elif kind == "tensor":
            name, dims, offset, nbytes = rest.rsplit(" ", 3)
            shape = tuple(int(v) for v in dims.split("x"))
            table.append((name, shape, int(offset), int(nbytes)))
        else:
            raise BagParseError(f"unknown header line kind {kind!r}")
    payload_start = 8 + header_len
    end = payload_start
    last = -1
    for name, shape, offset, nbytes in table:
        if offset < 0 or offset <= last:
            raise BagParseError(f"overlapping tensor offsets at {name!r}")
        last = offset
        end = max(end, payload_start + offset + nbytes)
    size = os.path.getsize(path)
    if size < end:
        raise BagParseError(f"truncated payload: file ends at byte {size}, need {end}")
    return config, table


def load_checkpoint(path):
    """(model, config) with tensors restored bit-exactly."""
    config, table = read_header(path)
    model = model_from_config(config)
    payload_start = None
    with open(path, "rb") as fh:
        fh.seek(4)
        (header_len,) = struct.unpack("<I", fh.read(4))
        payload_start = 8 + header_len
        params = model.params
        for name, shape, offset, nbytes in table:
            if name not in params:
                raise BagParseError(f"checkpoint tensor {name!r} not in model")
            fh.seek(payload_start + offset)
            data = np.frombuffer(fh.read(nbytes), dtype="<f4").reshape(shape)
            if params[name].data.shape != data.shape:
                raise BagParseError(
                    f"shape mismatch for {name!r}: checkpoint {data.shape}, "
                    f"model {params[name].data.shape}")
            params[name].data = data.astype(np.float32).copy()
    return model, config
