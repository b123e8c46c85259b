"""Versioned checkpoint format.

Layout (all text lines are UTF-8, ``\\n`` terminated)::

    #mre-ckpt v1
    config.<key>=<value>        one per ModelConfig field, declaration order
    config_sha256=<hex>         sha256 of the joined config lines
    label=<json string>         one per label, id order (NA first)
    token=<json string>         one per vocab entry, id order
    #arrays <count>
    array <name> <d0>x<d1>...   then prod(shape)*8 raw little-endian float64 bytes, then "\\n"

Arrays appear in ``param_shapes(config)`` order.
"""

from __future__ import annotations

import hashlib
import io
import json
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .encoder import Model, param_shapes

HEADER = b"#mre-ckpt v1"


class CheckpointError(ValueError):
    pass


def to_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    lines = [HEADER.decode()]
    cfg_lines = model.config.to_lines()
    lines += [f"config.{ln}" for ln in cfg_lines]
    lines.append(f"config_sha256={model.config.digest()}")
    lines += [f"label={json.dumps(lab)}" for lab in model.labels]
    lines += [f"token={json.dumps(tok)}" for tok in model.vocab]
    lines.append(f"#arrays {len(model.params)}")
    buf.write(("\n".join(lines) + "\n").encode("utf-8"))
    for name, arr in model.params.items():
        shape = "x".join(str(s) for s in arr.shape)
        buf.write(f"array {name} {shape}\n".encode("utf-8"))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        buf.write(b"\n")
    return buf.getvalue()


def save(model: Model, path: str | Path) -> None:
    Path(path).write_bytes(to_bytes(model))


def digest(model: Model) -> str:
    return hashlib.sha256(to_bytes(model)).hexdigest()


def from_bytes(data: bytes) -> Model:
    stream = io.BytesIO(data)

    def line() -> str:
        raw = stream.readline()
        if not raw.endswith(b"\n"):
            raise CheckpointError("truncated checkpoint")
        return raw[:-1].decode("utf-8")

    if line().encode() != HEADER:
        raise CheckpointError("not an mre-ckpt v1 file")
    cfg_values, labels, vocab = {}, [], []
    recorded_sha = None
    while True:
        ln = line()
        if ln.startswith("#arrays "):
            count = int(ln.split()[1])
            break
        key, _, value = ln.partition("=")
        if key.startswith("config."):
            cfg_values[key[len("config."):]] = value
        elif key == "config_sha256":
            recorded_sha = value
        elif key == "label":
            labels.append(json.loads(value))
        elif key == "token":
            vocab.append(json.loads(value))
        else:
            raise CheckpointError(f"unexpected header line {ln!r}")
    cfg = ModelConfig.from_mapping(cfg_values)
    if recorded_sha != cfg.digest():
        raise CheckpointError("config hash mismatch: checkpoint header was modified")
    expected = param_shapes(cfg)
    if count != len(expected):
        raise CheckpointError(f"expected {len(expected)} arrays, found {count}")
    params = {}
    for name, shape in expected.items():
        parts = line().split(" ")
        if len(parts) != 3 or parts[0] != "array" or parts[1] != name:
            raise CheckpointError(f"expected array {name!r}")
        got = tuple(int(s) for s in parts[2].split("x"))
        if got != shape:
            raise CheckpointError(f"array {name} has shape {got}, config implies {shape}")
        nbytes = int(np.prod(shape)) * 8
        raw = stream.read(nbytes)
        if len(raw) != nbytes or stream.read(1) != b"\n":
            raise CheckpointError(f"array {name} is truncated")
        params[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    if stream.read(1):
        raise CheckpointError("trailing data after last array")
    return Model(cfg, params, vocab, labels)


def load(path: str | Path) -> Model:
    return from_bytes(Path(path).read_bytes())
