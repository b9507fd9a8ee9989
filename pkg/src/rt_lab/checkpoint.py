"""Versioned parameter container shared by every trained model.

Layout: a magic line, one JSON header line (kind, config echo, shape
manifest), then the parameters as little-endian float64 in manifest order.
No timestamps are written, so identical parameters give identical bytes.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import numpy as np

from .numkit import Tensor

MAGIC = b"RTLAB-CKPT 1\n"


class CheckpointError(ValueError):
    pass


def _arrays(params: Mapping) -> dict[str, np.ndarray]:
    return {k: (v.data if isinstance(v, Tensor) else np.asarray(v, dtype=np.float64))
            for k, v in params.items()}


def dumps(params: Mapping, kind: str, config: dict | None = None) -> bytes:
    arrs = _arrays(params)
    names = sorted(arrs)
    header = {"kind": kind, "config": config or {},
              "manifest": [[n, list(arrs[n].shape)] for n in names]}
    body = b"".join(np.ascontiguousarray(arrs[n], dtype="<f8").tobytes() for n in names)
    return MAGIC + json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + body


def loads(blob: bytes, kind: str | None = None,
          expected: Mapping[str, tuple] | None = None) -> tuple[dict[str, np.ndarray], dict]:
    if not blob.startswith(MAGIC):
        raise CheckpointError("not an rt-lab checkpoint (bad magic line)")
    nl = blob.index(b"\n", len(MAGIC))
    header = json.loads(blob[len(MAGIC):nl].decode("utf-8"))
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"checkpoint kind {header['kind']!r}, expected {kind!r}")
    body = blob[nl + 1:]
    out, off = {}, 0
    for name, shape in header["manifest"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = body[off:off + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"truncated checkpoint at parameter {name!r}")
        out[name] = np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(body):
        raise CheckpointError("trailing bytes after last parameter")
    if expected is not None:
        got = {k: tuple(v.shape) for k, v in out.items()}
        want = {k: tuple(v) for k, v in expected.items()}
        if got != want:
            missing = sorted(set(want) - set(got))
            wrong = sorted(k for k in set(want) & set(got) if want[k] != got[k])
            raise CheckpointError(f"shape manifest mismatch (missing={missing}, wrong={wrong})")
    return out, header


def save(path, params: Mapping, kind: str, config: dict | None = None) -> str:
    blob = dumps(params, kind, config)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path, kind: str | None = None, expected=None) -> tuple[dict[str, np.ndarray], dict]:
    return loads(Path(path).read_bytes(), kind, expected)


def to_tensors(arrs: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v.copy(), requires_grad=True, name=k) for k, v in arrs.items()}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
