"""Checkpoint container shared by model and prompt artifacts.

Layout: a UTF-8 text header (magic, kind, sorted key=value metadata, array
count, payload digest) terminated by ``---``, followed by the binary payload.
The payload is a sequence of ``name=... dims=...`` lines each followed by the
raw little-endian float64 bytes of that array, in a fixed order. Round trips
are byte-exact; the digest in the header is verified on load.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import CorruptionError

MAGIC = "CKPT1"
_HEADER_END = b"---\n"


def payload_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    buf = bytearray()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        dims = ",".join(str(d) for d in a.shape)
        buf += f"name={name} dims={dims}\n".encode("utf-8")
        buf += a.tobytes()
    return bytes(buf)


def digest_arrays(arrays: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(payload_bytes(arrays)).hexdigest()


def save_checkpoint(path, kind: str, meta: dict[str, str], arrays: dict[str, np.ndarray]) -> None:
    payload = payload_bytes(arrays)
    digest = hashlib.sha256(payload).hexdigest()
    lines = [MAGIC, f"kind={kind}"]
    lines += [f"{k}={meta[k]}" for k in sorted(meta)]
    lines += [f"arrays={len(arrays)}", f"digest={digest}"]
    header = ("\n".join(lines) + "\n").encode("utf-8") + _HEADER_END
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def load_checkpoint(path) -> tuple[str, dict[str, str], dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        blob = fh.read()
    cut = blob.find(_HEADER_END)
    if cut < 0:
        raise CorruptionError(f"{path}: missing checkpoint header terminator")
    header_lines = blob[:cut].decode("utf-8", errors="replace").splitlines()
    if not header_lines or header_lines[0] != MAGIC:
        found = header_lines[0] if header_lines else ""
        raise CorruptionError(f"{path}: unsupported checkpoint version {found!r}, expected {MAGIC}")
    meta: dict[str, str] = {}
    for line in header_lines[1:]:
        key, _, value = line.partition("=")
        meta[key] = value
    for required in ("kind", "arrays", "digest"):
        if required not in meta:
            raise CorruptionError(f"{path}: checkpoint header lacks '{required}'")
    payload = blob[cut + len(_HEADER_END):]
    actual = hashlib.sha256(payload).hexdigest()
    if actual != meta["digest"]:
        raise CorruptionError(f"{path}: payload digest mismatch, file is corrupt")
    kind = meta.pop("kind")
    count = int(meta.pop("arrays"))
    meta.pop("digest")

    arrays: dict[str, np.ndarray] = {}
    pos = 0
    for _ in range(count):
        nl = payload.find(b"\n", pos)
        if nl < 0:
            raise CorruptionError(f"{path}: truncated array header")
        line = payload[pos:nl].decode("utf-8")
        pos = nl + 1
        if not line.startswith("name="):
            raise CorruptionError(f"{path}: malformed array header {line!r}")
        name_part, _, dims_part = line[len("name="):].partition(" dims=")
        shape = tuple(int(d) for d in dims_part.split(",") if d != "")
        size = int(np.prod(shape)) if shape else 1
        nbytes = size * 8
        raw = payload[pos:pos + nbytes]
        if len(raw) != nbytes:
            raise CorruptionError(f"{path}: truncated array data for {name_part!r}")
        pos += nbytes
        arrays[name_part] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if pos != len(payload):
        raise CorruptionError(f"{path}: {len(payload) - pos} trailing bytes after arrays")
    return kind, meta, arrays
