"""Single-file binary container for checkpoints and memory snapshots.

Layout (all integers little-endian)::

    magic      8 bytes   b"MANSRCKP"
    version    u32
    n_sections u32
    table      n_sections entries:
                 u16 name length, name (utf-8)
                 u8  kind (1 = JSON text, 2 = ndarray)
                 u8  dtype length, dtype str (numpy, e.g. "<f8"; empty for JSON)
                 u8  ndim, ndim x u64 shape
                 u64 payload length
    payloads   concatenated in table order
    checksum   32 bytes, SHA-256 of everything above

The version is checked before anything else is parsed, and the checksum is
verified before any section is decoded, so a failed load never returns
partial state.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MANSRCKP"
FORMAT_VERSION = 1
_JSON, _ARRAY = 1, 2
_DIGEST = 32


class CheckpointError(Exception):
    pass


class FormatError(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedFile(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


def _encode_array(a: np.ndarray) -> tuple[str, tuple, bytes]:
    a = np.ascontiguousarray(a)
    if a.dtype.kind not in "biuf":
        raise TypeError(f"unsupported dtype {a.dtype}")
    le = a.dtype.newbyteorder("<")
    dt = le.str if a.dtype.itemsize > 1 else a.dtype.str
    return dt, a.shape, a.astype(le, copy=False).tobytes()


def dumps(sections: dict[str, object], version: int = FORMAT_VERSION) -> bytes:
    """Serialize named sections; ndarrays stay binary, anything else goes to JSON."""
    table, payloads = [], []
    for name, value in sections.items():
        if isinstance(value, np.ndarray):
            dt, shape, data = _encode_array(value)
            kind = _ARRAY
        else:
            dt, shape = "", ()
            data = json.dumps(value, sort_keys=True, separators=(",", ":")).encode("utf-8")
            kind = _JSON
        nb, db = name.encode("utf-8"), dt.encode("ascii")
        entry = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", kind, len(db)) + db
        entry += struct.pack("<B", len(shape)) + struct.pack(f"<{len(shape)}Q", *shape)
        entry += struct.pack("<Q", len(data))
        table.append(entry)
        payloads.append(data)
    body = MAGIC + struct.pack("<II", version, len(table)) + b"".join(table) + b"".join(payloads)
    return body + hashlib.sha256(body).digest()


class _Reader:
    def __init__(self, buf: bytes, pos: int, end: int):
        self.buf, self.pos, self.end = buf, pos, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedFile("file ends inside the section table")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf: bytes, expected_version: int = FORMAT_VERSION) -> dict[str, object]:
    if len(buf) < len(MAGIC) + 8:
        raise TruncatedFile("file too short for a header")
    if buf[: len(MAGIC)] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, n_sections = struct.unpack_from("<II", buf, len(MAGIC))
    if version != expected_version:
        raise VersionMismatch(f"format version {version}, this build reads {expected_version}")
    r = _Reader(buf, len(MAGIC) + 8, len(buf))
    entries = []
    for _ in range(n_sections):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8", errors="replace")
        kind, dlen = r.unpack("<BB")
        dt = r.take(dlen).decode("ascii", errors="replace")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q")
        (length,) = r.unpack("<Q")
        entries.append((name, kind, dt, shape, length))
    payload_end = r.pos + sum(e[4] for e in entries)
    if payload_end + _DIGEST > len(buf):
        raise TruncatedFile(f"expected {payload_end + _DIGEST} bytes, found {len(buf)}")
    if payload_end + _DIGEST < len(buf):
        raise FormatError("trailing bytes after checksum")
    if hashlib.sha256(buf[:payload_end]).digest() != buf[payload_end:]:
        raise ChecksumError("checksum mismatch; file is corrupted")
    out, pos = {}, r.pos
    for name, kind, dt, shape, length in entries:
        data = buf[pos : pos + length]
        pos += length
        if kind == _JSON:
            out[name] = json.loads(data.decode("utf-8"))
        elif kind == _ARRAY:
            dtype = np.dtype(dt)
            out[name] = np.frombuffer(data, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="), copy=True)
        else:
            raise FormatError(f"unknown section kind {kind} for {name!r}")
    return out


def save(path: str | Path, sections: dict[str, object]) -> str:
    """Write atomically; returns the SHA-256 hex digest of the file."""
    path = Path(path)
    blob = dumps(sections)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return hashlib.sha256(blob).hexdigest()


def load(path: str | Path) -> dict[str, object]:
    return loads(Path(path).read_bytes())


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def split_prefix(sections: dict, prefix: str) -> dict:
    p = prefix + "/"
    return {k[len(p):]: v for k, v in sections.items() if k.startswith(p)}


def join_prefix(prefix: str, arrays: dict) -> dict:
    return {f"{prefix}/{k}": v for k, v in arrays.items()}
