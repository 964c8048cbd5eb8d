"""WITC binary checkpoints and ``key = value`` config files.

Checkpoint layout (all integers little-endian)::

    b"WITC"                      magic
    u32  version
    u64  config length, then UTF-8 JSON config blob
    u32  tensor count
    per tensor:
        u32 name length, UTF-8 name
        u32 rank, then u64 per dim
        u8  dtype code (0 = float32)
        raw data
    u32  CRC32 of every preceding byte
"""
import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field, fields

import numpy as np

MAGIC = b"WITC"
VERSION = 1
DTYPES = {0: np.dtype("<f4")}


class CheckpointError(ValueError):
    def __init__(self, field_name: str, msg: str):
        super().__init__(f"checkpoint {field_name}: {msg}")
        self.field = field_name


class ConfigError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict = field(default_factory=dict)
    tensors: dict = field(default_factory=dict)
    version: int = VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    blob = json.dumps({"kind": ckpt.kind, **ckpt.config}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", ckpt.version), struct.pack("<Q", len(blob)), blob,
             struct.pack("<I", len(ckpt.tensors))]
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name], dtype=DTYPES[0], order="C")
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), struct.pack("<B", 0), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(what, "truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_checkpoint(buf: bytes) -> Checkpoint:
    if len(buf) < 8:
        raise CheckpointError("length", f"only {len(buf)} bytes")
    if buf[:4] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, found {buf[:4]!r}")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise CheckpointError("version", f"unsupported format version {version}")
    if len(buf) < 12:
        raise CheckpointError("crc", "file too short to hold a CRC")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError("crc", "CRC32 mismatch (corrupt or truncated file)")

    r = _Reader(body)
    r.pos = 8
    (n,) = r.unpack("<Q", "config length")
    try:
        config = json.loads(r.take(n, "config").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("config", str(exc)) from None
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        (ln,) = r.unpack("<I", f"tensor {i} name length")
        name = r.take(ln, f"tensor {i} name").decode("utf-8")
        (rank,) = r.unpack("<I", f"{name} rank")
        dims = r.unpack(f"<{rank}Q", f"{name} dims") if rank else ()
        (code,) = r.unpack("<B", f"{name} dtype")
        if code not in DTYPES:
            raise CheckpointError(f"{name} dtype", f"unknown dtype code {code}")
        dt = DTYPES[code]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        tensors[name] = np.frombuffer(r.take(nbytes, f"{name} data"), dtype=dt).reshape(dims).copy()
    if r.pos != len(body):
        raise CheckpointError("length", f"{len(body) - r.pos} trailing bytes")
    kind = config.pop("kind", "")
    return Checkpoint(kind=kind, config=config, tensors=tensors, version=version)


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    data = encode_checkpoint(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".witc-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# --- config files -------------------------------------------------------------

def _coerce(value: str, kind, key: str):
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind is tuple:
            return tuple(float(v) for v in value.split(","))
        if kind in (int, float, str):
            return kind(value)
        if value.lower() == "none":
            return None
        return float(value) if any(c in value for c in ".eE") else int(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


def parse_config(text: str, schema: dict) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys fail."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in schema:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _coerce(value, schema[key], key)
    return out


def read_config(path, schema: dict) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), schema)


def schema_of(*dataclasses) -> dict:
    """Map field name -> python type for the given dataclasses."""
    out = {}
    for dc in dataclasses:
        for f in fields(dc):
            t = f.type if isinstance(f.type, type) else str(f.type)
            if t in ("int", int):
                t = int
            elif t in ("float", float):
                t = float
            elif t in ("str", str):
                t = str
            elif t in ("bool", bool):
                t = bool
            elif t in ("tuple", tuple):
                t = tuple
            else:
                t = None
            out[f.name] = t
    return out
