"""Named-tensor archive (.ntar): flat, deterministic tensor storage.

Layout (little-endian throughout): magic ``NTAR``, version u16, entry count
u32, then per entry: name (u16 length + UTF-8), dtype tag u8, frozen flag
u8, ndim u8, shape u32 each, payload length u64, raw row-major payload.
Entry order is preserved and names are unique, so identical contents
serialize to identical bytes. Writes go through a temp file and rename.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, LoadError, TruncatedError, VersionError

MAGIC = b"NTAR"
VERSION = 1

_DTYPE_TAGS = {
    np.dtype("float32"): 0,
    np.dtype("float64"): 1,
    np.dtype("int32"): 2,
    np.dtype("int64"): 3,
    np.dtype("uint8"): 4,
}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class Entry:
    array: np.ndarray
    frozen: bool = False


class NamedTensorArchive:
    """Ordered mapping of unique names to (array, frozen-flag) entries."""

    def __init__(self):
        self._entries: dict[str, Entry] = {}

    def add(self, name: str, array, frozen: bool = False) -> None:
        if name in self._entries:
            raise LoadError(f"duplicate tensor name {name!r}")
        arr = np.ascontiguousarray(array)
        if arr.dtype not in _DTYPE_TAGS:
            raise LoadError(f"unsupported dtype {arr.dtype} for {name!r}")
        self._entries[name] = Entry(arr, bool(frozen))

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self._entries[name].array
        except KeyError:
            raise LoadError(f"missing tensor {name!r}",
                            offenders=[name]) from None

    def frozen(self, name: str) -> bool:
        return self[name] is not None and self._entries[name].frozen

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return ((k, e.array, e.frozen) for k, e in self._entries.items())

    def to_bytes(self) -> bytes:
        out = bytearray()
        out += MAGIC
        out += struct.pack("<HI", VERSION, len(self._entries))
        for name, entry in self._entries.items():
            raw = name.encode("utf-8")
            arr = entry.array
            out += struct.pack("<H", len(raw))
            out += raw
            out += struct.pack(
                "<BBB", _DTYPE_TAGS[arr.dtype], int(entry.frozen), arr.ndim
            )
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
            payload = arr.tobytes()
            out += struct.pack("<Q", len(payload))
            out += payload
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "NamedTensorArchive":
        def need(pos, n):
            if pos + n > len(data):
                raise TruncatedError("archive ended early", position=pos)
            return pos + n

        pos = need(0, 4) - 4
        if data[:4] != MAGIC:
            raise BadMagicError("not a named-tensor archive",
                                magic=data[:4].hex())
        pos = 4
        need(pos, 6)
        version, count = struct.unpack_from("<HI", data, pos)
        pos += 6
        if version != VERSION:
            raise VersionError(f"unsupported archive version {version}")
        archive = cls()
        for _ in range(count):
            need(pos, 2)
            (name_len,) = struct.unpack_from("<H", data, pos)
            pos = need(pos + 2, name_len) - name_len
            name = data[pos:pos + name_len].decode("utf-8")
            pos += name_len
            need(pos, 3)
            tag, frozen, ndim = struct.unpack_from("<BBB", data, pos)
            pos += 3
            if tag not in _TAG_DTYPES:
                raise LoadError(f"unknown dtype tag {tag} for {name!r}")
            need(pos, 4 * ndim)
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            need(pos, 8)
            (nbytes,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            dtype = _TAG_DTYPES[tag]
            expect = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if nbytes != expect:
                raise LoadError(
                    f"payload size mismatch for {name!r}",
                    offenders=[name], expected=expect, actual=nbytes,
                )
            need(pos, nbytes)
            arr = np.frombuffer(
                data, dtype=dtype, count=expect // dtype.itemsize, offset=pos
            ).reshape(shape).copy()
            pos += nbytes
            archive.add(name, arr, frozen=bool(frozen))
        return archive

    def save(self, path) -> None:
        path = os.fspath(path)
        blob = self.to_bytes()
        fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".",
                                   suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(blob)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def load(cls, path) -> "NamedTensorArchive":
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise LoadError(f"cannot read archive: {exc}") from exc
        return cls.from_bytes(data)
