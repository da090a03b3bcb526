"""Little-endian binary record helpers shared by the feature and checkpoint formats."""

from __future__ import annotations

import struct


class FormatError(RuntimeError):
    """A binary file failed validation: bad magic, truncation, or stray bytes."""


def write_u32(fh, value: int) -> None:
    fh.write(struct.pack("<I", value))


def write_u64(fh, value: int) -> None:
    fh.write(struct.pack("<Q", value))


def write_str(fh, text: str) -> None:
    raw = text.encode("utf-8")
    write_u32(fh, len(raw))
    fh.write(raw)


def read_exact(fh, n: int) -> bytes:
    raw = fh.read(n)
    if len(raw) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(raw)}")
    return raw


def read_u32(fh) -> int:
    return struct.unpack("<I", read_exact(fh, 4))[0]


def read_u64(fh) -> int:
    return struct.unpack("<Q", read_exact(fh, 8))[0]


def read_str(fh) -> str:
    n = read_u32(fh)
    try:
        return read_exact(fh, n).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError(f"invalid utf-8 string field: {exc}") from exc


def expect_eof(fh) -> None:
    trailing = fh.read(1)
    if trailing:
        raise FormatError("trailing bytes after payload")
