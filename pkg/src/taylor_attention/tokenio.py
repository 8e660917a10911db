"""Binary token stream files.

Layout, all little-endian::

    magic   4 bytes  b"SATA"
    version u16      1
    d_K     u16
    d_V     u16
    count   u64
    count records of float64: d_K query, d_K key, d_V value
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterator

import numpy as np

from .attention import Tokens, TokenTriple, as_tokens
from .exceptions import DomainError

MAGIC = b"SATA"
VERSION = 1
HEADER = struct.Struct("<4sHHHQ")


def write_token_stream(stream: BinaryIO, tokens) -> None:
    tokens = as_tokens(tokens)
    d_k, d_v = tokens.key_width, tokens.value_width
    if d_k > 0xFFFF or d_v > 0xFFFF:
        raise DomainError("widths must fit in 16 bits")
    stream.write(HEADER.pack(MAGIC, VERSION, d_k, d_v, len(tokens)))
    records = np.concatenate([tokens.queries, tokens.keys, tokens.values], axis=1).astype("<f8")
    stream.write(records.tobytes())


def read_header(stream: BinaryIO) -> tuple[int, int, int]:
    raw = stream.read(HEADER.size)
    if len(raw) != HEADER.size:
        raise DomainError("truncated token stream header")
    magic, version, d_k, d_v, count = HEADER.unpack(raw)
    if magic != MAGIC:
        raise DomainError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DomainError(f"unsupported token stream version {version}")
    return d_k, d_v, count


def iter_token_stream(stream: BinaryIO, block: int = 4096) -> Iterator[TokenTriple]:
    """Yield tokens one at a time, reading ``block`` records per read."""
    d_k, d_v, count = read_header(stream)
    width = 2 * d_k + d_v
    left = count
    while left:
        m = min(block, left)
        raw = stream.read(8 * width * m)
        if len(raw) != 8 * width * m:
            raise DomainError("token stream ended early")
        recs = np.frombuffer(raw, dtype="<f8").reshape(m, width)
        for r in recs:
            yield TokenTriple(r[:d_k], r[d_k:2 * d_k], r[2 * d_k:])
        left -= m


def read_token_stream(stream: BinaryIO) -> Tokens:
    d_k, d_v, count = read_header(stream)
    width = 2 * d_k + d_v
    raw = stream.read(8 * width * count)
    if len(raw) != 8 * width * count:
        raise DomainError("token stream ended early")
    recs = np.frombuffer(raw, dtype="<f8").reshape(count, width).astype(np.float64)
    return Tokens(recs[:, :d_k], recs[:, d_k:2 * d_k], recs[:, 2 * d_k:])
