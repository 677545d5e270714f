"""Canonical deterministic encoding.

Every structure that is hashed or signed anywhere in the system goes through
``encode``. The format is length-prefixed and type-tagged, which makes it
injective: two distinct values never share an encoding, and ``decode`` is an
exact inverse. Supported values are None, bool, int, bytes, str, list, tuple,
dict with str keys, registered dataclasses and registered enums. Floats are
rejected on purpose; nothing consensus-relevant may carry one.
"""

from __future__ import annotations

import dataclasses
import enum
import struct
from typing import Any, Callable, Iterator

from .errors import EncodingError

_TAG_NONE = b"N"
_TAG_TRUE = b"T"
_TAG_FALSE = b"F"
_TAG_INT = b"i"
_TAG_BYTES = b"b"
_TAG_STR = b"s"
_TAG_LIST = b"l"
_TAG_TUPLE = b"u"
_TAG_DICT = b"d"
_TAG_DATACLASS = b"D"
_TAG_ENUM = b"E"

_registry: dict[str, type] = {}


def canonical(cls: type) -> type:
    """Class decorator registering a dataclass or Enum for encoding.

    Registered names must be unique package-wide; the name is part of the
    wire format, so renaming a class is a breaking change.
    """
    name = cls.__name__
    if name in _registry and _registry[name] is not cls:
        raise EncodingError(f"type name already registered: {name}")
    if not (dataclasses.is_dataclass(cls) or issubclass(cls, enum.Enum)):
        raise EncodingError(f"not a dataclass or Enum: {name}")
    _registry[name] = cls
    return cls


def registered_type(name: str) -> type:
    try:
        return _registry[name]
    except KeyError:
        raise EncodingError(f"unknown type name: {name}") from None


def _u32(n: int) -> bytes:
    if n < 0 or n > 0xFFFFFFFF:
        raise EncodingError(f"length out of range: {n}")
    return struct.pack(">I", n)


def _encode_into(value: Any, out: list[bytes]) -> None:
    if value is None:
        out.append(_TAG_NONE)
    elif value is True:
        out.append(_TAG_TRUE)
    elif value is False:
        out.append(_TAG_FALSE)
    elif isinstance(value, enum.Enum):
        cls = type(value)
        if _registry.get(cls.__name__) is not cls:
            raise EncodingError(f"unregistered enum: {cls.__name__}")
        out.append(_TAG_ENUM)
        _encode_into(cls.__name__, out)
        _encode_into(value.name, out)
    elif isinstance(value, int):
        # sign byte + minimal big-endian magnitude; zero has empty magnitude
        sign = b"\x01" if value < 0 else b"\x00"
        mag = abs(value)
        body = mag.to_bytes((mag.bit_length() + 7) // 8, "big")
        out.append(_TAG_INT + sign + _u32(len(body)) + body)
    elif isinstance(value, bytes):
        out.append(_TAG_BYTES + _u32(len(value)))
        out.append(value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        out.append(_TAG_STR + _u32(len(raw)))
        out.append(raw)
    elif isinstance(value, (list, tuple)):
        out.append((_TAG_LIST if isinstance(value, list) else _TAG_TUPLE) + _u32(len(value)))
        for item in value:
            _encode_into(item, out)
    elif isinstance(value, dict):
        keys = list(value.keys())
        for k in keys:
            if not isinstance(k, str):
                raise EncodingError("dict keys must be str")
        keys.sort()
        out.append(_TAG_DICT + _u32(len(keys)))
        for k in keys:
            _encode_into(k, out)
            _encode_into(value[k], out)
    elif dataclasses.is_dataclass(value) and not isinstance(value, type):
        cls = type(value)
        if _registry.get(cls.__name__) is not cls:
            raise EncodingError(f"unregistered dataclass: {cls.__name__}")
        fields = dataclasses.fields(cls)
        out.append(_TAG_DATACLASS)
        _encode_into(cls.__name__, out)
        out.append(_u32(len(fields)))
        for f in fields:
            _encode_into(getattr(value, f.name), out)
    else:
        raise EncodingError(f"unencodable value of type {type(value).__name__}")


def encode(value: Any) -> bytes:
    out: list[bytes] = []
    _encode_into(value, out)
    return b"".join(out)


class _Reader:
    __slots__ = ("data", "pos")

    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise EncodingError("truncated encoding")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack(">I", self.take(4))[0]


def _decode_from(r: _Reader) -> Any:
    tag = r.take(1)
    if tag == _TAG_NONE:
        return None
    if tag == _TAG_TRUE:
        return True
    if tag == _TAG_FALSE:
        return False
    if tag == _TAG_INT:
        sign = r.take(1)
        body = r.take(r.u32())
        if body[:1] == b"\x00":
            raise EncodingError("non-minimal int magnitude")
        mag = int.from_bytes(body, "big")
        if sign == b"\x00":
            return mag
        if sign == b"\x01":
            if mag == 0:
                raise EncodingError("negative zero")
            return -mag
        raise EncodingError("bad int sign byte")
    if tag == _TAG_BYTES:
        return r.take(r.u32())
    if tag == _TAG_STR:
        raw = r.take(r.u32())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise EncodingError("invalid utf-8 in str") from exc
    if tag in (_TAG_LIST, _TAG_TUPLE):
        count = r.u32()
        items = [_decode_from(r) for _ in range(count)]
        return items if tag == _TAG_LIST else tuple(items)
    if tag == _TAG_DICT:
        count = r.u32()
        result: dict[str, Any] = {}
        prev: str | None = None
        for _ in range(count):
            k = _decode_from(r)
            if not isinstance(k, str):
                raise EncodingError("dict key must decode to str")
            if prev is not None and k <= prev:
                raise EncodingError("dict keys not in canonical order")
            prev = k
            result[k] = _decode_from(r)
        return result
    if tag == _TAG_ENUM:
        type_name = _decode_from(r)
        member = _decode_from(r)
        cls = registered_type(type_name)
        if not (isinstance(type_name, str) and isinstance(member, str) and issubclass(cls, enum.Enum)):
            raise EncodingError("malformed enum encoding")
        try:
            return cls[member]
        except KeyError:
            raise EncodingError(f"unknown enum member {type_name}.{member}") from None
    if tag == _TAG_DATACLASS:
        type_name = _decode_from(r)
        if not isinstance(type_name, str):
            raise EncodingError("malformed dataclass encoding")
        cls = registered_type(type_name)
        fields = dataclasses.fields(cls)
        count = r.u32()
        if count != len(fields):
            raise EncodingError(f"field count mismatch for {type_name}")
        values = [_decode_from(r) for _ in range(count)]
        try:
            return cls(*values)
        except Exception as exc:
            raise EncodingError(f"cannot reconstruct {type_name}: {exc}") from exc
    raise EncodingError(f"unknown tag {tag!r}")


def decode(data: bytes) -> Any:
    r = _Reader(data)
    value = _decode_from(r)
    if r.pos != len(data):
        raise EncodingError("trailing bytes after encoding")
    return value


def iter_frames(data: bytes) -> Iterator[bytes]:
    """Split a length-prefixed concatenation (4-byte BE sizes) into frames."""
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise EncodingError("truncated frame header")
        (size,) = struct.unpack(">I", data[pos : pos + 4])
        pos += 4
        if pos + size > len(data):
            raise EncodingError("truncated frame body")
        yield data[pos : pos + size]
        pos += size


def frame(data: bytes) -> bytes:
    return _u32(len(data)) + data
