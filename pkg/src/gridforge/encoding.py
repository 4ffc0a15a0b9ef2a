"""Canonical document encoding.

Certificates, tokens, envelopes, assertions, and audit entries all serialize
to one deterministic, length-prefixed, key-sorted textual format, so that a
value encodes to exactly one byte string and any byte perturbation is either
a decode failure or a semantic change caught by a signature check.

Grammar (all ASCII):

    value := "n0:"                      none
           | "i" LEN ":" DECIMAL        integer, no leading zeros, "-" allowed
           | "s" LEN ":" UTF8           string
           | "b" LEN ":" LOWERHEX       bytes, lowercase hex, even length
           | "l" LEN ":" value*         list
           | "m" LEN ":" (skey value)*  map, string keys strictly ascending

LEN is the byte length of the payload, itself rendered in decimal with no
leading zeros. Decoding is strict: the whole input must be consumed and every
canonical-form rule is enforced, so decode(encode(v)) == v and
encode(decode(b)) == b.
"""

from __future__ import annotations

from .errors import MalformedDocument

_HEX = set(b"0123456789abcdef")
_DIGITS = set(b"0123456789")

Value = None | int | str | bytes | list | dict


def encode(value: Value) -> bytes:
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def _encode_into(value: Value, out: bytearray) -> None:
    if value is None:
        out += b"n0:"
    elif isinstance(value, bool):
        _encode_into(int(value), out)
    elif isinstance(value, int):
        body = str(value).encode("ascii")
        out += b"i%d:%s" % (len(body), body)
    elif isinstance(value, str):
        body = value.encode("utf-8")
        out += b"s%d:%s" % (len(body), body)
    elif isinstance(value, (bytes, bytearray, memoryview)):
        body = bytes(value).hex().encode("ascii")
        out += b"b%d:%s" % (len(body), body)
    elif isinstance(value, (list, tuple)):
        payload = bytearray()
        for item in value:
            _encode_into(item, payload)
        out += b"l%d:" % len(payload)
        out += payload
    elif isinstance(value, dict):
        payload = bytearray()
        last = None
        for key in sorted(value, key=lambda k: k.encode("utf-8")):
            if not isinstance(key, str):
                raise TypeError(f"map keys must be str, got {type(key).__name__}")
            if last is not None and key == last:
                raise TypeError("duplicate map key")
            last = key
            _encode_into(key, payload)
            _encode_into(value[key], payload)
        out += b"m%d:" % len(payload)
        out += payload
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")


def decode(data: bytes) -> Value:
    value, end = _decode_at(data, 0)
    if end != len(data):
        raise MalformedDocument("trailing bytes after document")
    return value


def _decode_len(data: bytes, pos: int) -> tuple[int, int]:
    start = pos
    while pos < len(data) and data[pos] in _DIGITS:
        pos += 1
    if pos == start or pos >= len(data) or data[pos] != 0x3A:  # ":"
        raise MalformedDocument("bad length prefix")
    digits = data[start:pos]
    if len(digits) > 1 and digits[0] == 0x30:
        raise MalformedDocument("length has leading zero")
    return int(digits), pos + 1


def _decode_at(data: bytes, pos: int) -> tuple[Value, int]:
    if pos >= len(data):
        raise MalformedDocument("truncated document")
    tag = data[pos]
    length, body_start = _decode_len(data, pos + 1)
    body_end = body_start + length
    if body_end > len(data):
        raise MalformedDocument("payload overruns document")
    body = data[body_start:body_end]

    if tag == 0x6E:  # n
        if length != 0:
            raise MalformedDocument("none payload must be empty")
        return None, body_end
    if tag == 0x69:  # i
        return _decode_int(body), body_end
    if tag == 0x73:  # s
        try:
            return body.decode("utf-8"), body_end
        except UnicodeDecodeError as exc:
            raise MalformedDocument("invalid utf-8 in string") from exc
    if tag == 0x62:  # b
        if length % 2 or any(c not in _HEX for c in body):
            raise MalformedDocument("bytes payload is not lowercase hex")
        return bytes.fromhex(body.decode("ascii")), body_end
    if tag == 0x6C:  # l
        items: list = []
        cursor = body_start
        while cursor < body_end:
            item, cursor = _decode_at(data, cursor)
            items.append(item)
        if cursor != body_end:
            raise MalformedDocument("list payload misaligned")
        return items, body_end
    if tag == 0x6D:  # m
        mapping: dict = {}
        cursor = body_start
        prev_key: bytes | None = None
        while cursor < body_end:
            key, cursor = _decode_at(data, cursor)
            if not isinstance(key, str):
                raise MalformedDocument("map key is not a string")
            raw = key.encode("utf-8")
            if prev_key is not None and raw <= prev_key:
                raise MalformedDocument("map keys not strictly ascending")
            prev_key = raw
            if cursor >= body_end:
                raise MalformedDocument("map key without value")
            value, cursor = _decode_at(data, cursor)
            mapping[key] = value
        if cursor != body_end:
            raise MalformedDocument("map payload misaligned")
        return mapping, body_end
    raise MalformedDocument(f"unknown tag byte {tag:#x}")


def _decode_int(body: bytes) -> int:
    text = body
    if text[:1] == b"-":
        text = text[1:]
    if not text or any(c not in _DIGITS for c in text):
        raise MalformedDocument("invalid integer payload")
    if len(text) > 1 and text[0] == 0x30:
        raise MalformedDocument("integer has leading zero")
    if body == b"-0":
        raise MalformedDocument("negative zero")
    return int(body)


def encode_text(value: Value) -> str:
    """Encoded document as text (UTF-8; the framing itself is pure ASCII)."""
    return encode(value).decode("utf-8")


def write_doc(path, value: Value) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(encode_text(value))
        fh.write("\n")


def read_doc(path) -> Value:
    with open(path, "r", encoding="utf-8") as fh:
        return decode(fh.read().strip().encode("utf-8"))


def expect_map(value: Value, keys: set[str]) -> dict:
    """Require `value` to be a map with exactly `keys`; used by strict doc parsers."""
    if not isinstance(value, dict) or set(value) != keys:
        raise MalformedDocument("document fields do not match expected shape")
    return value
