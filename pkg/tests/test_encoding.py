"""Canonical codec: round-trips, determinism, and strictness."""

import pytest
from hypothesis import given, strategies as st

from gridforge import encoding
from gridforge.errors import MalformedDocument

scalars = st.one_of(
    st.none(),
    st.integers(min_value=-(2**63), max_value=2**63),
    st.text(max_size=40),
    st.binary(max_size=40),
)
values = st.recursive(
    scalars,
    lambda children: st.one_of(
        st.lists(children, max_size=5),
        st.dictionaries(st.text(max_size=10), children, max_size=5),
    ),
    max_leaves=20,
)


@given(values)
def test_roundtrip(value):
    assert encoding.decode(encoding.encode(value)) == value


@given(values)
def test_encode_deterministic(value):
    assert encoding.encode(value) == encoding.encode(value)


@given(values)
def test_reencode_identity(value):
    data = encoding.encode(value)
    assert encoding.encode(encoding.decode(data)) == data


def test_key_order_irrelevant():
    a = encoding.encode({"b": 1, "a": 2})
    b = encoding.encode({"a": 2, "b": 1})
    assert a == b


def test_framing_is_ascii_text():
    data = encoding.encode({"k": "déjà", "b": b"\xff\x00", "n": -12})
    data.decode("utf-8")
    # everything outside string payloads is plain ASCII
    assert encoding.encode({"b": b"\xff\x00", "n": -12}).isascii()


def test_bool_encodes_as_int():
    assert encoding.decode(encoding.encode(True)) == 1
    assert encoding.encode(False) == encoding.encode(0)


@pytest.mark.parametrize(
    "raw",
    [
        b"",
        b"x0:",                # unknown tag
        b"i2:07",              # leading zero
        b"i1:7extra",          # trailing bytes
        b"i2:-0",              # negative zero
        b"b2:AB",              # uppercase hex
        b"b3:abc",             # odd hex length
        b"b2:zz",              # non-hex
        b"s3:\xff\xff\xff",    # invalid utf-8
        b"n1:x",               # none with payload
        b"i02:11",             # length with leading zero
        b"m8:s1:bn0:",         # map payload misaligned
        b"l5:i1:5",            # list payload overruns
    ],
)
def test_strict_decode_rejects(raw):
    with pytest.raises(MalformedDocument):
        encoding.decode(raw)


def test_map_keys_must_ascend():
    # hand-built map with keys out of order
    k1 = encoding.encode("b") + encoding.encode(1)
    k2 = encoding.encode("a") + encoding.encode(2)
    payload = k1 + k2
    raw = b"m%d:%s" % (len(payload), payload)
    with pytest.raises(MalformedDocument):
        encoding.decode(raw)


def test_doc_file_roundtrip(tmp_path):
    value = {"chain": [b"\x01\x02", None], "n": 7}
    path = tmp_path / "doc"
    encoding.write_doc(path, value)
    assert encoding.read_doc(path) == value
