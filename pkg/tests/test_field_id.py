"""Field id packing: bit positions pinned against published raw values."""

import pytest
from hypothesis import given, strategies as st

from tdxmodel.md_codec import (
    MD_CTX_TD,
    MD_CTX_VP,
    EncodingError,
    MdFieldId,
    decode_field_id,
    encode_field_id,
)

ATTRIBUTES_ID = 0x1110000300000000
XBUFF_ID = 0x1220000300000000
X2APIC_IDS_ID = 0x9C10000200000000


def test_attributes_id_encodes():
    parts = MdFieldId(field_code=0, element_size_code=3, context_code=MD_CTX_TD, class_code=0x11)
    assert encode_field_id(parts) == ATTRIBUTES_ID


def test_all_zero_parts_encode_to_zero():
    assert encode_field_id(MdFieldId(element_size_code=0, context_code=0)) == 0


def test_xbuff_id_encodes():
    parts = MdFieldId(field_code=0, element_size_code=3, context_code=MD_CTX_VP, class_code=0x12)
    assert encode_field_id(parts) == XBUFF_ID


def test_x2apic_decode():
    fid = decode_field_id(X2APIC_IDS_ID)
    assert fid.class_code == 0x1C
    assert fid.context_code == MD_CTX_TD
    assert fid.field_code == 0
    assert fid.element_size_code == 2
    assert fid.ignored == 1


def test_write_mask_bit_51():
    assert decode_field_id(1 << 51).write_mask_valid == 1
    assert decode_field_id(~(1 << 51) & (2**64 - 1)).write_mask_valid == 0


def test_decode_reports_reserved_bits():
    assert not decode_field_id(ATTRIBUTES_ID).has_reserved_bits
    assert decode_field_id(1 << 24).has_reserved_bits
    assert decode_field_id(1 << 47).has_reserved_bits
    assert decode_field_id(1 << 55).has_reserved_bits
    assert decode_field_id(1 << 62).has_reserved_bits


def test_encode_rejects_overflow_naming_the_field():
    with pytest.raises(EncodingError, match="field_code"):
        encode_field_id(MdFieldId(field_code=1 << 24))
    with pytest.raises(EncodingError, match="last_field_in_sequence"):
        encode_field_id(MdFieldId(last_field_in_sequence=512))
    with pytest.raises(EncodingError, match="reserved_1"):
        encode_field_id(MdFieldId(reserved_1=1))


def test_num_fields_range():
    assert MdFieldId(last_field_in_sequence=0).num_fields == 1
    assert MdFieldId(last_field_in_sequence=511).num_fields == 512


RESERVED_MASK = (0xFF << 24) | (0x7 << 47) | (1 << 55) | (1 << 62)


@given(st.integers(min_value=0, max_value=2**64 - 1))
def test_roundtrip_with_reserved_cleared(raw):
    raw &= ~RESERVED_MASK
    assert encode_field_id(decode_field_id(raw)) == raw


@given(st.integers(min_value=0, max_value=2**64 - 1))
def test_decode_is_lossless(raw):
    assert decode_field_id(raw).to_raw() == raw


def test_thousand_random_roundtrips():
    import random

    rng = random.Random(0x1D)
    for _ in range(1000):
        raw = rng.getrandbits(64) & ~RESERVED_MASK
        assert encode_field_id(decode_field_id(raw)) == raw
