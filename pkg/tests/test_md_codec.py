"""Codec walk behavior: wrap arithmetic, OOB spans, skips, and dump round-trips."""

import random

import pytest

from tdxmodel import md_codec as md
from tdxmodel import status as S
from tdxmodel.md_codec import (
    MD_CTX_TD,
    MD_CTX_VP,
    LookupIterator,
    MdListHeader,
    MdSequence,
    ParseArena,
    WriteMode,
    build_list,
    decode_field_id,
    make_sequence_header,
    parse_list,
)
from tdxmodel.scenarios import LEAK_SENTINEL, crafted_vp_list, list_header_underflow_list

from conftest import DictSink


# --- arena -------------------------------------------------------------------

def test_arena_logs_and_flags_reads():
    arena = ParseArena(b"\xaa" * 64)
    arena.read_u64(0)
    arena.read_u64(4088)
    arena.read_u64(4096)
    flags = [r.oob for r in arena.reads]
    assert flags == [False, False, True]
    assert arena.max_oob_span() == 8


def test_arena_sentinels_self_identify():
    arena = ParseArena(b"")
    start, end = arena.region_span("shadow_stack")
    pattern = ParseArena.region_pattern("shadow_stack", end - start)
    assert bytes(arena.buffer[start:end]) == pattern
    assert bytes(arena.buffer[start:end]) != ParseArena.region_pattern("canary", end - start)


def test_arena_plant_and_reads_past_buffer():
    arena = ParseArena(b"", plants={12280: LEAK_SENTINEL})
    assert arena.peek_u64(12280) == LEAK_SENTINEL
    assert arena.read_u64(len(arena.buffer) + 64) == 0
    assert arena.reads[-1].oob


# --- list container ----------------------------------------------------------

def test_list_serializes_to_4096_zero_padded():
    seq = MdSequence(make_sequence_header(MD_CTX_TD, 0x11, 0), [0x1234])
    data = build_list([seq]).to_bytes()
    assert len(data) == 4096
    assert data[24:] == b"\x00" * (4096 - 24)
    parsed = parse_list(data)
    assert parsed.header.list_buff_size == 24
    assert parsed.sequences[0].elements == [0x1234]


def test_header_is_eight_bytes():
    header = MdListHeader(list_buff_size=24, num_sequences=1)
    assert len(header.to_bytes()) == 8
    assert MdListHeader.from_bytes(header.to_bytes()) == header


# --- write_list basic cases ----------------------------------------------------

def _arena_for(header: MdListHeader, body: bytes) -> ParseArena:
    return ParseArena((header.to_bytes() + body).ljust(4096, b"\x00"))


def test_empty_list_succeeds(catalog, sink):
    arena = _arena_for(MdListHeader(list_buff_size=8, num_sequences=0), b"")
    result = md.write_list(catalog, MD_CTX_TD, md.MD_FIELD_ID_NA, arena, sink, WriteMode.fixed())
    assert result.status == S.TDX_SUCCESS
    assert sink.values == {}


@pytest.mark.parametrize("lbs", range(8))
def test_header_underflow_wraps_per_oracle(catalog, sink, lbs):
    # Independent oracle: 16-bit wrapping subtraction of the 8-byte header.
    expected = (lbs - 8) % 2**16
    data = bytearray(list_header_underflow_list())
    data[0:2] = lbs.to_bytes(2, "little")
    arena = ParseArena(bytes(data))
    result = md.write_list(catalog, MD_CTX_TD, md.MD_FIELD_ID_NA, arena, sink,
                           WriteMode.vulnerable())
    assert result.initial_remaining == expected
    assert arena.oob_reads(), "walk must cross the list end"


@pytest.mark.parametrize("lbs", range(8))
def test_fixed_mode_rejects_small_header_before_sequences(catalog, sink, lbs):
    data = bytearray(list_header_underflow_list())
    data[0:2] = lbs.to_bytes(2, "little")
    arena = ParseArena(bytes(data))
    result = md.write_list(catalog, MD_CTX_TD, md.MD_FIELD_ID_NA, arena, sink, WriteMode.fixed())
    assert S.status_class(result.status) == S.TDX_METADATA_LIST_OVERFLOW
    assert len(arena.reads) == 1  # only the list header was read
    assert not arena.oob_reads()


def test_context_mismatch_reports_header_and_index(catalog, sink):
    seq = MdSequence(make_sequence_header(MD_CTX_VP, 0x11, 0x20), [3])  # vp id in a td list
    arena = ParseArena(build_list([seq]).to_bytes())
    result = md.write_list(catalog, MD_CTX_TD, md.MD_FIELD_ID_NA, arena, sink, WriteMode.fixed())
    assert result.status == S.with_l2_details(S.TDX_METADATA_FIELD_ID_INCORRECT, 0xFFFF, 0)
    assert result.ext_err_info[0] == seq.header_raw


def test_unknown_field_is_field_id_incorrect(catalog, sink):
    seq = MdSequence(make_sequence_header(MD_CTX_TD, 0x3F, 0x99), [1])
    arena = ParseArena(build_list([seq]).to_bytes())
    result = md.write_list(catalog, MD_CTX_TD, md.MD_FIELD_ID_NA, arena, sink, WriteMode.fixed())
    assert S.status_class(result.status) == S.TDX_METADATA_FIELD_ID_INCORRECT


# --- write_sequence ------------------------------------------------------------

def _sequence_walk(catalog, sink, body: bytes, remaining: int, mode: WriteMode,
                   ctx: int = MD_CTX_VP):
    arena = ParseArena(body.ljust(4096, b"\x00"))
    header_raw = arena.read_u64(0)
    fid = decode_field_id(header_raw)
    entry = catalog.find_entry(ctx, fid)
    lkp = LookupIterator(catalog, ctx, entry, entry.field_index_of(fid.field_code))
    ext = [0, 0]
    status, elements_read = md.write_sequence(
        arena, 0, fid, header_raw, remaining, lkp, sink, mode, True, ext
    )
    return status, elements_read, arena, ext


def test_exact_fit_single_field(catalog, sink):
    seq = MdSequence(make_sequence_header(MD_CTX_VP, 0x11, 0x20), [0x7])  # XCR0
    status, elements_read, arena, _ = _sequence_walk(
        catalog, sink, seq.to_bytes(), 16, WriteMode.fixed()
    )
    assert status == S.TDX_SUCCESS
    assert elements_read == 1
    assert sink.values[("XCR0", 0)] == [0x7]


def test_sequence_too_small_is_overflow(catalog, sink):
    seq = MdSequence(make_sequence_header(MD_CTX_VP, 0x11, 0x20), [0x7])
    status, _, _, _ = _sequence_walk(catalog, sink, seq.to_bytes(), 15, WriteMode.fixed())
    assert S.status_class(status) == S.TDX_METADATA_LIST_OVERFLOW


def test_zero_write_mask_skips_silently_in_vulnerable_mode(catalog):
    sink = DictSink()
    seq = MdSequence(
        make_sequence_header(MD_CTX_VP, 0x11, 0x20, write_mask_valid=True), [0, 0x7]
    )
    status, _, _, _ = _sequence_walk(catalog, sink, seq.to_bytes(), 24, WriteMode.vulnerable())
    assert status == S.TDX_SUCCESS
    assert sink.values == {}
    assert sink.skips == []


def test_zero_write_mask_skip_is_recorded_in_fixed_mode(catalog):
    sink = DictSink()
    seq = MdSequence(
        make_sequence_header(MD_CTX_VP, 0x11, 0x20, write_mask_valid=True), [0, 0x7]
    )
    status, _, _, _ = _sequence_walk(catalog, sink, seq.to_bytes(), 24, WriteMode.fixed())
    assert status == S.TDX_SUCCESS
    assert sink.skips == [("XCR0", 0)]


def test_non_writable_error_propagates_when_not_skipping(catalog):
    sink = DictSink(fail_with=S.TDX_METADATA_FIELD_NOT_WRITABLE)
    seq = MdSequence(make_sequence_header(MD_CTX_VP, 0x11, 0x20), [0x7])
    arena = ParseArena(seq.to_bytes().ljust(4096, b"\x00"))
    fid = decode_field_id(seq.header_raw)
    entry = catalog.find_entry(MD_CTX_VP, fid)
    lkp = LookupIterator(catalog, MD_CTX_VP, entry, 0)
    status, _ = md.write_sequence(
        arena, 0, fid, seq.header_raw, 16, lkp, sink, WriteMode.fixed(),
        False, [0, 0],  # skip_non_writable off
    )
    assert status == S.TDX_METADATA_FIELD_NOT_WRITABLE


def test_sequence_cannot_cross_classes(catalog, sink):
    # CR2 (0x28) is the last class-0x11 vp field before TSC_DEADLINE; claiming
    # more fields than the class holds trips the class-change check.
    seq = MdSequence(
        make_sequence_header(MD_CTX_VP, 0x11, 0x30, num_fields=2), [1, 2]
    )
    status, _, _, ext = _sequence_walk(catalog, sink, seq.to_bytes(), 4000, WriteMode.fixed())
    assert status == S.TDX_METADATA_FIELD_ID_INCORRECT
    assert ext[0] == seq.header_raw


# --- the crafted underflow walks -------------------------------------------------

def _oracle_read_offsets(num_fields: int) -> list[tuple[int, int]]:
    """Independent wrap-arithmetic model of the crafted walk's reads.

    Returns (offset, length) pairs expected in the arena log for the crafted
    tail sequence at 4080 plus the out-of-place header read that follows.
    """
    reads = [(0, 8)]  # list header
    reads.append((8, 8))  # filler 1 header
    reads.extend((16 + 8 * i, 8) for i in range(506))  # filler 1 elements
    reads.append((4064, 8))  # filler 2 header (CR2)
    reads.append((4072, 8))  # filler 2 element
    reads.append((4080, 8))  # crafted sequence header
    for i in range(num_fields):
        reads.append((4088, 8))              # write mask re-read each field
        reads.append((4096 + 16 * i, 8))     # the field's element
    reads.append((4088 + 16 * num_fields, 8))  # next sequence header, out of place
    return reads


@pytest.mark.parametrize("num_fields", [1, 7, 512])
def test_vulnerable_walk_matches_wrap_oracle_bit_for_bit(catalog, num_fields):
    sink = DictSink()
    data = crafted_vp_list(extra_oob_header=True, num_fields=num_fields)
    plant_at = 4088 + 16 * num_fields
    arena = ParseArena(data, plants={plant_at: LEAK_SENTINEL})
    result = md.write_list(catalog, MD_CTX_VP, md.MD_FIELD_ID_NA, arena, sink,
                           WriteMode.vulnerable())
    assert [(r.offset, r.length) for r in arena.reads] == _oracle_read_offsets(num_fields)
    assert result.ext_err_info[0] == LEAK_SENTINEL
    assert S.status_class(result.status) == S.TDX_METADATA_FIELD_ID_INCORRECT
    assert result.status & 0xFFFF0000 == 0xFFFF0000  # operand 0xffff
    assert arena.max_oob_span() == 16 * num_fields


def test_fixed_mode_stops_crafted_walk_without_oob(catalog, sink):
    arena = ParseArena(crafted_vp_list(extra_oob_header=True))
    result = md.write_list(catalog, MD_CTX_VP, md.MD_FIELD_ID_NA, arena, sink, WriteMode.fixed())
    assert S.status_class(result.status) == S.TDX_METADATA_LIST_OVERFLOW
    assert not arena.oob_reads()


def test_pure_loop_underflow_with_valid_header(catalog, sink):
    # Valid list header; only the in-loop mask deduction wraps the 32-bit size.
    pad = MdSequence(make_sequence_header(MD_CTX_VP, 0x12, 0, num_fields=505), [0] * 505)
    cr2 = MdSequence(make_sequence_header(MD_CTX_VP, 0x11, 0x28), [0])
    tail = MdSequence(
        make_sequence_header(MD_CTX_VP, 0x12, 505, num_fields=512, write_mask_valid=True),
        [0xFFFFFFFFFFFFFFFF, 0xAAAA],
    )
    data = build_list([pad, cr2, tail]).to_bytes()

    vulnerable = WriteMode(header_underflow=False, loop_underflow=True, silent_skip=True)
    arena = ParseArena(data)
    result = md.write_list(catalog, MD_CTX_VP, md.MD_FIELD_ID_NA, arena, sink, vulnerable)
    assert result.status == S.TDX_SUCCESS
    assert arena.oob_reads()

    arena2 = ParseArena(data)
    result2 = md.write_list(catalog, MD_CTX_VP, md.MD_FIELD_ID_NA, arena2, DictSink(),
                            WriteMode.fixed())
    assert S.status_class(result2.status) == S.TDX_METADATA_LIST_OVERFLOW
    assert not arena2.oob_reads()


def test_fixed_mode_never_reads_oob_on_fuzzed_lists(catalog):
    rng = random.Random(0x7D)
    for _ in range(500):
        if rng.random() < 0.5:
            data = rng.randbytes(4096)
        else:
            header = MdListHeader(
                list_buff_size=rng.randrange(0, 0x10000),
                num_sequences=rng.randrange(0, 64),
            )
            data = (header.to_bytes() + rng.randbytes(rng.randrange(0, 4088))).ljust(4096, b"\x00")
        arena = ParseArena(data)
        md.write_list(catalog, MD_CTX_VP, md.MD_FIELD_ID_NA, arena, DictSink(), WriteMode.fixed())
        assert not arena.oob_reads()


# --- dump side -------------------------------------------------------------------

class MapSource:
    def __init__(self, values=None):
        self.values = values or {}

    def read_field(self, entry, field_index):
        base = field_index * entry.num_of_elem
        return [
            self.values.get((entry.name, base + k), 0) & entry.export_mask
            for k in range(entry.num_of_elem)
        ]


def test_dump_empty_selection_is_header_only(catalog):
    lists = md.dump_lists(catalog, MD_CTX_TD, [], MapSource())
    assert len(lists) == 1
    assert lists[0].header.list_buff_size == 8
    assert lists[0].to_bytes() == MdListHeader(8, 0).to_bytes().ljust(4096, b"\x00")


def test_dump_then_import_is_identity(catalog):
    rng = random.Random(9)
    entries = [
        catalog.by_name(MD_CTX_TD, "TD_EPOCH"),
        catalog.by_name(MD_CTX_TD, "VIRTUAL_TSC"),
    ]
    values = {}
    for entry in entries:
        for position in range(entry.code_span):
            values[(entry.name, position)] = rng.getrandbits(64)
    lists = md.dump_lists(catalog, MD_CTX_TD, entries, MapSource(values))
    sink = DictSink()
    for item in lists:
        arena = ParseArena(item.to_bytes())
        result = md.write_list(catalog, MD_CTX_TD, md.MD_FIELD_ID_NA, arena, sink,
                               WriteMode.fixed())
        assert result.status == S.TDX_SUCCESS
        assert not arena.oob_reads()
    assert sink.values[("TD_EPOCH", 0)] == [values[("TD_EPOCH", 0)]]
    assert sink.values[("VIRTUAL_TSC", 0)] == [
        values[("VIRTUAL_TSC", 0)], values[("VIRTUAL_TSC", 1)]
    ]


def test_dump_splits_wide_entries_across_lists(catalog):
    entry = catalog.by_name(MD_CTX_VP, "XBUFF")
    lists = md.dump_lists(catalog, MD_CTX_VP, [entry], MapSource())
    total_fields = 0
    for item in lists:
        for seq in item.sequences:
            fid = decode_field_id(seq.header_raw)
            assert fid.num_fields <= 512
            assert not decode_field_id(seq.header_raw).has_reserved_bits
            total_fields += fid.num_fields
    assert total_fields == 1536
    assert len(lists) == 4


def test_parse_rejects_truncated_sequences():
    header = MdListHeader(list_buff_size=16, num_sequences=2)
    seq = MdSequence(make_sequence_header(MD_CTX_TD, 0x11, 0), [])
    data = (header.to_bytes() + seq.to_bytes()).ljust(4096, b"\x00")
    with pytest.raises(ValueError):
        parse_list(data)


def test_dump_rejects_non_exportable_selection(catalog):
    entry = catalog.by_name(MD_CTX_TD, "MIG_DEC_KEY")  # export mask 0
    with pytest.raises(md.ExportError, match="MIG_DEC_KEY"):
        md.dump_lists(catalog, MD_CTX_TD, [entry], MapSource())


def test_sequence_size_cap_matches_field_count_cap():
    seq = MdSequence(
        make_sequence_header(MD_CTX_VP, 0x12, 0, num_fields=512), [0] * 512
    )
    assert seq.size == 512 * 8 + 8 == md.MAX_SEQUENCE_BYTES
