"""Metadata list codec: field ids, list headers, sequences, and the import walk.

The import-side walk (write_list / write_sequence) exists in two variants.
The vulnerable variant reproduces the production module's size arithmetic
bit-for-bit: a 16-bit subtraction when the list header is consumed and a
32-bit subtraction per write-mask element inside the field loop, both of
which wrap.  The fixed variant bounds-checks the header up front and hoists
the write-mask handling out of the loop.

All parsing reads go through a ParseArena so out-of-bounds accesses are
observable instead of faulting: the arena holds the 4KB list at offset 0
followed by labeled sentinel regions whose contents self-identify.

Everything here is a pure function over caller-owned arenas and sinks; with
disjoint data, calls are safe from multiple threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Optional, Protocol

from .status import (
    TDX_METADATA_FIELD_ID_INCORRECT,
    TDX_METADATA_FIELD_NOT_WRITABLE,
    TDX_METADATA_LIST_OVERFLOW,
    TDX_SUCCESS,
    with_l2_details,
)

LIST_BYTES = 4096
LIST_HEADER_BYTES = 8
SEQUENCE_HEADER_BYTES = 8
ELEMENT_BYTES = 8
MAX_FIELDS_PER_SEQUENCE = 512
MAX_SEQUENCE_BYTES = MAX_FIELDS_PER_SEQUENCE * ELEMENT_BYTES + SEQUENCE_HEADER_BYTES

MD_FIELD_ID_NA = 0xFFFFFFFFFFFFFFFF

MD_CTX_SYS = 0
MD_CTX_TD = 1
MD_CTX_VP = 2

FIELD_CODE_SHIFT = 0
FIELD_CODE_MASK = 0xFFFFFF
RESERVED_0_SHIFT = 24
RESERVED_0_MASK = 0xFF
ELEMENT_SIZE_CODE_SHIFT = 32
ELEMENT_SIZE_CODE_MASK = 0x3
LAST_ELEMENT_IN_FIELD_SHIFT = 34
LAST_ELEMENT_IN_FIELD_MASK = 0xF
LAST_FIELD_IN_SEQUENCE_SHIFT = 38
LAST_FIELD_IN_SEQUENCE_MASK = 0x1FF
RESERVED_1_SHIFT = 47
RESERVED_1_MASK = 0x7
INC_SIZE_SHIFT = 50
WRITE_MASK_VALID_SHIFT = 51
CONTEXT_CODE_SHIFT = 52
CONTEXT_CODE_MASK = 0x7
RESERVED_2_SHIFT = 55
CLASS_CODE_SHIFT = 56
CLASS_CODE_MASK = 0x3F
RESERVED_3_SHIFT = 62
IGNORED_SHIFT = 63

# The only element size the model serializes: 64-bit values.
ELEMENT_SIZE_CODE_8B = 3


class EncodingError(ValueError):
    """A field id subfield is out of range or a reserved range is nonzero."""


@dataclass
class MdFieldId:
    """Unpacked view of a 64-bit metadata field identifier."""

    field_code: int = 0
    element_size_code: int = ELEMENT_SIZE_CODE_8B
    last_element_in_field: int = 0
    last_field_in_sequence: int = 0
    inc_size: int = 0
    write_mask_valid: int = 0
    context_code: int = MD_CTX_SYS
    class_code: int = 0
    ignored: int = 0
    reserved_0: int = 0
    reserved_1: int = 0
    reserved_2: int = 0
    reserved_3: int = 0

    _WIDTHS = (
        ("field_code", FIELD_CODE_MASK),
        ("element_size_code", ELEMENT_SIZE_CODE_MASK),
        ("last_element_in_field", LAST_ELEMENT_IN_FIELD_MASK),
        ("last_field_in_sequence", LAST_FIELD_IN_SEQUENCE_MASK),
        ("inc_size", 1),
        ("write_mask_valid", 1),
        ("context_code", CONTEXT_CODE_MASK),
        ("class_code", CLASS_CODE_MASK),
        ("ignored", 1),
    )

    @property
    def num_fields(self) -> int:
        return self.last_field_in_sequence + 1

    @property
    def has_reserved_bits(self) -> bool:
        return bool(self.reserved_0 or self.reserved_1 or self.reserved_2 or self.reserved_3)

    def to_raw(self) -> int:
        """Lossless repack, including any reserved bits carried from a decode."""
        return (
            self.field_code
            | (self.reserved_0 << RESERVED_0_SHIFT)
            | (self.element_size_code << ELEMENT_SIZE_CODE_SHIFT)
            | (self.last_element_in_field << LAST_ELEMENT_IN_FIELD_SHIFT)
            | (self.last_field_in_sequence << LAST_FIELD_IN_SEQUENCE_SHIFT)
            | (self.reserved_1 << RESERVED_1_SHIFT)
            | (self.inc_size << INC_SIZE_SHIFT)
            | (self.write_mask_valid << WRITE_MASK_VALID_SHIFT)
            | (self.context_code << CONTEXT_CODE_SHIFT)
            | (self.reserved_2 << RESERVED_2_SHIFT)
            | (self.class_code << CLASS_CODE_SHIFT)
            | (self.reserved_3 << RESERVED_3_SHIFT)
            | (self.ignored << IGNORED_SHIFT)
        )

    def key(self) -> tuple[int, int, int]:
        """Identity triple: (context_code, class_code, field_code)."""
        return (self.context_code, self.class_code, self.field_code)


def encode_field_id(parts: MdFieldId) -> int:
    """Pack subfields to the raw 64-bit id, rejecting overflow and reserved bits."""
    for name, mask in MdFieldId._WIDTHS:
        value = getattr(parts, name)
        if value < 0 or value > mask:
            raise EncodingError(f"{name} out of range: {value:#x}")
    for name in ("reserved_0", "reserved_1", "reserved_2", "reserved_3"):
        if getattr(parts, name):
            raise EncodingError(f"{name} must be zero in emitted field ids")
    return parts.to_raw()


def decode_field_id(raw: int) -> MdFieldId:
    """Lossless unpack; reserved bit contents are preserved and reported."""
    return MdFieldId(
        field_code=(raw >> FIELD_CODE_SHIFT) & FIELD_CODE_MASK,
        reserved_0=(raw >> RESERVED_0_SHIFT) & RESERVED_0_MASK,
        element_size_code=(raw >> ELEMENT_SIZE_CODE_SHIFT) & ELEMENT_SIZE_CODE_MASK,
        last_element_in_field=(raw >> LAST_ELEMENT_IN_FIELD_SHIFT) & LAST_ELEMENT_IN_FIELD_MASK,
        last_field_in_sequence=(raw >> LAST_FIELD_IN_SEQUENCE_SHIFT) & LAST_FIELD_IN_SEQUENCE_MASK,
        reserved_1=(raw >> RESERVED_1_SHIFT) & RESERVED_1_MASK,
        inc_size=(raw >> INC_SIZE_SHIFT) & 1,
        write_mask_valid=(raw >> WRITE_MASK_VALID_SHIFT) & 1,
        context_code=(raw >> CONTEXT_CODE_SHIFT) & CONTEXT_CODE_MASK,
        reserved_2=(raw >> RESERVED_2_SHIFT) & 1,
        class_code=(raw >> CLASS_CODE_SHIFT) & CLASS_CODE_MASK,
        reserved_3=(raw >> RESERVED_3_SHIFT) & 1,
        ignored=(raw >> IGNORED_SHIFT) & 1,
    )


def make_sequence_header(
    context_code: int,
    class_code: int,
    field_code: int,
    num_fields: int = 1,
    num_elements: int = 1,
    write_mask_valid: bool = False,
) -> int:
    """Canonical emitted header: reserved bits zero, 8-byte element size code."""
    return encode_field_id(
        MdFieldId(
            field_code=field_code,
            element_size_code=ELEMENT_SIZE_CODE_8B,
            last_element_in_field=num_elements - 1,
            last_field_in_sequence=num_fields - 1,
            write_mask_valid=1 if write_mask_valid else 0,
            context_code=context_code,
            class_code=class_code,
        )
    )


@dataclass
class MdListHeader:
    list_buff_size: int = LIST_HEADER_BYTES
    num_sequences: int = 0
    reserved: int = 0

    def to_bytes(self) -> bytes:
        return (
            self.list_buff_size.to_bytes(2, "little")
            + self.num_sequences.to_bytes(2, "little")
            + self.reserved.to_bytes(4, "little")
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> "MdListHeader":
        return cls(
            list_buff_size=int.from_bytes(data[0:2], "little"),
            num_sequences=int.from_bytes(data[2:4], "little"),
            reserved=int.from_bytes(data[4:8], "little"),
        )


@dataclass
class MdSequence:
    """One packed sequence: a header id followed by 64-bit elements."""

    header_raw: int
    elements: list[int]

    def to_bytes(self) -> bytes:
        out = bytearray(self.header_raw.to_bytes(8, "little"))
        for value in self.elements:
            out += value.to_bytes(8, "little")
        return bytes(out)

    @property
    def size(self) -> int:
        return SEQUENCE_HEADER_BYTES + len(self.elements) * ELEMENT_BYTES


@dataclass
class MdList:
    header: MdListHeader
    sequences: list[MdSequence]

    def to_bytes(self) -> bytes:
        """Serialize to exactly 4096 bytes, zero padded after the last sequence."""
        out = bytearray(self.header.to_bytes())
        for seq in self.sequences:
            out += seq.to_bytes()
        if len(out) > LIST_BYTES:
            raise EncodingError(f"list content {len(out)} exceeds {LIST_BYTES} bytes")
        out += b"\x00" * (LIST_BYTES - len(out))
        return bytes(out)


def build_list(sequences: Iterable[MdSequence]) -> MdList:
    seqs = list(sequences)
    size = LIST_HEADER_BYTES + sum(s.size for s in seqs)
    return MdList(MdListHeader(list_buff_size=size, num_sequences=len(seqs)), seqs)


def parse_list(data: bytes) -> MdList:
    """Structured bounds-checked parse of a serialized list (export/tooling side).

    Trailing padding is ignored.  This is not the import walk; it trusts the
    element-count bits in each sequence header instead of catalog lookups, so
    it can pretty-print or patch arbitrary well-formed lists.
    """
    if len(data) < LIST_HEADER_BYTES:
        raise ValueError("list shorter than its header")
    header = MdListHeader.from_bytes(data[:LIST_HEADER_BYTES])
    if header.list_buff_size < LIST_HEADER_BYTES or header.list_buff_size > min(len(data), LIST_BYTES):
        raise ValueError(f"bad list_buff_size {header.list_buff_size}")
    off = LIST_HEADER_BYTES
    sequences = []
    for _ in range(header.num_sequences):
        if off + SEQUENCE_HEADER_BYTES > header.list_buff_size:
            raise ValueError("sequence header outside list_buff_size")
        raw = int.from_bytes(data[off : off + 8], "little")
        fid = decode_field_id(raw)
        count = fid.num_fields * (fid.last_element_in_field + 1) + fid.write_mask_valid
        end = off + SEQUENCE_HEADER_BYTES + count * ELEMENT_BYTES
        if end > header.list_buff_size:
            raise ValueError("sequence elements outside list_buff_size")
        elements = [
            int.from_bytes(data[i : i + 8], "little")
            for i in range(off + SEQUENCE_HEADER_BYTES, end, 8)
        ]
        sequences.append(MdSequence(raw, elements))
        off = end
    return MdList(header, sequences)


@dataclass
class ReadRecord:
    offset: int
    length: int
    oob: bool


class ParseArena:
    """Bounded byte arena: the list at offset 0, labeled sentinels after it.

    Every read is logged; reads starting at or beyond the 4KB list region are
    flagged out-of-bounds and served from the sentinel regions, mirroring the
    fact that adjacent stack data is readable rather than faulting.  Reads past
    the arena itself return zeros.
    """

    REGIONS = (
        ("canary", 64),
        ("fake_return_address", 64),
        ("shadow_stack", 4096),
        ("adjacent_frame", 8064),
    )

    def __init__(self, list_bytes: bytes, plants: Optional[dict[int, int]] = None):
        if len(list_bytes) > LIST_BYTES:
            raise ValueError("list larger than 4KB")
        buf = bytearray(list_bytes) + bytearray(LIST_BYTES - len(list_bytes))
        for name, size in self.REGIONS:
            buf += self.region_pattern(name, size)
        self.buffer = buf
        self.reads: list[ReadRecord] = []
        for offset, value in (plants or {}).items():
            self.plant(offset, value)

    @staticmethod
    def region_pattern(name: str, size: int) -> bytes:
        """Deterministic per-region fill so leaked bytes self-identify."""
        tile = hashlib.sha256(name.encode()).digest()
        return (tile * (size // len(tile) + 1))[:size]

    def region_span(self, name: str) -> tuple[int, int]:
        off = LIST_BYTES
        for region, size in self.REGIONS:
            if region == name:
                return off, off + size
            off += size
        raise KeyError(name)

    def plant(self, offset: int, value: int) -> None:
        """Place an 8-byte little-endian sentinel value at an arena offset."""
        end = offset + 8
        if end > len(self.buffer):
            raise ValueError("plant outside arena")
        self.buffer[offset:end] = value.to_bytes(8, "little")

    def read(self, offset: int, length: int) -> bytes:
        self.reads.append(ReadRecord(offset, length, oob=offset >= LIST_BYTES))
        chunk = bytes(self.buffer[offset : offset + length])
        if len(chunk) < length:
            chunk += b"\x00" * (length - len(chunk))
        return chunk

    def read_u64(self, offset: int) -> int:
        return int.from_bytes(self.read(offset, 8), "little")

    def peek_u64(self, offset: int) -> int:
        """Unlogged read, for assertions about what a walk should have seen."""
        chunk = bytes(self.buffer[offset : offset + 8])
        return int.from_bytes(chunk + b"\x00" * (8 - len(chunk)), "little")

    def oob_reads(self) -> list[ReadRecord]:
        return [r for r in self.reads if r.oob]

    def max_oob_span(self) -> int:
        """Bytes past the list end reached by the farthest out-of-bounds read."""
        oob = self.oob_reads()
        if not oob:
            return 0
        return max(r.offset + r.length for r in oob) - LIST_BYTES


@dataclass
class WriteMode:
    """Per-finding variant switches for the import walk.

    Flags are True when the corresponding pre-fix behavior is active:
      header_underflow  unchecked 16-bit header subtraction
      loop_underflow    write-mask element deducted inside the field loop
      silent_skip       zero write-mask skips are not recorded
    """

    header_underflow: bool = False
    loop_underflow: bool = False
    silent_skip: bool = False

    @classmethod
    def vulnerable(cls) -> "WriteMode":
        return cls(header_underflow=True, loop_underflow=True, silent_skip=True)

    @classmethod
    def fixed(cls) -> "WriteMode":
        return cls()


class MetadataSink(Protocol):
    """Destination for imported field values (a TD, or a plain dict in tests)."""

    def write_field(self, entry, field_index: int, values: list[int], combined_mask: int) -> int:
        """Store values for one field; returns a status word."""

    def record_skip(self, entry, field_index: int) -> None:
        """Fixed-mode bookkeeping for a field skipped via a zero write mask."""


class LookupIterator:
    """Walks catalog entries in table order, one field at a time."""

    def __init__(self, catalog, context_code: int, entry, field_index: int = 0):
        self.catalog = catalog
        self.context_code = context_code
        self.entry = entry
        self.field_index = field_index

    @property
    def at_end(self) -> bool:
        return self.entry is None

    @property
    def field_id_raw(self) -> int:
        if self.entry is None:
            return MD_FIELD_ID_NA
        return self.entry.field_id_for(self.field_index)

    @property
    def class_code(self) -> Optional[int]:
        return None if self.entry is None else self.entry.class_code

    def advance(self) -> None:
        if self.entry is None:
            return
        if self.field_index + 1 < self.entry.num_of_fields:
            self.field_index += 1
        else:
            self.entry = self.catalog.next_entry_after(self.context_code, self.entry)
            self.field_index = 0


@dataclass
class WriteResult:
    status: int = TDX_SUCCESS
    next_field_raw: int = MD_FIELD_ID_NA
    ext_err_info: list[int] = dc_field(default_factory=lambda: [0, 0])
    initial_remaining: int = 0
    sequences_done: int = 0


def write_list(
    catalog,
    context_code: int,
    expected_raw: int,
    arena: ParseArena,
    sink: MetadataSink,
    mode: WriteMode,
    skip_non_writable: bool = True,
) -> WriteResult:
    """Import one metadata list from the arena into the sink.

    Returns a status plus the raw out-of-place header in ext_err_info[0] on a
    context-code mismatch, carrying the sequence index in the low status word.
    """
    result = WriteResult()
    header = MdListHeader.from_bytes(arena.read(0, LIST_HEADER_BYTES))

    if not mode.header_underflow:
        if header.list_buff_size < LIST_HEADER_BYTES or header.list_buff_size > LIST_BYTES:
            result.status = with_l2_details(TDX_METADATA_LIST_OVERFLOW, 0xFFFF, 0)
            return result

    # The pre-fix module stores this in a uint16_t with no lower-bound check.
    remaining = (header.list_buff_size - LIST_HEADER_BYTES) & 0xFFFF
    result.initial_remaining = remaining
    seq_off = LIST_HEADER_BYTES

    for i in range(header.num_sequences):
        if not mode.header_underflow and remaining < SEQUENCE_HEADER_BYTES + ELEMENT_BYTES:
            # Post-fix walks check the residue before touching the next header,
            # so a lying num_sequences cannot push a read past the list.
            result.ext_err_info[0] = result.next_field_raw
            result.status = with_l2_details(TDX_METADATA_LIST_OVERFLOW, 0xFFFF, 0)
            return result
        header_raw = arena.read_u64(seq_off)
        fid = decode_field_id(header_raw)
        if fid.context_code != context_code:
            result.ext_err_info[0] = header_raw
            result.status = with_l2_details(TDX_METADATA_FIELD_ID_INCORRECT, 0xFFFF, i)
            return result

        entry = catalog.find_entry(context_code, fid)
        if entry is None:
            result.ext_err_info[0] = header_raw
            result.status = with_l2_details(TDX_METADATA_FIELD_ID_INCORRECT, 0xFFFF, i)
            return result
        lkp = LookupIterator(catalog, context_code, entry, entry.field_index_of(fid.field_code))

        status, elements_read = write_sequence(
            arena,
            seq_off,
            fid,
            header_raw,
            remaining,
            lkp,
            sink,
            mode,
            skip_non_writable,
            result.ext_err_info,
        )
        if status != TDX_SUCCESS:
            result.status = status
            return result

        consumed = SEQUENCE_HEADER_BYTES + elements_read * ELEMENT_BYTES
        remaining = (remaining - consumed) & 0xFFFF
        seq_off += consumed
        result.sequences_done = i + 1
        result.next_field_raw = lkp.field_id_raw

    return result


def write_sequence(
    arena: ParseArena,
    seq_off: int,
    fid: MdFieldId,
    header_raw: int,
    buff_size: int,
    lkp: LookupIterator,
    sink: MetadataSink,
    mode: WriteMode,
    skip_non_writable: bool,
    ext_err_info: list[int],
) -> tuple[int, int]:
    """Import one sequence; returns (status, elements_read).

    buff_size is 32-bit arithmetic.  In the pre-fix variant the write-mask
    element is re-read and deducted on every loop iteration, so a sequence that
    ends near the list boundary drives buff_size through zero and the walk
    continues into the sentinel regions.
    """
    if buff_size < SEQUENCE_HEADER_BYTES + ELEMENT_BYTES:
        ext_err_info[0] = lkp.field_id_raw
        return with_l2_details(TDX_METADATA_LIST_OVERFLOW, 0xFFFF, 0), 0

    num_fields = fid.num_fields
    buff_size = (buff_size - SEQUENCE_HEADER_BYTES) & 0xFFFFFFFF
    elements_base = seq_off + SEQUENCE_HEADER_BYTES
    sequence_idx = 0
    wr_mask = 0xFFFFFFFFFFFFFFFF

    if not mode.loop_underflow and fid.write_mask_valid:
        # Post-fix placement: consume the mask element once, before the loop.
        if buff_size < ELEMENT_BYTES:
            ext_err_info[0] = lkp.field_id_raw
            return with_l2_details(TDX_METADATA_LIST_OVERFLOW, 0xFFFF, 0), sequence_idx
        wr_mask = arena.read_u64(elements_base)
        sequence_idx += 1
        buff_size -= ELEMENT_BYTES

    for i in range(num_fields):
        entry = lkp.entry
        if mode.loop_underflow and fid.write_mask_valid:
            wr_mask = arena.read_u64(elements_base)
            sequence_idx += 1
            buff_size = (buff_size - ELEMENT_BYTES) & 0xFFFFFFFF

        if buff_size < entry.num_of_elem * ELEMENT_BYTES:
            ext_err_info[0] = lkp.field_id_raw
            return with_l2_details(TDX_METADATA_LIST_OVERFLOW, 0xFFFF, 0), sequence_idx

        if not skip_non_writable or entry.importable:
            combined = wr_mask & entry.import_mask
            if combined == 0:
                status = TDX_METADATA_FIELD_NOT_WRITABLE
            else:
                values = [
                    arena.read_u64(elements_base + (sequence_idx + k) * ELEMENT_BYTES)
                    for k in range(entry.num_of_elem)
                ]
                status = sink.write_field(entry, lkp.field_index, values, combined)
            if status != TDX_SUCCESS:
                if not (status == TDX_METADATA_FIELD_NOT_WRITABLE and skip_non_writable):
                    ext_err_info[0] = lkp.field_id_raw
                    return status, sequence_idx
                if not mode.silent_skip:
                    sink.record_skip(entry, lkp.field_index)

        buff_size = (buff_size - entry.num_of_elem * ELEMENT_BYTES) & 0xFFFFFFFF
        sequence_idx += entry.num_of_elem
        prev_class = lkp.class_code
        lkp.advance()
        if i < num_fields - 1 and (lkp.at_end or lkp.class_code != prev_class):
            ext_err_info[0] = header_raw
            return TDX_METADATA_FIELD_ID_INCORRECT, sequence_idx

    return TDX_SUCCESS, sequence_idx


class MetadataSource(Protocol):
    """Value provider for the export-side serializer."""

    def read_field(self, entry, field_index: int) -> list[int]:
        """Return the field's element values (already export-masked)."""


class ExportError(ValueError):
    """A selected field is not exportable."""


def dump_lists(catalog, context_code: int, entries, source: MetadataSource) -> list[MdList]:
    """Serialize the selected entries to canonical lists.

    Fields are packed greedily: a sequence never exceeds 512 fields and never
    crosses a list boundary, but one entry's fields may continue in a fresh
    sequence in the next list.  Emitted headers are canonical (reserved bits
    zero, 8-byte element size code).
    """
    lists: list[MdList] = []
    pending: list[MdSequence] = []
    room = LIST_BYTES - LIST_HEADER_BYTES

    def flush():
        nonlocal pending, room
        if pending:
            lists.append(build_list(pending))
            pending = []
            room = LIST_BYTES - LIST_HEADER_BYTES

    for entry in entries:
        if not entry.exportable:
            raise ExportError(f"field {entry.name} is not exportable")
        field_bytes = entry.num_of_elem * ELEMENT_BYTES
        index = 0
        while index < entry.num_of_fields:
            if room < SEQUENCE_HEADER_BYTES + field_bytes:
                flush()
            capacity = (room - SEQUENCE_HEADER_BYTES) // field_bytes
            count = min(entry.num_of_fields - index, MAX_FIELDS_PER_SEQUENCE, capacity)
            header = make_sequence_header(
                context_code,
                entry.class_code,
                entry.field_code + index * entry.num_of_elem,
                num_fields=count,
                num_elements=entry.num_of_elem,
            )
            elements: list[int] = []
            for k in range(count):
                values = source.read_field(entry, index + k)
                elements.extend(v & 0xFFFFFFFFFFFFFFFF for v in values)
            seq = MdSequence(header, elements)
            pending.append(seq)
            room -= seq.size
            index += count
    flush()
    if not lists:
        lists.append(build_list([]))
    return lists
