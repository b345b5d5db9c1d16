"""TD aggregate state: attributes, controls, event filters, KOT, and bindings.

Each operation that a finding touches exists in vulnerable and fixed variants
selected by a mode argument: the vulnerable variant mutates state before all
validation has passed (or never rolls back), the fixed variant is
transactional.  Metadata lives in flat per-scope stores keyed by
(class_code, base field_code); a handful of fields additionally mirror into
typed attributes that the rest of the model consults.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field as dc_field
from enum import Enum
from typing import Optional

from .catalog import FieldCatalog, FieldEntry, MigClass
from .md_codec import MD_CTX_SYS, MD_CTX_TD, MD_CTX_VP
from .states import LifecycleState, OpState
from .status import (
    OPERAND_ID_ATTRIBUTES,
    OPERAND_ID_EPTP_CONTROLS,
    OPERAND_ID_RCX,
    OPERAND_ID_TSC_FREQUENCY,
    OPERAND_ID_XFAM,
    TDX_EVENT_FILTER_INVALID,
    TDX_EVENT_FILTER_ORDER_INVALID,
    TDX_HKID_NOT_FREE,
    TDX_METADATA_FIELD_VALUE_NOT_VALID,
    TDX_OPERAND_INVALID,
    TDX_SUCCESS,
    with_operand,
)

U64 = 0xFFFFFFFFFFFFFFFF

# Attribute bitmap flags (TUD / SEC / OTHER groups).
ATTR_DEBUG = 1 << 0
ATTR_SEPT_VE_DISABLE = 1 << 28
ATTR_MIGRATABLE = 1 << 29
ATTR_PERFMON = 1 << 63

# xfam must request x87 and SSE and stay within the supported feature bits.
XFAM_FIXED1 = 0x3
XFAM_ALLOWED = 0x7FFFF

VIRT_TSC_FREQUENCY_MIN = 4
VIRT_TSC_FREQUENCY_MAX = 400
MIN_HP_LOCK_TIMEOUT_USEC = 10_000
MAX_HP_LOCK_TIMEOUT_USEC = 100_000_000
MAX_EXPORT_COUNT = 0x7FFFFFFF
MAX_VCPUS_PER_TD = 576
MAX_EVENT_FILTERS = 32
XCR0_X87 = 1 << 0

# EPT page-walk levels as encoded in the eptp controls (levels minus one).
LVL_PT = 0
LVL_PD = 1
LVL_PDPT = 2
LVL_PML4 = 3
LVL_PML5 = 4

TDMR_ENTRY_ALIGNMENT = 512
DEFAULT_KOT_SIZE = 64

BINDING_SLOT_BITS = 12
BINDING_PAGE_BITS = 40


@dataclass
class TdAttributes:
    raw: int = 0

    @property
    def debug(self) -> bool:
        return bool(self.raw & ATTR_DEBUG)

    @property
    def migratable(self) -> bool:
        return bool(self.raw & ATTR_MIGRATABLE)

    @property
    def perfmon(self) -> bool:
        return bool(self.raw & ATTR_PERFMON)

    @property
    def sept_ve_disable(self) -> bool:
        return bool(self.raw & ATTR_SEPT_VE_DISABLE)


def verify_td_attributes(attrs: TdAttributes, is_import: bool) -> bool:
    """A migratable TD cannot be a debug or perfmon TD; imports must be migratable."""
    if attrs.migratable:
        if attrs.debug or attrs.perfmon:
            return False
    elif is_import:
        return False
    return True


def check_xfam(xfam: int) -> bool:
    return (xfam & XFAM_FIXED1) == XFAM_FIXED1 and (xfam & ~XFAM_ALLOWED) == 0


def check_gpa_validity(gpa: int, gpaw: bool, private_only: bool = True) -> bool:
    """Private GPAs must fit the guest physical width with the shared bit clear."""
    max_bits = 52 if gpaw else 48
    if gpa >= (1 << max_bits):
        return False
    shared_bit = 1 << (max_bits - 1)
    if private_only and (gpa & shared_bit):
        return False
    return True


@dataclass
class EptpControls:
    """Extended-page-table pointer fields packed into a 64-bit value."""

    ept_ps_mt: int = 6          # paging-structure memory type (WB)
    ept_pwl: int = LVL_PML4     # page-walk level, levels minus one
    enable_ad_bits: bool = False
    enable_sss_control: bool = False
    base_pa: int = 0            # 4KB page number of the root structure

    @property
    def raw(self) -> int:
        return (
            (self.ept_ps_mt & 0x7)
            | ((self.ept_pwl & 0x7) << 3)
            | (int(self.enable_ad_bits) << 6)
            | (int(self.enable_sss_control) << 7)
            | ((self.base_pa & ((1 << 40) - 1)) << 12)
        )

    @classmethod
    def from_raw(cls, raw: int) -> "EptpControls":
        return cls(
            ept_ps_mt=raw & 0x7,
            ept_pwl=(raw >> 3) & 0x7,
            enable_ad_bits=bool(raw & (1 << 6)),
            enable_sss_control=bool(raw & (1 << 7)),
            base_pa=(raw >> 12) & ((1 << 40) - 1),
        )


@dataclass
class EventFilter:
    """One allow-list entry for guest perfmon event selection."""

    event_select: int = 0
    umask: int = 0
    negative: int = 0
    umask_mask: int = 0xFFFF
    reserved_0: int = 0

    @property
    def raw(self) -> int:
        return (
            (self.event_select & 0xFF)
            | ((self.umask & 0xFFFF) << 8)
            | ((self.negative & 1) << 24)
            | ((self.umask_mask & 0xFFFF) << 32)
            | ((self.reserved_0 & 0xFFFF) << 48)
        )

    @classmethod
    def from_raw(cls, raw: int) -> "EventFilter":
        return cls(
            event_select=raw & 0xFF,
            umask=(raw >> 8) & 0xFFFF,
            negative=(raw >> 24) & 1,
            umask_mask=(raw >> 32) & 0xFFFF,
            reserved_0=(raw >> 48) & 0xFFFF,
        )

    @property
    def internal(self) -> int:
        """The stored comparison key: event_select in the low byte, umask above."""
        return (self.event_select & 0xFF) | ((self.umask & 0xFF) << 8)

    @property
    def legal(self) -> bool:
        return not (
            self.reserved_0 or self.umask > 0xFF or self.negative or self.umask_mask != 0xFFFF
        )


class KotState(Enum):
    HKID_FREE = "HKID_FREE"
    HKID_RESERVED = "HKID_RESERVED"
    HKID_ASSIGNED = "HKID_ASSIGNED"
    HKID_FLUSHED = "HKID_FLUSHED"


@dataclass
class KotEntry:
    state: KotState = KotState.HKID_FREE
    wbinvd_bitmap: int = 0


class Kot:
    """Key ownership table of configurable size."""

    def __init__(self, size: int = DEFAULT_KOT_SIZE):
        self.entries = [KotEntry() for _ in range(size)]
        self.module_hkid: Optional[int] = None

    def __len__(self) -> int:
        return len(self.entries)

    def free_count(self) -> int:
        return sum(1 for e in self.entries if e.state is KotState.HKID_FREE)

    def free_hkids(self) -> list[int]:
        return [i for i, e in self.entries_with_index() if e.state is KotState.HKID_FREE]

    def entries_with_index(self):
        return enumerate(self.entries)


def sys_config_reserve_hkid(kot: Kot, hkid: int, tdmr_entries: list[int], mode: str) -> int:
    """Reserve the module's HKID, then validate the TDMR entry addresses.

    The pre-fix error path leaves the reservation in place, so repeated
    failing calls drain the table.  The fixed variant restores HKID_FREE
    before returning the error.
    """
    if hkid >= len(kot) or kot.entries[hkid].state is not KotState.HKID_FREE:
        return with_operand(TDX_HKID_NOT_FREE, OPERAND_ID_RCX)
    kot.entries[hkid].state = KotState.HKID_RESERVED
    kot.module_hkid = hkid
    for address in tdmr_entries:
        if address % TDMR_ENTRY_ALIGNMENT:
            if mode == "fixed":
                kot.entries[hkid].state = KotState.HKID_FREE
                kot.module_hkid = None
            return with_operand(TDX_OPERAND_INVALID, OPERAND_ID_RCX)
    return TDX_SUCCESS


def make_binding_handle(slot: int, tdr_page: int, servtd_uuid_q0: int) -> int:
    """Pack (slot, tdr_page) and blind the handle with the service TD's uuid."""
    if slot >= (1 << BINDING_SLOT_BITS):
        raise ValueError("binding slot exceeds 12 bits")
    if tdr_page >= (1 << BINDING_PAGE_BITS):
        raise ValueError("tdr page exceeds 40 bits")
    packed = slot | (tdr_page << BINDING_SLOT_BITS)
    return (packed + servtd_uuid_q0) & U64


def break_binding_handle(handle: int, servtd_uuid_q0: int) -> tuple[int, int]:
    """Invert make_binding_handle; returns (tdr_page, slot)."""
    raw = (handle - servtd_uuid_q0) & U64
    slot = raw & ((1 << BINDING_SLOT_BITS) - 1)
    tdr_page = (raw >> BINDING_SLOT_BITS) & ((1 << BINDING_PAGE_BITS) - 1)
    return tdr_page, slot


@dataclass
class ServtdBinding:
    slot: int
    servtd_uuid: tuple[int, int, int, int]
    info_hash: int = 0


@dataclass
class VcpuState:
    index: int
    store: dict = dc_field(default_factory=dict)
    entered: bool = False

    def values(self, entry: FieldEntry) -> list[int]:
        key = (entry.class_code, entry.field_code)
        if key not in self.store:
            self.store[key] = [0] * entry.code_span
        return self.store[key]


@dataclass
class TdParams:
    """Host-supplied initialization parameters for the build path."""

    attributes: int = 0
    xfam: int = XFAM_FIXED1
    gpaw: bool = False
    ept_pwl: int = LVL_PML4
    tsc_frequency: int = 100
    hp_lock_timeout: int = 1_000_000


class TdComplex:
    """Aggregate TD root, control-structure, and per-VP state."""

    MIN_TDCX_PAGES = 6

    def __init__(self, tdr_page: int, hkid: int):
        self.tdr_page = tdr_page
        self.hkid = hkid
        self.lifecycle = LifecycleState.TD_HKID_ASSIGNED
        self.op_state = OpState.UNINITIALIZED
        self.attributes = TdAttributes(0)
        self.xfam = 0
        self.gpaw = False
        self.eptp_raw = 0
        self.sept_root_pa = 0
        self.pending_ve_disable = False
        self.num_vcpus = 0
        self.num_migrated_vcpus = 0
        self.tsc_frequency = 0
        self.hp_lock_timeout = 0
        self.export_count = 0
        self.td_uuid: tuple[int, int, int, int] = (0, 0, 0, 0)
        self.mig_dec_key: list[int] = [0, 0, 0, 0]
        self._mig_dec_key_written: set[int] = set()
        self.event_filters: list[int] = [0] * MAX_EVENT_FILTERS
        self.event_filters_num = 0
        self.servtd_bindings: dict[int, ServtdBinding] = {}
        self.vps: list[VcpuState] = []
        self.migsc: list = []
        self.sys_store: dict = {}
        self.td_store: dict = {}
        self.pages: dict[int, int] = {}
        self.measurement = b""
        self.tdcx_count = 0
        self.fatal = False
        self.locked = False
        self.import_written: dict = {}
        self.import_skipped: set = set()
        self.trace: list = []

    # -- generic metadata store ------------------------------------------

    def _scope_values(self, entry: FieldEntry, vp_index: Optional[int]) -> list[int]:
        if entry.context_code == MD_CTX_VP:
            return self.vps[vp_index].values(entry)
        store = self.sys_store if entry.context_code == MD_CTX_SYS else self.td_store
        key = (entry.class_code, entry.field_code)
        if key not in store:
            store[key] = [0] * entry.code_span
        return store[key]

    _MIRROR_NAMES = (
        "ATTRIBUTES", "XFAM", "GPAW", "EPTP", "NUM_VCPUS",
        "TSC_FREQUENCY", "HP_LOCK_TIMEOUT", "EXPORT_COUNT",
        "TD_UUID", "MIG_DEC_KEY",
    )

    def _mirror_read(self, name: str, position: int) -> int:
        if name == "ATTRIBUTES":
            return self.attributes.raw
        if name == "XFAM":
            return self.xfam
        if name == "GPAW":
            return int(self.gpaw)
        if name == "EPTP":
            return self.eptp_raw
        if name == "NUM_VCPUS":
            return self.num_vcpus
        if name == "TSC_FREQUENCY":
            return self.tsc_frequency
        if name == "HP_LOCK_TIMEOUT":
            return self.hp_lock_timeout
        if name == "EXPORT_COUNT":
            return self.export_count
        if name == "TD_UUID":
            return self.td_uuid[position]
        if name == "MIG_DEC_KEY":
            return self.mig_dec_key[position]
        raise KeyError(name)

    def read_element(self, entry: FieldEntry, position: int, vp_index: Optional[int] = None) -> int:
        if entry.context_code == MD_CTX_TD and entry.name in self._MIRROR_NAMES:
            return self._mirror_read(entry.name, position)
        return self._scope_values(entry, vp_index)[position]

    def read_field(self, entry: FieldEntry, field_index: int, vp_index: Optional[int] = None) -> list[int]:
        base = field_index * entry.num_of_elem
        return [self.read_element(entry, base + k, vp_index) for k in range(entry.num_of_elem)]

    def write_element_raw(self, entry: FieldEntry, position: int, value: int,
                          vp_index: Optional[int] = None) -> None:
        """Store a value with no special handling (mirrors updated for TD fields)."""
        if entry.context_code == MD_CTX_TD and entry.name in self._MIRROR_NAMES:
            self._mirror_write(entry.name, position, value)
        else:
            self._scope_values(entry, vp_index)[position] = value & U64

    def _mirror_write(self, name: str, position: int, value: int) -> None:
        value &= U64
        if name == "ATTRIBUTES":
            self.attributes = TdAttributes(value)
        elif name == "XFAM":
            self.xfam = value
        elif name == "GPAW":
            self.gpaw = bool(value & 1)
        elif name == "EPTP":
            self.eptp_raw = value
        elif name == "NUM_VCPUS":
            self.num_vcpus = value
        elif name == "TSC_FREQUENCY":
            self.tsc_frequency = value
        elif name == "HP_LOCK_TIMEOUT":
            self.hp_lock_timeout = value
        elif name == "EXPORT_COUNT":
            self.export_count = value
        elif name == "TD_UUID":
            uuid = list(self.td_uuid)
            uuid[position] = value
            self.td_uuid = tuple(uuid)
        elif name == "MIG_DEC_KEY":
            self.mig_dec_key[position] = value
            self._mig_dec_key_written.add(position)
        else:
            raise KeyError(name)

    @property
    def mig_dec_key_set(self) -> bool:
        return len(self._mig_dec_key_written) == 4

    # -- import accounting -------------------------------------------------

    def reset_import_accounting(self) -> None:
        self.import_written = {}
        self.import_skipped = set()

    def note_written(self, entry: FieldEntry, position: int, vp_index: Optional[int]) -> None:
        key = (entry.context_code, vp_index or 0, entry.class_code, entry.field_code)
        self.import_written.setdefault(key, set()).add(position)

    def note_skipped(self, entry: FieldEntry, field_index: int, vp_index: Optional[int]) -> None:
        self.import_skipped.add(
            (entry.context_code, vp_index or 0, entry.class_code, entry.field_code, field_index)
        )

    def fully_written(self, entry: FieldEntry, vp_index: Optional[int]) -> bool:
        key = (entry.context_code, vp_index or 0, entry.class_code, entry.field_code)
        return len(self.import_written.get(key, ())) == entry.code_span

    # -- snapshot ----------------------------------------------------------

    def snapshot(self) -> str:
        lines = [
            f"tdr_pa: {hex(self.tdr_page << 12)} hkid: {hex(self.hkid)}",
            f"lifecycle: {self.lifecycle.value}",
            f"op_state: {self.op_state.value}",
            f"attributes: {hex(self.attributes.raw)}"
            + (" (debug)" if self.attributes.debug else "")
            + (" (migratable)" if self.attributes.migratable else ""),
            f"xfam: {hex(self.xfam)}",
            f"gpaw: {int(self.gpaw)} eptp: {hex(self.eptp_raw)}",
            f"num_vcpus: {self.num_vcpus} num_migrated_vcpus: {self.num_migrated_vcpus}",
            f"tsc_frequency: {self.tsc_frequency} hp_lock_timeout: {self.hp_lock_timeout}",
            f"export_count: {self.export_count}",
            f"td_uuid: {'-'.join(f'{q:016x}' for q in self.td_uuid)}",
            f"event_filters_num: {self.event_filters_num}",
            f"fatal: {int(self.fatal)}",
        ]
        return "\n".join(lines)


def verify_and_set_td_eptp_controls(td: TdComplex, gpaw: bool, eptp: EptpControls) -> bool:
    """Validate walk depth against gpaw, then re-root the controls at the TD's SEPT."""
    if gpaw and eptp.ept_pwl < LVL_PML5:
        return False
    td.gpaw = gpaw
    rooted = EptpControls(
        ept_ps_mt=eptp.ept_ps_mt,
        ept_pwl=eptp.ept_pwl,
        enable_ad_bits=eptp.enable_ad_bits,
        enable_sss_control=eptp.enable_sss_control,
        base_pa=td.sept_root_pa,
    )
    td.eptp_raw = rooted.raw
    return True


def sept_walk_ok(td: TdComplex) -> bool:
    """Entry precondition for any secure page-table walk.

    A zeroed controls value walks from physical page 0 at depth LVL_PT, which
    dereferences uninitialized private memory; the model surfaces that as the
    machine-check analog instead of crashing.
    """
    controls = EptpControls.from_raw(td.eptp_raw)
    return controls.ept_pwl in (LVL_PML4, LVL_PML5) and controls.base_pa != 0


def read_and_set_td_configurations(td: TdComplex, params: TdParams, mode: str) -> int:
    """Validate and install host-supplied TD parameters.

    The vulnerable variant writes each parameter as soon as its own check
    passes and never rolls back, so a later failure (for example xfam) leaves
    the earlier writes in place with the op_state untouched.  The fixed
    variant validates everything before mutating the TD.
    """
    attrs = TdAttributes(params.attributes)
    eptp = EptpControls(ept_pwl=params.ept_pwl)

    if mode == "vulnerable":
        td.num_vcpus = 0
        if not verify_td_attributes(attrs, is_import=False):
            return with_operand(TDX_OPERAND_INVALID, OPERAND_ID_ATTRIBUTES)
        td.attributes = attrs
        td.pending_ve_disable = attrs.sept_ve_disable
        if not check_xfam(params.xfam):
            return with_operand(TDX_OPERAND_INVALID, OPERAND_ID_XFAM)
        td.xfam = params.xfam
        if not verify_and_set_td_eptp_controls(td, params.gpaw, eptp):
            return with_operand(TDX_OPERAND_INVALID, OPERAND_ID_EPTP_CONTROLS)
        if not VIRT_TSC_FREQUENCY_MIN <= params.tsc_frequency <= VIRT_TSC_FREQUENCY_MAX:
            return with_operand(TDX_OPERAND_INVALID, OPERAND_ID_TSC_FREQUENCY)
        td.tsc_frequency = params.tsc_frequency
        td.hp_lock_timeout = params.hp_lock_timeout
        return TDX_SUCCESS

    if not verify_td_attributes(attrs, is_import=False):
        return with_operand(TDX_OPERAND_INVALID, OPERAND_ID_ATTRIBUTES)
    if not check_xfam(params.xfam):
        return with_operand(TDX_OPERAND_INVALID, OPERAND_ID_XFAM)
    if params.gpaw and eptp.ept_pwl < LVL_PML5:
        return with_operand(TDX_OPERAND_INVALID, OPERAND_ID_EPTP_CONTROLS)
    if not VIRT_TSC_FREQUENCY_MIN <= params.tsc_frequency <= VIRT_TSC_FREQUENCY_MAX:
        return with_operand(TDX_OPERAND_INVALID, OPERAND_ID_TSC_FREQUENCY)
    td.num_vcpus = 0
    td.attributes = attrs
    td.pending_ve_disable = attrs.sept_ve_disable
    td.xfam = params.xfam
    verify_and_set_td_eptp_controls(td, params.gpaw, eptp)
    td.tsc_frequency = params.tsc_frequency
    td.hp_lock_timeout = params.hp_lock_timeout
    return TDX_SUCCESS


def init_event_filters(
    td: TdComplex,
    event_filtering: bool,
    count: int,
    entries: list[int],
    mode: str,
) -> int:
    """Install the guest perfmon event allow list.

    The vulnerable variant assigns the filter count before the validation
    loop and bails out mid-array on the first bad entry, leaving stale,
    unsorted, or never-initialized slots covered by the count.  The fixed
    variant validates into a scratch buffer and zeroes everything on failure.
    """
    if not (event_filtering and td.attributes.perfmon):
        return TDX_SUCCESS
    if count > MAX_EVENT_FILTERS:
        return with_operand(TDX_EVENT_FILTER_INVALID, 0)

    if mode == "vulnerable":
        td.event_filters_num = count
        for i in range(count):
            entry = EventFilter.from_raw(entries[i])
            if not entry.legal:
                return with_operand(TDX_EVENT_FILTER_INVALID, i)
            if i != 0 and td.event_filters[i - 1] >= entry.internal:
                return with_operand(TDX_EVENT_FILTER_ORDER_INVALID, i)
            td.event_filters[i] = entry.internal
        return TDX_SUCCESS

    scratch = []
    for i in range(count):
        entry = EventFilter.from_raw(entries[i])
        if not entry.legal:
            td.event_filters_num = 0
            td.event_filters = [0] * MAX_EVENT_FILTERS
            return with_operand(TDX_EVENT_FILTER_INVALID, i)
        if i != 0 and scratch[i - 1] >= entry.internal:
            td.event_filters_num = 0
            td.event_filters = [0] * MAX_EVENT_FILTERS
            return with_operand(TDX_EVENT_FILTER_ORDER_INVALID, i)
        scratch.append(entry.internal)
    td.event_filters = scratch + [0] * (MAX_EVENT_FILTERS - len(scratch))
    td.event_filters_num = count
    return TDX_SUCCESS


def audit_event_filters(td: TdComplex) -> dict:
    """Report whether the live filter array is internally consistent."""
    live = td.event_filters[: td.event_filters_num]
    return {
        "count": td.event_filters_num,
        "sorted": all(live[i - 1] < live[i] for i in range(1, len(live))),
        "zero_entries": sum(1 for v in live if v == 0 and td.event_filters_num > 0),
    }


def is_event_allowed(td: TdComplex, event_select: int, umask: int) -> bool:
    """Binary search of the sorted allow list for an exact (event, umask) match."""
    if td.event_filters_num == 0:
        return False
    key = (event_select & 0xFF) | ((umask & 0xFF) << 8)
    live = td.event_filters[: td.event_filters_num]
    index = bisect.bisect_left(live, key)
    return index < len(live) and live[index] == key


class TdImportSink:
    """Metadata sink bound to one TD scope for one import operation.

    Applies the per-field special write handling (verification on the way in)
    and tracks which elements were explicitly written for the fixed-mode
    required-field accounting.  The skipped-address-check behavior is the
    pre-fix variant: private-GPA fields are stored without validity checks.
    """

    def __init__(
        self,
        td: TdComplex,
        catalog: FieldCatalog,
        is_import: bool = True,
        vp_index: Optional[int] = None,
        gpa_checks: bool = False,
        track: bool = True,
    ):
        self.td = td
        self.catalog = catalog
        self.is_import = is_import
        self.vp_index = vp_index
        self.gpa_checks = gpa_checks
        self.track = track

    def write_field(self, entry: FieldEntry, field_index: int, values: list[int],
                    combined_mask: int) -> int:
        masked = [v & combined_mask for v in values]
        status = self._special_check(entry, field_index, masked)
        if status != TDX_SUCCESS:
            return status
        base = field_index * entry.num_of_elem
        for k, value in enumerate(masked):
            if entry.special_wr_handling:
                new_value = value
            else:
                old = self.td.read_element(entry, base + k, self.vp_index)
                new_value = (value & combined_mask) | (old & ~combined_mask & U64)
            self.td.write_element_raw(entry, base + k, new_value, self.vp_index)
            if self.track:
                self.td.note_written(entry, base + k, self.vp_index)
        return TDX_SUCCESS

    def record_skip(self, entry: FieldEntry, field_index: int) -> None:
        self.td.note_skipped(entry, field_index, self.vp_index)

    def _special_check(self, entry: FieldEntry, field_index: int, values: list[int]) -> int:
        if entry.gpa_private and self.is_import and self.gpa_checks:
            for value in values:
                if not check_gpa_validity(value, self.td.gpaw):
                    return TDX_METADATA_FIELD_VALUE_NOT_VALID
        if not entry.special_wr_handling:
            return TDX_SUCCESS
        name = entry.name
        value = values[0]
        if name == "ATTRIBUTES":
            if not verify_td_attributes(TdAttributes(value), self.is_import):
                return TDX_METADATA_FIELD_VALUE_NOT_VALID
        elif name == "XFAM":
            if not check_xfam(value):
                return TDX_METADATA_FIELD_VALUE_NOT_VALID
        elif name == "EPTP":
            if not verify_and_set_td_eptp_controls(
                self.td, self.td.gpaw, EptpControls.from_raw(value)
            ):
                return TDX_METADATA_FIELD_VALUE_NOT_VALID
            # verify_and_set already stored the re-rooted controls; keep them.
            values[0] = self.td.eptp_raw
        elif name == "NUM_VCPUS":
            if not 0 < value <= MAX_VCPUS_PER_TD:
                return TDX_METADATA_FIELD_VALUE_NOT_VALID
        elif name == "TSC_FREQUENCY":
            if not VIRT_TSC_FREQUENCY_MIN <= value <= VIRT_TSC_FREQUENCY_MAX:
                return TDX_METADATA_FIELD_VALUE_NOT_VALID
        elif name == "HP_LOCK_TIMEOUT":
            if not MIN_HP_LOCK_TIMEOUT_USEC <= value <= MAX_HP_LOCK_TIMEOUT_USEC:
                return TDX_METADATA_FIELD_VALUE_NOT_VALID
        elif name == "XCR0":
            if not value & XCR0_X87:
                return TDX_METADATA_FIELD_VALUE_NOT_VALID
        # GPAW, XBUFF, MIG_DEC_KEY: special flag set, no extra constraint modeled.
        return TDX_SUCCESS


class TdExportSource:
    """Read-side adapter handing export-masked values to the serializer."""

    def __init__(self, td: TdComplex, vp_index: Optional[int] = None,
                 sys_store: Optional[dict] = None):
        self.td = td
        self.vp_index = vp_index
        self.sys_store = sys_store

    def read_field(self, entry: FieldEntry, field_index: int) -> list[int]:
        if entry.context_code == MD_CTX_SYS and self.sys_store is not None:
            key = (entry.class_code, entry.field_code)
            values = self.sys_store.get(key, [0] * entry.code_span)
            base = field_index * entry.num_of_elem
            section = values[base : base + entry.num_of_elem]
        else:
            section = self.td.read_field(entry, field_index, self.vp_index)
        return [v & entry.export_mask for v in section]


def missing_required_fields(
    td: TdComplex,
    catalog: FieldCatalog,
    context_code: int,
    kinds: set[MigClass],
    classes_present: set[int],
    vp_index: Optional[int] = None,
) -> list[FieldEntry]:
    """Entries from the mandatory-import set not fully written during import."""
    required = catalog.required_import_entries(context_code, kinds, classes_present)
    return [e for e in required if not td.fully_written(e, vp_index)]
