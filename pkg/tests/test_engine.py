"""Engine flows: build ordering, interruptible imports, exports, and round-trips."""

import random

from tdxmodel import status as S
from tdxmodel.engine import EngineMode, EpochToken, InterruptPolicy, TdxModule
from tdxmodel.md_codec import MD_CTX_TD, MD_CTX_VP
from tdxmodel.scenarios import (
    export_blackout,
    finish_import,
    import_to_state_import,
    standard_setup,
)
from tdxmodel.states import OpState, validate_trace
from tdxmodel.td import ATTR_DEBUG, ATTR_MIGRATABLE, TdParams


def test_build_reaches_runnable():
    m = TdxModule(seed=1)
    status, td = m.build_td(TdParams(attributes=ATTR_MIGRATABLE), num_vcpus=2)
    assert status == S.TDX_SUCCESS
    assert td.op_state is OpState.RUNNABLE
    assert td.num_vcpus == 2
    assert len(td.measurement) == 48  # running SHA-384 digest
    assert validate_trace(m.matrix, td.trace, "fixed") == []


def test_mng_init_requires_control_pages():
    m = TdxModule(seed=1)
    _, td = m.tdh_mng_create(hkid=0)
    m.tdh_mng_key_config(td)
    status = m.tdh_mng_init(td, TdParams())
    assert status == S.TDX_TDCX_NUM_INCORRECT
    assert td.op_state is OpState.UNINITIALIZED


def test_mem_add_before_init_is_state_error():
    m = TdxModule(seed=1)
    _, td = m.tdh_mng_create(hkid=0)
    status = m.tdh_mem_page_add(td, 0x1000, 0xAA)
    assert status == S.TDX_OP_STATE_INCORRECT


def test_debug_build_is_legal_but_not_exportable():
    m = TdxModule(seed=2)
    status, td = m.build_td(TdParams(attributes=ATTR_DEBUG))
    assert status == S.TDX_SUCCESS
    m.tdh_mig_stream_create(td)
    status, bundle = m.tdh_export_state_immutable(td)
    assert status == S.TDX_TD_NOT_MIGRATABLE
    assert bundle is None


def test_migratable_build_is_exportable():
    m = TdxModule(seed=3)
    env = standard_setup(m, num_vcpus=1)
    assert env["src"].op_state is OpState.LIVE_EXPORT
    assert len(env["bundle_immutable"].data) == 3 * 4096


def test_export_state_td_requires_pause():
    m = TdxModule(seed=4)
    env = standard_setup(m, num_vcpus=1)
    status, _ = m.tdh_export_state_td(env["src"])
    assert status == S.TDX_OP_STATE_INCORRECT  # LIVE_EXPORT, not paused
    m.tdh_export_pause(env["src"])
    status, bundle = m.tdh_export_state_td(env["src"])
    assert status == S.TDX_SUCCESS and bundle is not None


def test_export_abort_restores_runnable():
    m = TdxModule(seed=5)
    env = standard_setup(m, num_vcpus=1)
    assert m.tdh_export_abort(env["src"]) == S.TDX_SUCCESS
    assert env["src"].op_state is OpState.RUNNABLE


def test_export_mem_advances_counter_even_on_abort():
    m = TdxModule(seed=6)
    env = standard_setup(m, num_vcpus=1)
    migsc = env["src"].migsc[0]
    before = migsc.iv_counter
    status, bundle = m.tdh_export_mem(env["src"], 0x1000, abort=True)
    assert status == S.TDX_INTERRUPTED_RESUMABLE and bundle is None
    assert migsc.iv_counter == before + 1
    status, bundle = m.tdh_export_mem(env["src"], 0x1000)
    assert status == S.TDX_SUCCESS
    assert migsc.iv_counter == before + 2


def test_import_interrupt_and_resume_cursor():
    m = TdxModule(seed=7)
    env = standard_setup(m, num_vcpus=1)
    dst = env["dst"]
    status = m.tdh_import_state_immutable(
        dst, env["bundle_immutable"], policy=InterruptPolicy.after(0)
    )
    assert status == S.TDX_INTERRUPTED_RESUMABLE
    assert dst.migsc[0].interrupted_state.cursor == 1
    assert dst.op_state is OpState.START_IMPORT  # fixed mode first touch
    status = m.tdh_import_state_immutable(dst, env["bundle_immutable"], resume=True)
    assert status == S.TDX_SUCCESS
    assert dst.op_state is OpState.MEMORY_IMPORT
    assert dst.attributes.migratable


def test_import_busy_when_stream_held():
    m = TdxModule(seed=8)
    env = standard_setup(m, num_vcpus=1)
    env["dst"].migsc[0].acquire()
    status = m.tdh_import_state_immutable(env["dst"], env["bundle_immutable"])
    assert status == S.with_operand(S.TDX_OPERAND_BUSY, S.OPERAND_ID_MIGSC)


def test_import_rejects_wrong_bundle_type():
    m = TdxModule(seed=9)
    env = standard_setup(m, num_vcpus=1)
    export_blackout(m, env)
    status = m.tdh_import_state_immutable(env["dst"], env["bundle_td"])
    assert status == S.TDX_INVALID_MBMD


def test_import_detects_tampered_ciphertext():
    m = TdxModule(seed=10)
    env = standard_setup(m, num_vcpus=1)
    bundle = env["bundle_immutable"]
    tampered = bytearray(bundle.data)
    tampered[0] ^= 1
    bundle.data = bytes(tampered)
    status = m.tdh_import_state_immutable(env["dst"], bundle)
    assert status == S.TDX_INCORRECT_MBMD_MAC
    assert env["dst"].op_state is OpState.UNINITIALIZED


def test_servtd_write_blocked_during_blackout():
    m = TdxModule(seed=11)
    env = standard_setup(m, num_vcpus=1)
    m.tdh_export_pause(env["src"])
    status, _ = m.tdg_servtd_wr(env["migtd"], env["src_handle"], 0x9810000300000010, 0x1)
    assert status == S.TDX_OP_STATE_INCORRECT
    status, _ = m.tdg_servtd_rd(env["migtd"], env["src_handle"], 0x9810000300000010)
    assert status == S.TDX_SUCCESS  # reads stay allowed


def test_host_write_of_private_gpa_field_always_checked():
    m = TdxModule(EngineMode(bug9="vulnerable"), seed=12)
    env = standard_setup(m, num_vcpus=1)
    export_blackout(m, env)
    import_to_state_import(m, env)
    assert finish_import(m, env) == S.TDX_SUCCESS
    td = env["dst"]
    # Host-side writes keep the validity check even with the import-path skip.
    vapic = m.catalog.by_name(MD_CTX_VP, "L2_VAPIC_GPA")
    sinkless = m.tdh_mng_wr(td, vapic.field_id_raw, 0xFFFF_8000_0000_0000)
    assert S.status_class(sinkless) in (
        S.TDX_METADATA_FIELD_NOT_WRITABLE,  # vp field via mng_wr: not a td field
        S.TDX_OPERAND_INVALID,
    )


def test_full_migration_roundtrip_reproduces_catalog_fields():
    rng = random.Random(13)
    for seed in (21, 22, 23):
        m = TdxModule(seed=seed)
        env = standard_setup(m, num_vcpus=2, num_pages=3)
        src = env["src"]
        # Randomize exportable state beyond the build defaults.
        td_epoch = m.catalog.by_name(MD_CTX_TD, "TD_EPOCH")
        src.write_element_raw(td_epoch, 0, rng.getrandbits(64))
        xbuff = m.catalog.by_name(MD_CTX_VP, "XBUFF")
        for vp in src.vps:
            values = vp.values(xbuff)
            for i in rng.sample(range(1536), 16):
                values[i] = rng.getrandbits(64)

        export_blackout(m, env)
        mem_bundles = []
        for gpa in list(src.pages):
            status, bundle = m.tdh_export_mem(src, gpa)
            assert status == S.TDX_SUCCESS
            mem_bundles.append(bundle)

        dst = env["dst"]
        import_to_state_import(m, env)
        for bundle in mem_bundles:
            assert m.tdh_import_mem(dst, bundle) == S.TDX_SUCCESS
        assert finish_import(m, env) == S.TDX_SUCCESS
        assert dst.op_state is OpState.RUNNABLE

        for entry in m.catalog.entries_for(MD_CTX_TD):
            if not entry.exportable:
                continue
            for position in range(entry.code_span):
                src_value = src.read_element(entry, position) & entry.export_mask
                dst_value = dst.read_element(entry, position) & entry.export_mask
                assert src_value == dst_value, (entry.name, position)
        for entry in m.catalog.entries_for(MD_CTX_VP):
            if not entry.exportable or entry.mig_export.value != "ME":
                continue
            for vp_index in range(2):
                for position in range(entry.code_span):
                    src_value = src.read_element(entry, position, vp_index) & entry.export_mask
                    dst_value = dst.read_element(entry, position, vp_index) & entry.export_mask
                    assert src_value == dst_value, (entry.name, vp_index, position)
        assert dst.pages == src.pages
        for td in m.tds.values():
            assert validate_trace(m.matrix, td.trace, "fixed") == []


def test_import_track_requires_matching_vcpu_counts():
    m = TdxModule(seed=14)
    env = standard_setup(m, num_vcpus=2)
    export_blackout(m, env)
    import_to_state_import(m, env)
    dst = env["dst"]
    assert m.tdh_import_state_vp(dst, 0, env["bundle_vps"][0]) == S.TDX_SUCCESS
    status = m.tdh_import_track(dst, env["start_token"])
    assert status == S.TDX_SOME_VCPUS_NOT_MIGRATED  # 1 of 2 migrated
    assert m.tdh_import_state_vp(dst, 1, env["bundle_vps"][1]) == S.TDX_SUCCESS
    assert m.tdh_import_track(dst, env["start_token"]) == S.TDX_SUCCESS
    assert dst.op_state is OpState.POST_IMPORT


def test_non_start_token_keeps_state():
    m = TdxModule(seed=15)
    env = standard_setup(m, num_vcpus=1)
    status = m.tdh_import_state_immutable(env["dst"], env["bundle_immutable"])
    assert status == S.TDX_SUCCESS
    status = m.tdh_import_track(env["dst"], EpochToken(start=False, epoch=5))
    assert status == S.TDX_SUCCESS
    assert env["dst"].op_state is OpState.MEMORY_IMPORT


def test_fatal_td_blocks_further_calls():
    m = TdxModule(EngineMode(bug2="vulnerable"), seed=16)
    _, td = m.tdh_mng_create(hkid=0)
    td.op_state = OpState.MEMORY_IMPORT  # direct placement for the gate test
    td.fatal = True
    assert m.tdh_mem_sept_add(td, 0x1000) == S.TDX_TD_FATAL


def test_locked_td_returns_busy():
    m = TdxModule(seed=17)
    env = standard_setup(m, num_vcpus=1)
    env["src"].locked = True
    status, _ = m.tdh_mng_rd(env["src"], 0x1110000300000000)
    assert S.status_class(status) == S.TDX_OPERAND_BUSY


def test_mig_dec_key_readable_only_on_debug_td():
    m = TdxModule(seed=18)
    env = standard_setup(m, num_vcpus=1)
    status, _ = m.tdh_mng_rd(env["src"], 0x9810000300000010, count=4)
    assert status == S.TDX_METADATA_FIELD_NOT_READABLE
    status, debug_td = m.build_td(TdParams(attributes=ATTR_DEBUG))
    assert status == S.TDX_SUCCESS
    m.tdh_mig_stream_create(debug_td)
    _, handle = m.tdh_servtd_bind(debug_td, 0, env["migtd"])
    m.tdg_servtd_wr(env["migtd"], handle, 0x9810000300000010, 0x1234)
    status, values = m.tdh_mng_rd(debug_td, 0x9810000300000010)
    assert status == S.TDX_SUCCESS and values == [0x1234]


def test_latched_error_surfaces_first_failure():
    m = TdxModule(seed=19)
    env = standard_setup(m, num_vcpus=1)
    export_blackout(m, env)
    assert m.tdh_import_state_immutable(env["dst"], env["bundle_immutable"]) == S.TDX_SUCCESS

    from tdxmodel.md_codec import MdListHeader, MdSequence, make_sequence_header, build_list
    from tdxmodel.scenarios import seal
    from tdxmodel.envelope import BundleType

    # List 0 fails with a context mismatch; list 1 fails with a short header.
    vp_seq = MdSequence(make_sequence_header(MD_CTX_VP, 0x11, 0x20), [3])
    first = build_list([vp_seq]).to_bytes()
    second = (MdListHeader(list_buff_size=2, num_sequences=1).to_bytes()).ljust(4096, b"\x00")
    bundle = seal(env["key"], BundleType.TD, [first, second])
    status = m.tdh_import_state_td(env["dst"], bundle)
    assert S.status_class(status) == S.TDX_METADATA_FIELD_ID_INCORRECT  # the first one
    assert m.vmm_regs["rcx"] == vp_seq.header_raw
    assert env["dst"].op_state is OpState.FAILED_IMPORT


def test_servtd_access_busy_on_locked_target():
    m = TdxModule(seed=20)
    env = standard_setup(m, num_vcpus=1)
    env["dst"].locked = True
    status, _ = m.tdg_servtd_rd(env["migtd"], env["dst_handle"], 0x9810000300000010)
    assert S.status_class(status) == S.TDX_OPERAND_BUSY


def test_fixed_mode_random_walk_safety_invariants():
    """Random allowed-call sequences in fixed mode never produce an unsafe TD.

    Checked after every call: no TD is simultaneously debug and migratable,
    and any TD that completed an immutable import holds import-valid
    attributes.
    """
    from tdxmodel.td import ATTR_PERFMON, verify_td_attributes

    attr_menu = [0, ATTR_DEBUG, ATTR_MIGRATABLE, ATTR_DEBUG | ATTR_MIGRATABLE, ATTR_PERFMON]
    import_states = {
        OpState.MEMORY_IMPORT, OpState.STATE_IMPORT, OpState.POST_IMPORT,
        OpState.LIVE_IMPORT,
    }
    for seed in (31, 32, 33):
        rng = random.Random(seed)
        m = TdxModule(seed=seed)
        env = standard_setup(m, num_vcpus=1)
        targets = [env["dst"], env["src"]]
        completed_import = set()
        for _ in range(120):
            td = rng.choice(targets)
            op = rng.randrange(5)
            if op == 0:
                m.tdh_mng_init(td, TdParams(
                    attributes=rng.choice(attr_menu), xfam=rng.choice((0, 3)),
                ))
            elif op == 1:
                status = m.tdh_import_state_immutable(
                    td, env["bundle_immutable"],
                    policy=InterruptPolicy.after(rng.randrange(3)),
                )
                if status == S.TDX_SUCCESS:
                    completed_import.add(td.tdr_page)
            elif op == 2:
                status = m.tdh_import_state_immutable(td, env["bundle_immutable"], resume=True)
                if status == S.TDX_SUCCESS:
                    completed_import.add(td.tdr_page)
            elif op == 3:
                m.tdh_mng_wr(td, 0x1110000300000000, ATTR_DEBUG)
            else:
                m.tdh_import_track(td, EpochToken(start=True, epoch=1))
            for candidate in m.tds.values():
                assert not (candidate.attributes.debug and candidate.attributes.migratable)
                if candidate.tdr_page in completed_import or candidate.op_state in import_states:
                    assert verify_td_attributes(candidate.attributes, is_import=True), (
                        seed, candidate.snapshot(),
                    )
        for td in m.tds.values():
            assert validate_trace(m.matrix, td.trace, "fixed") == []


def test_export_write_block_leaves_are_permission_gated():
    m = TdxModule(seed=24)
    env = standard_setup(m, num_vcpus=1)
    assert m.tdh_export_blockw(env["src"]) == S.TDX_SUCCESS      # LIVE_EXPORT
    assert m.tdh_export_unblockw(env["src"]) == S.TDX_SUCCESS
    assert m.tdh_export_restore(env["src"]) == S.TDX_OP_STATE_INCORRECT  # RUNNABLE only
    m.tdh_export_abort(env["src"])
    assert m.tdh_export_restore(env["src"]) == S.TDX_SUCCESS
    assert m.tdh_export_blockw(env["src"]) == S.TDX_OP_STATE_INCORRECT


def test_vp_index_bounds_are_status_errors():
    m = TdxModule(seed=25)
    env = standard_setup(m, num_vcpus=1)
    export_blackout(m, env)
    import_to_state_import(m, env)
    dst = env["dst"]
    status = m.tdh_import_state_vp(dst, 9, env["bundle_vps"][0])
    assert status == S.with_operand(S.TDX_OPERAND_INVALID, S.OPERAND_ID_TDVPR)
    assert m.tdh_vp_init(env["src"], 9) == S.TDX_OP_STATE_INCORRECT  # src is paused
    status, src2 = m.build_td(TdParams(attributes=ATTR_MIGRATABLE))
    assert m.tdh_vp_enter(src2, 9) == S.with_operand(S.TDX_OPERAND_INVALID, S.OPERAND_ID_TDVPR)
