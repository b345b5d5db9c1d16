"""Envelope sealing: AEAD round-trips, tamper detection, and IV discipline."""

import random

import pytest

from tdxmodel import status as S
from tdxmodel.envelope import (
    MBMD_BYTES,
    BundleType,
    Mbmd,
    MigrationSessionKey,
    MigStreamContext,
    decrypt_bundle,
    encrypt_bundle,
    make_iv,
)


def fresh_ctx(seed=1, stream_index=0, **kwargs):
    rng = random.Random(seed)
    return MigStreamContext(stream_index, MigrationSessionKey.generate(rng), **kwargs)


def some_lists(rng, count=2):
    return [rng.randbytes(4096) for _ in range(count)]


def test_key_quadword_roundtrip():
    quadwords = [0xDE, 0x7E, 0xC7, 0xED]
    key = MigrationSessionKey.from_quadwords(quadwords)
    assert len(key.key) == 32
    assert key.to_quadwords() == quadwords


def test_key_generation_is_seed_deterministic():
    first = MigrationSessionKey.generate(random.Random(5))
    second = MigrationSessionKey.generate(random.Random(5))
    assert first.key == second.key


def test_mbmd_record_layout():
    mbmd = Mbmd(BundleType.VP, payload_size=8192, stream_index=3, iv_counter=9)
    raw = mbmd.to_bytes()
    assert len(raw) == MBMD_BYTES
    assert raw[:4] == b"MBMD"
    assert Mbmd.from_bytes(raw) == mbmd


def test_roundtrip():
    rng = random.Random(2)
    ctx = fresh_ctx()
    lists = some_lists(rng, 3)
    mbmd, ciphertext = encrypt_bundle(ctx, BundleType.IMMUTABLE, lists)
    status, out = decrypt_bundle(ctx, mbmd, ciphertext)
    assert status == S.TDX_SUCCESS
    assert out == lists


def test_same_plaintext_twice_differs():
    rng = random.Random(3)
    ctx = fresh_ctx()
    lists = some_lists(rng, 1)
    _, first = encrypt_bundle(ctx, BundleType.TD, lists)
    _, second = encrypt_bundle(ctx, BundleType.TD, lists)
    assert first != second  # distinct IVs


def test_ciphertext_bit_flip_detected():
    rng = random.Random(4)
    ctx = fresh_ctx()
    mbmd, ciphertext = encrypt_bundle(ctx, BundleType.TD, some_lists(rng, 1))
    tampered = bytearray(ciphertext)
    tampered[100] ^= 0x10
    status, out = decrypt_bundle(ctx, mbmd, bytes(tampered))
    assert status == S.TDX_INCORRECT_MBMD_MAC
    assert out is None


@pytest.mark.parametrize("field,delta", [
    ("bundle_type", BundleType.VP),
    ("stream_index", 1),
    ("iv_counter", 2),
])
def test_mbmd_field_tamper_detected(field, delta):
    rng = random.Random(5)
    ctx = fresh_ctx()
    mbmd, ciphertext = encrypt_bundle(ctx, BundleType.TD, some_lists(rng, 1))
    setattr(mbmd, field, delta)
    status, _ = decrypt_bundle(ctx, mbmd, ciphertext)
    assert status == S.TDX_INCORRECT_MBMD_MAC


def test_payload_size_mismatch_is_invalid_mbmd():
    rng = random.Random(6)
    ctx = fresh_ctx()
    mbmd, ciphertext = encrypt_bundle(ctx, BundleType.TD, some_lists(rng, 1))
    status, _ = decrypt_bundle(ctx, mbmd, ciphertext + b"\x00" * 4096)
    assert status == S.TDX_INVALID_MBMD


def test_counter_starts_at_zero_and_ivs_step_by_one():
    ctx = fresh_ctx(stream_index=7)
    assert ctx.iv_counter == 0
    first = ctx.next_iv()
    second = ctx.next_iv()
    assert first == make_iv(7, 1) and second == make_iv(7, 2)
    assert first[:4] == second[:4]  # only the counter field differs
    assert int.from_bytes(second[4:], "little") - int.from_bytes(first[4:], "little") == 1


def test_counter_advances_even_when_output_discarded():
    ctx = fresh_ctx()
    ctx.next_iv()  # aborted operation: output never used
    before = ctx.iv_counter
    rng = random.Random(7)
    mbmd, _ = encrypt_bundle(ctx, BundleType.MEM, some_lists(rng, 1))
    assert before == 1
    assert mbmd.iv_counter == 2


def test_counter_policy_per_bundle_and_per_list():
    rng = random.Random(8)
    lists = some_lists(rng, 3)
    per_bundle = fresh_ctx()
    encrypt_bundle(per_bundle, BundleType.IMMUTABLE, lists)
    assert per_bundle.iv_counter == 1

    per_list = fresh_ctx(counter_policy="per_list")
    mbmd, ciphertext = encrypt_bundle(per_list, BundleType.IMMUTABLE, lists)
    assert per_list.iv_counter == 3
    # The recorded counter still names the IV actually used.
    status, out = decrypt_bundle(per_list, mbmd, ciphertext)
    assert status == S.TDX_SUCCESS and out == lists


def test_iv_multiset_has_no_duplicates_across_encrypt_and_abort():
    rng = random.Random(9)
    ctx = fresh_ctx()
    payload = some_lists(rng, 1)
    for _ in range(2000):
        if rng.random() < 0.5:
            ctx.next_iv()  # abort path
        else:
            encrypt_bundle(ctx, BundleType.MEM, payload)
    assert len(ctx.iv_history) == len(set(ctx.iv_history))


def test_reencrypting_same_page_never_repeats_ciphertext():
    # The ciphertext-comparison oracle: same page, same key, fresh counter.
    rng = random.Random(10)
    ctx = fresh_ctx()
    page = some_lists(rng, 1)
    seen = set()
    for _ in range(64):
        _, ciphertext = encrypt_bundle(ctx, BundleType.MEM, page)
        assert ciphertext not in seen
        seen.add(ciphertext)


def test_context_is_single_owner():
    ctx = fresh_ctx()
    assert ctx.acquire()
    assert not ctx.acquire()
    ctx.release()
    assert ctx.acquire()


def test_rejects_partial_lists():
    ctx = fresh_ctx()
    with pytest.raises(ValueError):
        encrypt_bundle(ctx, BundleType.TD, [b"\x00" * 100])
