"""Migration session key handling, bundle encryption, and IV discipline.

Bundles are AES-GCM-256 sealed: the metadata record (MBMD) travels in the
clear but is authenticated as associated data, and the payload is encrypted.
Every stream context carries a monotone IV counter that advances before use,
including on abort paths, so no (key, IV) pair is ever reused.

On-wire record layout (little endian, 40 bytes):
    magic "MBMD" | u16 version | u16 type | u32 payload_size |
    u32 stream_index | u64 iv_counter | 16-byte MAC
The MAC is the GCM tag; associated data is the record with the MAC zeroed.
"""

from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field as dc_field
from enum import Enum
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .status import TDX_INCORRECT_MBMD_MAC, TDX_INVALID_MBMD, TDX_SUCCESS

MBMD_MAGIC = b"MBMD"
MBMD_VERSION = 1
MBMD_BYTES = 40
MSK_BYTES = 32
LIST_BYTES = 4096


class BundleType(Enum):
    IMMUTABLE = 0
    TD = 1
    VP = 2
    MEM = 16


@dataclass
class MigrationSessionKey:
    """256-bit AES-GCM key addressed as four little-endian quadwords."""

    key: bytes

    def __post_init__(self):
        if len(self.key) != MSK_BYTES:
            raise ValueError("session key must be 32 bytes")

    @classmethod
    def from_quadwords(cls, quadwords: list[int]) -> "MigrationSessionKey":
        if len(quadwords) != 4:
            raise ValueError("session key is four quadwords")
        return cls(b"".join(q.to_bytes(8, "little") for q in quadwords))

    def to_quadwords(self) -> list[int]:
        return [int.from_bytes(self.key[i : i + 8], "little") for i in range(0, 32, 8)]

    @classmethod
    def generate(cls, rng: random.Random) -> "MigrationSessionKey":
        return cls(rng.randbytes(MSK_BYTES))


@dataclass
class Mbmd:
    bundle_type: BundleType
    payload_size: int
    stream_index: int
    iv_counter: int
    mac: bytes = b"\x00" * 16
    version: int = MBMD_VERSION

    def to_bytes(self) -> bytes:
        return (
            MBMD_MAGIC
            + struct.pack(
                "<HHIIQ",
                self.version,
                self.bundle_type.value,
                self.payload_size,
                self.stream_index,
                self.iv_counter,
            )
            + self.mac
        )

    def aad(self) -> bytes:
        """The authenticated view: the record with its MAC field zeroed."""
        body = self.to_bytes()
        return body[:-16] + b"\x00" * 16

    @classmethod
    def from_bytes(cls, data: bytes) -> "Mbmd":
        if len(data) != MBMD_BYTES or data[:4] != MBMD_MAGIC:
            raise ValueError("not a metadata record")
        version, btype, payload_size, stream_index, iv_counter = struct.unpack(
            "<HHIIQ", data[4:24]
        )
        return cls(
            bundle_type=BundleType(btype),
            payload_size=payload_size,
            stream_index=stream_index,
            iv_counter=iv_counter,
            mac=data[24:40],
            version=version,
        )


@dataclass
class InterruptedState:
    """First-failure latch plus the resume cursor for an interruptible import."""

    status: int = TDX_SUCCESS
    ext_err_info: list[int] = dc_field(default_factory=lambda: [0, 0])
    cursor: int = 0
    valid: bool = False

    def latch(self, status: int, ext_err_info: list[int]) -> None:
        if self.status == TDX_SUCCESS:
            self.status = status
            self.ext_err_info = list(ext_err_info)

    def reset(self) -> None:
        self.status = TDX_SUCCESS
        self.ext_err_info = [0, 0]
        self.cursor = 0
        self.valid = False


class MigStreamContext:
    """Per-stream crypto and resume state; one logical owner at a time."""

    def __init__(self, stream_index: int, key: Optional[MigrationSessionKey] = None,
                 counter_policy: str = "per_bundle"):
        if counter_policy not in ("per_bundle", "per_list"):
            raise ValueError(f"unknown counter policy: {counter_policy!r}")
        self.stream_index = stream_index
        self.key = key
        self.iv_counter = 0
        self.counter_policy = counter_policy
        self.interrupted_state = InterruptedState()
        self._locked = False
        self.iv_history: list[bytes] = []

    def acquire(self) -> bool:
        if self._locked:
            return False
        self._locked = True
        return True

    def release(self) -> None:
        self._locked = False

    @property
    def locked(self) -> bool:
        return self._locked

    def next_iv(self) -> bytes:
        """Advance the counter and return the fresh 96-bit IV.

        The counter moves before the IV is handed out, so a caller that later
        aborts and discards its output has still spent the value.
        """
        self.iv_counter += 1
        iv = make_iv(self.stream_index, self.iv_counter)
        self.iv_history.append(iv)
        return iv

    def reserve_counters(self, count: int) -> None:
        """Spend additional counter values without emitting (per-list policy)."""
        self.iv_counter += count


def make_iv(stream_index: int, counter: int) -> bytes:
    """96-bit IV: 32-bit stream index followed by the 64-bit counter."""
    return stream_index.to_bytes(4, "little") + counter.to_bytes(8, "little")


def encrypt_bundle(
    ctx: MigStreamContext,
    bundle_type: BundleType,
    lists: list[bytes],
) -> tuple[Mbmd, bytes]:
    """Seal whole 4KB lists into (record, ciphertext).

    The counter always advances: once per bundle by default, or once per list
    under the per-list policy (extra values are reserved, mirroring per-call
    increments on the export path).
    """
    for item in lists:
        if len(item) != LIST_BYTES:
            raise ValueError("payload must be whole 4KB lists")
    if ctx.key is None:
        raise ValueError("stream context has no session key")
    plaintext = b"".join(lists)
    iv = ctx.next_iv()
    if ctx.counter_policy == "per_list" and len(lists) > 1:
        ctx.reserve_counters(len(lists) - 1)
    mbmd = Mbmd(
        bundle_type=bundle_type,
        payload_size=len(plaintext),
        stream_index=ctx.stream_index,
        iv_counter=ctx.iv_counter if ctx.counter_policy == "per_bundle" else ctx.iv_counter - len(lists) + 1,
    )
    sealed = AESGCM(ctx.key.key).encrypt(iv, plaintext, mbmd.aad())
    ciphertext, tag = sealed[:-16], sealed[-16:]
    mbmd.mac = tag
    return mbmd, ciphertext


def decrypt_bundle(
    ctx: MigStreamContext,
    mbmd: Mbmd,
    ciphertext: bytes,
) -> tuple[int, Optional[list[bytes]]]:
    """Authenticated open; the MAC covers the record before any plaintext is out.

    Returns (status, lists).  A MAC mismatch surfaces as a status word, the
    model analog of the production fatal-error path.
    """
    if ctx.key is None:
        raise ValueError("stream context has no session key")
    if mbmd.payload_size != len(ciphertext) or mbmd.payload_size % LIST_BYTES != 0:
        return TDX_INVALID_MBMD, None
    iv = make_iv(mbmd.stream_index, mbmd.iv_counter)
    try:
        plaintext = AESGCM(ctx.key.key).decrypt(iv, ciphertext + mbmd.mac, mbmd.aad())
    except InvalidTag:
        return TDX_INCORRECT_MBMD_MAC, None
    lists = [plaintext[i : i + LIST_BYTES] for i in range(0, len(plaintext), LIST_BYTES)]
    return TDX_SUCCESS, lists
