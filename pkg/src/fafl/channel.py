"""AES-256-GCM sealed frames for client/server weight exchange.

Wire layout (all integers little-endian)::

    offset size  field
    0      4     magic "FAFL"
    4      1     version (1)
    5      1     msg_type (0 broadcast, 1 client update, 2 ack)
    6      4     round
    10     4     sender id (server = 0xFFFFFFFF)
    14     12    nonce = sender (4) || counter (8)
    26     4     payload_len
    30     n     ciphertext
    30+n   16    GCM tag

The 30 header bytes are bound as associated data.
"""

from __future__ import annotations

import enum
import os
import struct
import time
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthenticationError, ChannelError, CodecError, ConfigError, FrameError
from .model import Arch, ParamVector

MAGIC = b"FAFL"
VERSION = 1
SERVER_ID = 0xFFFFFFFF
HEADER = struct.Struct("<4sBBII12sI")
HEADER_SIZE = HEADER.size  # 30
TAG_SIZE = 16
OVERHEAD = HEADER_SIZE + TAG_SIZE  # 46
MAX_COUNTER = 2**64 - 1
SECRET_ENV = "FAFL_MASTER_SECRET"
_KDF_INFO = b"fafl/channel-key/v1"


class MsgType(enum.IntEnum):
    BROADCAST = 0
    UPDATE = 1
    ACK = 2


@dataclass
class ChannelKey:
    key: bytes
    peer_id: int
    counter: int = 0

    def __post_init__(self):
        if len(self.key) != 32:
            raise ConfigError("channel keys are 32 bytes (AES-256)")

    def endpoint(self) -> "ChannelKey":
        """Independent copy with its own counter, for the other side of the channel."""
        return ChannelKey(self.key, self.peer_id, 0)


@dataclass(frozen=True)
class EncryptedFrame:
    msg_type: int
    round: int
    sender: int
    nonce: bytes
    ciphertext: bytes
    tag: bytes

    def header(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.msg_type, self.round, self.sender,
                           self.nonce, len(self.ciphertext))

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext + self.tag

    def __len__(self) -> int:
        return OVERHEAD + len(self.ciphertext)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "EncryptedFrame":
        buf = bytes(buf)
        if len(buf) < OVERHEAD:
            raise FrameError(f"frame of {len(buf)} bytes is shorter than the {OVERHEAD}-byte minimum")
        magic, version, mtype, rnd, sender, nonce, plen = HEADER.unpack_from(buf)
        if magic != MAGIC:
            raise FrameError("bad magic")
        if version != VERSION:
            raise FrameError(f"unsupported frame version {version}")
        if mtype not in MsgType._value2member_map_:
            raise FrameError(f"unknown message type {mtype}")
        if plen != len(buf) - OVERHEAD:
            raise FrameError("payload length does not match frame size")
        return cls(mtype, rnd, sender, nonce, buf[HEADER_SIZE:-TAG_SIZE], buf[-TAG_SIZE:])


class ChannelMeter:
    """Cumulative byte and wall-clock counters for sealed traffic."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self.messages = 0
        self.bytes_sealed = 0
        self.bytes_plaintext = 0
        self.seal_time = 0.0
        self.open_time = 0.0

    @property
    def overhead_ratio(self) -> float:
        if self.bytes_plaintext == 0:
            return 1.0
        return self.bytes_sealed / self.bytes_plaintext

    def snapshot(self) -> tuple[int, int, float, float]:
        return self.bytes_sealed, self.bytes_plaintext, self.seal_time, self.open_time


_default_meter = ChannelMeter()


def channel_metrics(meter: ChannelMeter | None = None) -> tuple[int, int, float, float]:
    """(bytes_sealed, bytes_plaintext, seal_time_s, open_time_s) accumulated so far."""
    return (meter or _default_meter).snapshot()


def load_master_secret(value: str | bytes | None = None) -> bytes:
    """Master secret from an explicit value or ``FAFL_MASTER_SECRET`` (64 hex chars)."""
    if value is None:
        value = os.environ.get(SECRET_ENV)
    if value is None or value == "":
        raise ConfigError(f"no master secret: set {SECRET_ENV} or master_secret in the config")
    if isinstance(value, bytes):
        secret = value
    else:
        try:
            secret = bytes.fromhex(value.strip())
        except ValueError:
            raise ConfigError("master secret must be 64 hex characters") from None
    if len(secret) != 32:
        raise ConfigError("master secret must be 32 bytes (64 hex characters)")
    return secret


def derive_channel_key(master_secret: bytes | None, client_id: int) -> ChannelKey:
    """HKDF-SHA256 expansion of the master secret into a per-client AES-256 key."""
    if not master_secret:
        raise ConfigError("missing master secret")
    if not 0 <= client_id < SERVER_ID:
        raise ConfigError(f"client id {client_id} out of range")
    kdf = HKDF(
        algorithm=hashes.SHA256(),
        length=32,
        salt=None,
        info=_KDF_INFO + struct.pack("<I", client_id),
    )
    return ChannelKey(kdf.derive(bytes(master_secret)), client_id)


def aead_encrypt(key: bytes, nonce: bytes, plaintext: bytes, aad: bytes) -> tuple[bytes, bytes]:
    """Raw AES-GCM: returns (ciphertext, 16-byte tag)."""
    out = AESGCM(key).encrypt(nonce, plaintext, aad)
    return out[:-TAG_SIZE], out[-TAG_SIZE:]


def aead_decrypt(key: bytes, nonce: bytes, ciphertext: bytes, tag: bytes, aad: bytes) -> bytes:
    try:
        return AESGCM(key).decrypt(nonce, ciphertext + tag, aad)
    except InvalidTag:
        raise AuthenticationError("authentication tag mismatch") from None


def make_nonce(sender: int, counter: int) -> bytes:
    return struct.pack("<IQ", sender, counter)


def seal(
    key: ChannelKey,
    msg_type: int,
    round: int,
    sender: int,
    plaintext: bytes,
    meter: ChannelMeter | None = None,
) -> EncryptedFrame:
    if not plaintext:
        raise ChannelError("refusing to seal an empty payload")
    if key.counter >= MAX_COUNTER:
        raise ChannelError("nonce counter exhausted for this key")
    mtype = MsgType(msg_type)
    t0 = time.perf_counter()
    nonce = make_nonce(sender, key.counter)
    key.counter += 1
    header = HEADER.pack(MAGIC, VERSION, mtype, round, sender, nonce, len(plaintext))
    ct, tag = aead_encrypt(key.key, nonce, plaintext, header)
    frame = EncryptedFrame(int(mtype), round, sender, nonce, ct, tag)
    meter = meter or _default_meter
    meter.seal_time += time.perf_counter() - t0
    meter.messages += 1
    meter.bytes_sealed += OVERHEAD + len(ct)
    meter.bytes_plaintext += len(plaintext)
    return frame


def open_frame(key: ChannelKey, frame: EncryptedFrame | bytes,
               meter: ChannelMeter | None = None) -> bytes:
    """Verify and decrypt; never returns partial plaintext."""
    t0 = time.perf_counter()
    if not isinstance(frame, EncryptedFrame):
        frame = EncryptedFrame.from_bytes(frame)
    if frame.nonce[:4] != struct.pack("<I", frame.sender):
        raise FrameError("nonce sender prefix does not match header sender")
    pt = aead_decrypt(key.key, frame.nonce, frame.ciphertext, frame.tag, frame.header())
    (meter or _default_meter).open_time += time.perf_counter() - t0
    return pt


# ---------------------------------------------------------------------------
# parameter codec
# ---------------------------------------------------------------------------

_COUNT = struct.Struct("<I")
_ARCH = struct.Struct("<III")
CODEC_HEADER = _COUNT.size + _ARCH.size  # 16


def serialize_params(w: ParamVector) -> bytes:
    if not np.all(np.isfinite(w.values)):
        raise CodecError("cannot serialise non-finite parameters")
    n = len(w)
    return (_COUNT.pack(n) + _ARCH.pack(*w.arch.dims)
            + w.values.astype("<f8", copy=False).tobytes())


def deserialize_params(buf: bytes) -> ParamVector:
    if len(buf) < CODEC_HEADER:
        raise CodecError("truncated parameter buffer")
    (n,) = _COUNT.unpack_from(buf)
    dims = _ARCH.unpack_from(buf, _COUNT.size)
    if len(buf) != CODEC_HEADER + 8 * n:
        raise CodecError(f"buffer of {len(buf)} bytes does not hold {n} parameters")
    try:
        arch = Arch(*dims)
    except ConfigError as exc:
        raise CodecError(str(exc)) from None
    if arch.size != n:
        raise CodecError(f"count {n} does not match architecture size {arch.size}")
    values = np.frombuffer(buf, dtype="<f8", count=n, offset=CODEC_HEADER).astype(np.float64)
    try:
        return ParamVector(values, arch)
    except Exception as exc:
        raise CodecError(str(exc)) from None
