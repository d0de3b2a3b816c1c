"""Offloadable services: AES-128-ECB and an echo service.

The AES core is a table-driven implementation vectorized with numpy over
the 16-byte blocks of a job.  ECB blocks are independent, so a job of any
size is processed as one array operation per round.  The device handler and
the host reference path share this core and differ only in how the work is
partitioned (lane waves vs. a single pass) and in how their time is costed.

This is a benchmark artifact: no constant-time guarantees are made.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

BLOCK_SIZE = 16
KEY_SIZE = 16
ROUNDS = 10

ECHO = "echo"
AES_ENCRYPT = "aes128-ecb-encrypt"
AES_DECRYPT = "aes128-ecb-decrypt"

DEFAULT_KEY = bytes(range(16))


class BadLength(ValueError):
    """Input length is empty or not a multiple of the AES block size."""


class Direction(str, enum.Enum):
    ENCRYPT = "encrypt"
    DECRYPT = "decrypt"


# -- GF(2^8) arithmetic and table generation --------------------------------

def _xtime(a: int) -> int:
    a <<= 1
    return (a ^ 0x11B) & 0xFF if a & 0x100 else a


def _gmul(a: int, b: int) -> int:
    p = 0
    while b:
        if b & 1:
            p ^= a
        a = _xtime(a)
        b >>= 1
    return p


def _build_sbox() -> tuple[np.ndarray, np.ndarray]:
    inv = [0] * 256
    for x in range(1, 256):
        for y in range(1, 256):
            if _gmul(x, y) == 1:
                inv[x] = y
                break
    sbox = np.zeros(256, dtype=np.uint32)
    for x in range(256):
        b = inv[x]
        s = b
        for shift in range(1, 5):
            s ^= ((b << shift) | (b >> (8 - shift))) & 0xFF
        sbox[x] = s ^ 0x63
    inv_sbox = np.zeros(256, dtype=np.uint32)
    inv_sbox[sbox] = np.arange(256, dtype=np.uint32)
    return sbox, inv_sbox


def _ror(words: np.ndarray, n: int) -> np.ndarray:
    return ((words >> np.uint32(n)) | (words << np.uint32(32 - n))) & np.uint32(0xFFFFFFFF)


def _column_table(box: np.ndarray, coeffs: tuple[int, int, int, int]) -> np.ndarray:
    out = np.zeros(256, dtype=np.uint32)
    for x in range(256):
        s = int(box[x])
        c0, c1, c2, c3 = (_gmul(s, c) for c in coeffs)
        out[x] = (c0 << 24) | (c1 << 16) | (c2 << 8) | c3
    return out


SBOX, INV_SBOX = _build_sbox()
_TE0 = _column_table(SBOX, (2, 1, 1, 3))
_TE = (_TE0, _ror(_TE0, 8), _ror(_TE0, 16), _ror(_TE0, 24))
_TD0 = _column_table(INV_SBOX, (14, 9, 13, 11))
_TD = (_TD0, _ror(_TD0, 8), _ror(_TD0, 16), _ror(_TD0, 24))
_RCON = (0x01, 0x02, 0x04, 0x08, 0x10, 0x20, 0x40, 0x80, 0x1B, 0x36)


# -- key schedule ------------------------------------------------------------

def expand_key(key: bytes) -> bytes:
    """Return the 176-byte AES-128 round-key schedule for ``key``."""
    if len(key) != KEY_SIZE:
        raise ValueError(f"AES-128 key must be {KEY_SIZE} bytes, got {len(key)}")
    w = [list(key[i:i + 4]) for i in range(0, 16, 4)]
    for i in range(4, 4 * (ROUNDS + 1)):
        t = list(w[i - 1])
        if i % 4 == 0:
            t = t[1:] + t[:1]
            t = [int(SBOX[b]) for b in t]
            t[0] ^= _RCON[i // 4 - 1]
        w.append([a ^ b for a, b in zip(w[i - 4], t)])
    return bytes(b for word in w for b in word)


def _inv_mix_word(word: int) -> int:
    b = [(word >> s) & 0xFF for s in (24, 16, 8, 0)]
    out = [
        _gmul(b[0], 14) ^ _gmul(b[1], 11) ^ _gmul(b[2], 13) ^ _gmul(b[3], 9),
        _gmul(b[0], 9) ^ _gmul(b[1], 14) ^ _gmul(b[2], 11) ^ _gmul(b[3], 13),
        _gmul(b[0], 13) ^ _gmul(b[1], 9) ^ _gmul(b[2], 14) ^ _gmul(b[3], 11),
        _gmul(b[0], 11) ^ _gmul(b[1], 13) ^ _gmul(b[2], 9) ^ _gmul(b[3], 14),
    ]
    return (out[0] << 24) | (out[1] << 16) | (out[2] << 8) | out[3]


@dataclass(frozen=True)
class AesKey:
    """An AES-128 key and its expanded schedule."""

    key_bytes: bytes
    round_keys: bytes = field(init=False, repr=False)
    _enc: np.ndarray = field(init=False, repr=False, compare=False)
    _dec: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        key = bytes(self.key_bytes)
        rk = expand_key(key)
        enc = np.frombuffer(rk, dtype=">u4").astype(np.uint32).reshape(ROUNDS + 1, 4)
        # equivalent inverse cipher schedule
        dec = enc[::-1].copy()
        for r in range(1, ROUNDS):
            dec[r] = [_inv_mix_word(int(x)) for x in dec[r]]
        object.__setattr__(self, "key_bytes", key)
        object.__setattr__(self, "round_keys", rk)
        object.__setattr__(self, "_enc", enc)
        object.__setattr__(self, "_dec", dec)

    @classmethod
    def from_hex(cls, text: str) -> "AesKey":
        return cls(bytes.fromhex(text))


def _as_key(key: AesKey | bytes) -> AesKey:
    return key if isinstance(key, AesKey) else AesKey(bytes(key))


def _check_length(data: bytes) -> None:
    if len(data) == 0 or len(data) % BLOCK_SIZE:
        raise BadLength(f"length {len(data)} is not a positive multiple of {BLOCK_SIZE}")


def _rounds(state: np.ndarray, rk: np.ndarray, tables, box, order) -> np.ndarray:
    t0, t1, t2, t3 = tables
    ff = np.uint32(0xFF)
    s = [state[:, c] ^ rk[0, c] for c in range(4)]
    for r in range(1, ROUNDS):
        s = [
            t0[s[c] >> 24]
            ^ t1[(s[order[0][c]] >> 16) & ff]
            ^ t2[(s[order[1][c]] >> 8) & ff]
            ^ t3[s[order[2][c]] & ff]
            ^ rk[r, c]
            for c in range(4)
        ]
    out = np.empty_like(state)
    for c in range(4):
        out[:, c] = (
            (box[s[c] >> 24] << 24)
            ^ (box[(s[order[0][c]] >> 16) & ff] << 16)
            ^ (box[(s[order[1][c]] >> 8) & ff] << 8)
            ^ box[s[order[2][c]] & ff]
            ^ rk[ROUNDS, c]
        )
    return out


# column sources for bytes 1..3 after (Inv)ShiftRows
_ENC_ORDER = tuple(tuple((c + k) % 4 for c in range(4)) for k in (1, 2, 3))
_DEC_ORDER = tuple(tuple((c - k) % 4 for c in range(4)) for k in (1, 2, 3))


# blocks per vectorised pass; keeps the working set cache-sized
_CHUNK_BLOCKS = 1 << 14


def _crypt_blocks(key: AesKey, data: bytes, direction: Direction) -> bytes:
    state = np.frombuffer(data, dtype=">u4").astype(np.uint32).reshape(-1, 4)
    if direction is Direction.ENCRYPT:
        args = (key._enc, _TE, SBOX, _ENC_ORDER)
    else:
        args = (key._dec, _TD, INV_SBOX, _DEC_ORDER)
    out = np.empty(state.shape, dtype=">u4")
    for i in range(0, len(state), _CHUNK_BLOCKS):
        out[i:i + _CHUNK_BLOCKS] = _rounds(state[i:i + _CHUNK_BLOCKS], *args)
    return out.tobytes()


def aes128_ecb_encrypt(key: AesKey | bytes, plaintext: bytes) -> bytes:
    """Encrypt each 16-byte block of ``plaintext`` independently."""
    _check_length(plaintext)
    return _crypt_blocks(_as_key(key), bytes(plaintext), Direction.ENCRYPT)


def aes128_ecb_decrypt(key: AesKey | bytes, ciphertext: bytes) -> bytes:
    _check_length(ciphertext)
    return _crypt_blocks(_as_key(key), bytes(ciphertext), Direction.DECRYPT)


@dataclass(frozen=True)
class EcbJob:
    direction: Direction
    key: AesKey
    data: bytes

    def __post_init__(self) -> None:
        object.__setattr__(self, "direction", Direction(self.direction))
        object.__setattr__(self, "key", _as_key(self.key))


def cpu_reference(job: EcbJob) -> bytes:
    """Host-CPU execution of an ECB job in a single pass over all blocks."""
    _check_length(job.data)
    return _crypt_blocks(job.key, bytes(job.data), job.direction)


def cpu_cost_us(length: int, cpu_bytes_per_us: float) -> float:
    """Simulated host time for ``length`` bytes of AES."""
    return length / cpu_bytes_per_us


def lane_waves(data: bytes, lanes: int, granularity: int = BLOCK_SIZE) -> Iterator[slice]:
    """Yield byte slices of ``data``, one per wave of ``lanes`` work units."""
    step = lanes * granularity
    for start in range(0, len(data), step):
        yield slice(start, min(start + step, len(data)))


_PASS_BLOCKS = 1 << 16


def device_handler(direction: Direction, key: AesKey | bytes) -> Callable[[bytes, int], bytes]:
    """Build the device-side AES handler bound to ``key``.

    Each lane owns one 16-byte block per wave; waves run back to back.
    """
    key = _as_key(key)
    direction = Direction(direction)

    def handler(data: bytes, lanes: int) -> bytes:
        _check_length(data)
        data = bytes(data)
        # waves are independent under ECB, so whole groups of them share one
        # vectorised pass; the wave count only matters to the cost model
        per_pass = lanes * max(1, _PASS_BLOCKS // lanes)
        return b"".join(_crypt_blocks(key, data[sl], direction)
                        for sl in lane_waves(data, per_pass))

    return handler


def echo(data: bytes, lanes: int = 1) -> bytes:
    return bytes(data)


# -- known-answer vector files ------------------------------------------------

@dataclass(frozen=True)
class TestVector:
    direction: Direction
    key: bytes
    plaintext: bytes
    ciphertext: bytes

    __test__ = False  # not a pytest class

    def run(self) -> bool:
        key = AesKey(self.key)
        if self.direction is Direction.ENCRYPT:
            return aes128_ecb_encrypt(key, self.plaintext) == self.ciphertext
        return aes128_ecb_decrypt(key, self.ciphertext) == self.plaintext


def parse_test_vectors(lines: Iterable[str]) -> list[TestVector]:
    """Parse ``direction key plaintext ciphertext`` hex lines.

    Blank lines and ``#`` comments are skipped.
    """
    vectors = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValueError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        direction, key, pt, ct = parts
        vectors.append(
            TestVector(Direction(direction), bytes.fromhex(key), bytes.fromhex(pt), bytes.fromhex(ct))
        )
    return vectors


def load_test_vectors(path) -> list[TestVector]:
    with open(path) as fh:
        return parse_test_vectors(fh)


def format_test_vector(vec: TestVector) -> str:
    return f"{vec.direction.value} {vec.key.hex()} {vec.plaintext.hex()} {vec.ciphertext.hex()}"
