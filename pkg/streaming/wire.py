"""
Token wire format for client-server deployment
Layout: b"DVC3WIRE" | version u8 | vocab u16 | token_rate_hz u16 | one byte per token (code - 1)
"""

import struct
from dataclasses import dataclass

import numpy as np

from core.errors import FormatError, VocabularyError

WIRE_MAGIC = b"DVC3WIRE"
WIRE_VERSION = 1
HEADER = struct.Struct("<BHH")
BITS_PER_TOKEN = 8
PCM_BITS = 16


@dataclass(frozen=True)
class TokenWire:
    vocab: int
    token_rate_hz: int
    payload: bytes

    def to_bytes(self) -> bytes:
        return WIRE_MAGIC + HEADER.pack(WIRE_VERSION, self.vocab, self.token_rate_hz) + self.payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "TokenWire":
        if blob[:len(WIRE_MAGIC)] != WIRE_MAGIC:
            raise FormatError("not a DVC3WIRE token stream")
        try:
            version, vocab, rate = HEADER.unpack_from(blob, len(WIRE_MAGIC))
        except struct.error as e:
            raise FormatError(f"truncated wire header: {e}") from e
        if version != WIRE_VERSION:
            raise FormatError(f"unsupported wire version {version}")
        return cls(vocab, rate, blob[len(WIRE_MAGIC) + HEADER.size:])


def wire_encode(codes: np.ndarray, vocab: int, rate_hz: int = 50) -> bytes:
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if not 1 <= vocab <= 256:
        raise VocabularyError(f"wire format carries at most 256 codes, vocab is {vocab}")
    if codes.size and (codes.min() < 1 or codes.max() > vocab):
        raise VocabularyError(f"codes must lie in 1..{vocab}")
    payload = (codes - 1).astype(np.uint8).tobytes()
    return TokenWire(vocab, rate_hz, payload).to_bytes()


def wire_decode(blob: bytes) -> np.ndarray:
    wire = TokenWire.from_bytes(blob)
    codes = np.frombuffer(wire.payload, dtype=np.uint8).astype(np.int64) + 1
    if codes.size and codes.max() > wire.vocab:
        raise FormatError(f"payload holds code {codes.max()} beyond vocab {wire.vocab}")
    return codes


def bitrate_bps(rate_hz: int) -> int:
    return rate_hz * BITS_PER_TOKEN


def compression_ratio(rate_hz: int, sample_rate: int = 16000) -> float:
    """PCM bitrate over token bitrate"""
    return sample_rate * PCM_BITS / bitrate_bps(rate_hz)
