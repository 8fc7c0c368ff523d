"""
Code corpora for LM training
Layout: b"DVC3COD" | count u32 | repeated (length u32 | codes u16 * length)
"""

import struct
from pathlib import Path
from typing import List, Sequence, Union

import numpy as np

from core.errors import FormatError

CODE_MAGIC = b"DVC3COD"


def encode_code_corpus(sequences: Sequence[np.ndarray]) -> bytes:
    chunks = [CODE_MAGIC, struct.pack("<I", len(sequences))]
    for seq in sequences:
        codes = np.asarray(seq).astype("<u2")
        chunks.append(struct.pack("<I", codes.size))
        chunks.append(codes.tobytes())
    return b"".join(chunks)


def decode_code_corpus(blob: bytes) -> List[np.ndarray]:
    if blob[:len(CODE_MAGIC)] != CODE_MAGIC:
        raise FormatError("not a DVC3COD code corpus")
    offset = len(CODE_MAGIC)
    try:
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        sequences = []
        for _ in range(count):
            (length,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            if offset + 2 * length > len(blob):
                raise FormatError("code corpus truncated")
            sequences.append(np.frombuffer(blob, dtype="<u2", count=length, offset=offset).astype(np.int64))
            offset += 2 * length
    except struct.error as e:
        raise FormatError(f"corrupt code corpus: {e}") from e
    return sequences


def save_code_corpus(path: Union[str, Path], sequences: Sequence[np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_code_corpus(sequences))
    return path


def load_code_corpus(path: Union[str, Path]) -> List[np.ndarray]:
    return decode_code_corpus(Path(path).read_bytes())
