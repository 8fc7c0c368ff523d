"""
Flat binary parameter checkpoints

Layout (little-endian):
    b"DVC3CKPT" | version u16 |
    repeated: name_len u16 | utf-8 name | rank u8 | dims u32 * rank | float32 * prod(dims)
"""

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np
import torch

from core.errors import FormatError

MAGIC = b"DVC3CKPT"
VERSION = 1


def encode_checkpoint(tensors: Mapping[str, torch.Tensor]) -> bytes:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for name, tensor in tensors.items():
        raw_name = name.encode("utf-8")
        values = tensor.detach().cpu().to(torch.float32).contiguous().numpy()
        chunks.append(struct.pack("<H", len(raw_name)))
        chunks.append(raw_name)
        chunks.append(struct.pack("<B", values.ndim))
        chunks.append(struct.pack(f"<{values.ndim}I", *values.shape))
        chunks.append(values.astype("<f4").tobytes())
    return b"".join(chunks)


def decode_checkpoint(blob: bytes) -> "OrderedDict[str, torch.Tensor]":
    if blob[:len(MAGIC)] != MAGIC:
        raise FormatError("not a DVC3 checkpoint (bad magic)")
    offset = len(MAGIC)
    try:
        (version,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        if version != VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")

        tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        while offset < len(blob):
            (name_len,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset:offset + name_len].decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            end = offset + 4 * count
            if end > len(blob):
                raise FormatError(f"checkpoint truncated inside '{name}'")
            values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
            tensors[name] = torch.from_numpy(values.reshape(dims).astype(np.float32))
            offset = end
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"corrupt checkpoint: {e}") from e
    return tensors


def save_checkpoint(path: Union[str, Path], tensors: Mapping[str, torch.Tensor]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(tensors))
    return path


def load_checkpoint(path: Union[str, Path]) -> "OrderedDict[str, torch.Tensor]":
    return decode_checkpoint(Path(path).read_bytes())


def module_tensors(module: torch.nn.Module, prefix: str = "") -> Dict[str, torch.Tensor]:
    """Named parameters and buffers of a module, ready for save_checkpoint"""
    return OrderedDict((prefix + name, t) for name, t in module.state_dict().items())


def load_into_module(module: torch.nn.Module, tensors: Mapping[str, torch.Tensor], prefix: str = "") -> None:
    """Copy the prefixed entries of a decoded checkpoint into a module (strict)"""
    state = OrderedDict(
        (name[len(prefix):], t) for name, t in tensors.items() if name.startswith(prefix)
    )
    expected = module.state_dict()
    for name, tensor in state.items():
        if name in expected and expected[name].shape != tensor.shape:
            raise FormatError(f"checkpoint shape mismatch for '{name}': {tuple(tensor.shape)} "
                              f"vs model {tuple(expected[name].shape)}")
    missing = set(expected) - set(state)
    if missing:
        raise FormatError(f"checkpoint is missing {len(missing)} tensors, e.g. '{sorted(missing)[0]}'")
    module.load_state_dict({k: v.to(expected[k].dtype) for k, v in state.items() if k in expected})
