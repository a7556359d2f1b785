"""Checkpoint container: bit-exact round trip of parameters, optimizer
moments, RNG streams, and the iteration counter.

File layout (integers little-endian):

    magic, 8 bytes: "MOELAB01"
    dtype code, u8: 0 = float32, 1 = float64
    config length, u32; canonical config document, UTF-8
    config digest, 32 bytes: sha256 of the config document
    iteration, u64
    numpy RNG flag, u8; if 1: PCG64 state u128, inc u128, has_uint32 u32,
        uinteger u32
    torch RNG length, u32; torch RNG state bytes
    parameter count, u32; per parameter: name (u16 length + UTF-8), ndim u8,
        dims u32 each, raw tensor data in the file dtype
    optimizer flag, u8; if 1: entry count u32; per entry: parameter name
        (u16 + UTF-8), step u64, exp_avg raw data, exp_avg_sq raw data
        (shapes match the named parameter)
    trailer: sha256 of every preceding byte

Tensors are stored in model.named_parameters() order. The trailing digest
detects truncation and corruption. float64 runs store 64-bit values so that
save/load/resume reproduces the run exactly; everything else uses 32-bit.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import Experiment, parse_config, serialize_config
from .errors import DataError

CHECKPOINT_MAGIC = b"MOELAB01"
_DTYPE_CODES = {torch.float32: 0, torch.float64: 1}
_CODE_DTYPES = {0: torch.float32, 1: torch.float64}
_NP_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class OptimizerEntry:
    step: int
    exp_avg: torch.Tensor
    exp_avg_sq: torch.Tensor


@dataclass
class Checkpoint:
    experiment: Experiment
    dtype: torch.dtype
    iteration: int
    parameters: dict[str, torch.Tensor]
    optimizer: dict[str, OptimizerEntry] | None
    numpy_rng_state: dict | None
    torch_rng_state: bytes | None


def _pack_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _tensor_bytes(tensor: torch.Tensor, np_dtype: np.dtype) -> bytes:
    return np.ascontiguousarray(tensor.detach().cpu().numpy(), dtype=np_dtype).tobytes()


def save_checkpoint(path: str | Path, experiment: Experiment,
                    named_parameters: list[tuple[str, torch.Tensor]],
                    iteration: int,
                    optimizer_state: dict[str, OptimizerEntry] | None = None,
                    numpy_rng_state: dict | None = None,
                    torch_rng_state: bytes | None = None) -> None:
    dtype = named_parameters[0][1].dtype
    if dtype not in _DTYPE_CODES:
        raise DataError(f"unsupported checkpoint dtype {dtype}")
    code = _DTYPE_CODES[dtype]
    np_dtype = _NP_DTYPES[code]

    out = bytearray()
    out += CHECKPOINT_MAGIC
    out += struct.pack("<B", code)
    config_text = serialize_config(experiment).encode("utf-8")
    out += struct.pack("<I", len(config_text)) + config_text
    out += hashlib.sha256(config_text).digest()
    out += struct.pack("<Q", iteration)

    if numpy_rng_state is not None:
        inner = numpy_rng_state["state"]
        out += struct.pack("<B", 1)
        out += int(inner["state"]).to_bytes(16, "little")
        out += int(inner["inc"]).to_bytes(16, "little")
        out += struct.pack("<II", int(numpy_rng_state.get("has_uint32", 0)),
                           int(numpy_rng_state.get("uinteger", 0)))
    else:
        out += struct.pack("<B", 0)
    torch_state = torch_rng_state or b""
    out += struct.pack("<I", len(torch_state)) + torch_state

    out += struct.pack("<I", len(named_parameters))
    for name, tensor in named_parameters:
        out += _pack_name(name)
        out += struct.pack("<B", tensor.dim())
        out += struct.pack(f"<{tensor.dim()}I", *tensor.shape)
        out += _tensor_bytes(tensor, np_dtype)

    if optimizer_state is not None:
        out += struct.pack("<B", 1)
        out += struct.pack("<I", len(optimizer_state))
        for name, entry in optimizer_state.items():
            out += _pack_name(name)
            out += struct.pack("<Q", entry.step)
            out += _tensor_bytes(entry.exp_avg, np_dtype)
            out += _tensor_bytes(entry.exp_avg_sq, np_dtype)
    else:
        out += struct.pack("<B", 0)

    out += hashlib.sha256(bytes(out)).digest()
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(f"{self.path}: truncated checkpoint")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 40 + 32:
        raise DataError(f"{path}: truncated checkpoint")
    body, trailer = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise DataError(f"{path}: checkpoint digest mismatch")

    r = _Reader(body, path)
    if r.take(8) != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    (code,) = r.unpack("<B")
    if code not in _CODE_DTYPES:
        raise DataError(f"{path}: unknown dtype code {code}")
    dtype, np_dtype = _CODE_DTYPES[code], _NP_DTYPES[code]
    (config_len,) = r.unpack("<I")
    config_text = r.take(config_len).decode("utf-8")
    digest = r.take(32)
    if hashlib.sha256(config_text.encode("utf-8")).digest() != digest:
        raise DataError(f"{path}: config digest mismatch")
    experiment = parse_config(config_text)
    (iteration,) = r.unpack("<Q")

    (has_np_rng,) = r.unpack("<B")
    numpy_rng_state = None
    if has_np_rng:
        state = int.from_bytes(r.take(16), "little")
        inc = int.from_bytes(r.take(16), "little")
        has_uint32, uinteger = r.unpack("<II")
        numpy_rng_state = {"bit_generator": "PCG64",
                           "state": {"state": state, "inc": inc},
                           "has_uint32": has_uint32, "uinteger": uinteger}
    (torch_len,) = r.unpack("<I")
    torch_rng_state = r.take(torch_len) or None

    (n_params,) = r.unpack("<I")
    parameters: dict[str, torch.Tensor] = {}
    shapes: dict[str, tuple[int, ...]] = {}
    for _ in range(n_params):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(count * np_dtype.itemsize), dtype=np_dtype)
        parameters[name] = torch.from_numpy(data.copy()).reshape(shape).to(dtype)
        shapes[name] = shape

    (has_opt,) = r.unpack("<B")
    optimizer = None
    if has_opt:
        optimizer = {}
        (n_entries,) = r.unpack("<I")
        for _ in range(n_entries):
            (name_len,) = r.unpack("<H")
            name = r.take(name_len).decode("utf-8")
            if name not in shapes:
                raise DataError(f"{path}: optimizer entry for unknown parameter {name!r}")
            (step,) = r.unpack("<Q")
            shape = shapes[name]
            count = int(np.prod(shape)) if shape else 1
            moments = []
            for _ in range(2):
                data = np.frombuffer(r.take(count * np_dtype.itemsize), dtype=np_dtype)
                moments.append(torch.from_numpy(data.copy()).reshape(shape).to(dtype))
            optimizer[name] = OptimizerEntry(step, moments[0], moments[1])

    if r.pos != len(body):
        raise DataError(f"{path}: {len(body) - r.pos} trailing bytes in checkpoint")
    return Checkpoint(experiment=experiment, dtype=dtype, iteration=iteration,
                      parameters=parameters, optimizer=optimizer,
                      numpy_rng_state=numpy_rng_state,
                      torch_rng_state=torch_rng_state)
