"""
CRC-framed little-endian containers used by the bank (OTBK), matrix (OTML)
and checkpoint (OTNN) file formats.

Every file is `payload + crc32(payload)` where the CRC is a trailing u32.
"""
import json
import struct
import zlib
from pathlib import Path
from typing import Any, Dict, List, Tuple

import numpy as np

from .errors import ChecksumError, FormatError, TruncatedFileError, VersionMismatchError

CRC_SIZE = 4


def write_framed(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(payload)
        f.write(struct.pack("<I", crc))
    tmp_path.replace(path)


def read_framed(path: Path, magic: bytes, expected_size: int = None) -> bytes:
    """
    Returns the payload (magic included) after magic, size and CRC checks.

    `expected_size` is the payload size implied by the header; when given, a
    shorter file raises TruncatedFileError before the CRC is consulted.
    """
    data = Path(path).read_bytes()
    if len(data) < len(magic) or data[:len(magic)] != magic:
        raise FormatError(f"{path}: bad magic, expected {magic!r}")
    return check_framed(data, path, expected_size)


def check_framed(data: bytes, path, expected_size: int = None) -> bytes:
    if expected_size is not None and len(data) < expected_size + CRC_SIZE:
        raise TruncatedFileError(
            f"{path}: file is {len(data)} bytes, header implies {expected_size + CRC_SIZE}")
    if len(data) < CRC_SIZE:
        raise TruncatedFileError(f"{path}: file too short for a checksum")
    payload, stored = data[:-CRC_SIZE], struct.unpack("<I", data[-CRC_SIZE:])[0]
    if expected_size is not None and len(payload) != expected_size:
        raise FormatError(f"{path}: {len(payload) - expected_size} unexpected trailing bytes")
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != stored:
        raise ChecksumError(f"{path}: CRC32 mismatch (stored {stored:08x}, computed {actual:08x})")
    return payload


def unpack_header(data: bytes, fmt: str, path) -> tuple:
    size = struct.calcsize(fmt)
    if len(data) < size:
        raise TruncatedFileError(f"{path}: file ends inside the header")
    return struct.unpack(fmt, data[:size])


# ──────────────────────────────────────────────
# Tensor containers (OTNN)
# ──────────────────────────────────────────────

TENSOR_MAGIC = b"OTNN"
TENSOR_FORMAT_VERSION = 1
_TENSOR_HEADER_FMT = "<4sII"


def write_tensor_file(path: Path, meta: Dict[str, Any], arrays: List[Tuple[str, np.ndarray]]) -> None:
    """
    magic, u32 version, u32 JSON length, JSON block (meta + tensor index),
    then each array as row-major little-endian float32, then CRC32.
    """
    index = [{"name": name, "shape": list(np.shape(arr))} for name, arr in arrays]
    block = json.dumps({"meta": meta, "tensors": index}, sort_keys=True).encode("utf-8")
    parts = [struct.pack(_TENSOR_HEADER_FMT, TENSOR_MAGIC, TENSOR_FORMAT_VERSION, len(block)), block]
    parts += [np.ascontiguousarray(arr, dtype="<f4").tobytes() for _, arr in arrays]
    write_framed(path, b"".join(parts))


def read_tensor_file(path: Path) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise FormatError(f"{path}: bad magic, expected {TENSOR_MAGIC!r}")
    _, version, block_len = unpack_header(data, _TENSOR_HEADER_FMT, path)
    if version != TENSOR_FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: tensor format version {version}, expected {TENSOR_FORMAT_VERSION}")
    offset = struct.calcsize(_TENSOR_HEADER_FMT)
    if len(data) < offset + block_len:
        raise TruncatedFileError(f"{path}: file ends inside the topology block")
    try:
        header = json.loads(data[offset:offset + block_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        # a damaged block is reported through the checksum when the CRC disagrees
        check_framed(data, path)
        raise FormatError(f"{path}: unreadable topology block")
    sizes = [int(np.prod(t["shape"], dtype=np.int64)) * 4 for t in header["tensors"]]
    payload = check_framed(data, path, offset + block_len + sum(sizes))

    arrays = {}
    pos = offset + block_len
    for tensor, size in zip(header["tensors"], sizes):
        arr = np.frombuffer(payload[pos:pos + size], dtype="<f4").reshape(tensor["shape"])
        arrays[tensor["name"]] = arr.astype(np.float32)
        pos += size
    return header["meta"], arrays
