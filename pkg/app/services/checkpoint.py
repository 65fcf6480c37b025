"""Little-endian binary checkpoint container.

Layout::

    header   magic "LMIM" | version u16 | reserved u16 | config digest (32 bytes) | step u64 | count u32
    body     count x ( name_len u16 | name utf-8 | dtype tag (4 bytes) | ndim u8 | shape u64 x ndim | payload )
    trailer  64-bit BLAKE2b checksum of the body

Tensors keep their insertion order, so decode -> encode reproduces the
file byte for byte.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from app.errors import CheckpointError, DataIOError

logger = logging.getLogger(__name__)

MAGIC = b"LMIM"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sHH32sQI")
TRAILER = struct.Struct("<Q")
DTYPE_TAGS: Dict[bytes, np.dtype] = {
    b"f32\0": np.dtype("<f4"),
    b"f64\0": np.dtype("<f8"),
    b"i64\0": np.dtype("<i8"),
    b"u64\0": np.dtype("<u8"),
    b"u8\0\0": np.dtype("u1"),
}
TAG_OF = {dtype: tag for tag, dtype in DTYPE_TAGS.items()}


@dataclass
class Checkpoint:
    """Header fields plus ordered named tensors."""

    digest: bytes
    step: int
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def text(self, name: str) -> str:
        """Decode a u8 tensor written by :meth:`put_text`."""
        if name not in self.tensors:
            raise CheckpointError(f"checkpoint has no '{name}' entry")
        return self.tensors[name].tobytes().decode("utf-8")

    def put_text(self, name: str, text: str) -> None:
        self.tensors[name] = np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()

    def put_json(self, name: str, value) -> None:
        self.put_text(name, json.dumps(value, sort_keys=True))

    def json(self, name: str):
        return json.loads(self.text(name))


def _checksum(body: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(body, digest_size=8).digest(), "little")


def _tag(arr: np.ndarray) -> bytes:
    for tag, known in DTYPE_TAGS.items():
        if known.kind == arr.dtype.kind and known.itemsize == arr.dtype.itemsize:
            return tag
    raise CheckpointError(f"unsupported checkpoint dtype {arr.dtype}")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serialise a checkpoint to bytes.

    Raises:
        CheckpointError: On a bad digest length, over-long names or unsupported dtypes.
    """
    if len(ckpt.digest) != 32:
        raise CheckpointError(f"config digest must be 32 bytes, got {len(ckpt.digest)}")
    body = bytearray()
    for name, arr in ckpt.tensors.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        tag = _tag(arr)
        data = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag])
        body += struct.pack("<H", len(encoded)) + encoded + tag
        body += struct.pack(f"<B{data.ndim}Q", data.ndim, *data.shape)
        body += data.tobytes()
    header = HEADER.pack(MAGIC, ckpt.version, 0, ckpt.digest, ckpt.step, len(ckpt.tensors))
    return header + bytes(body) + TRAILER.pack(_checksum(bytes(body)))


def decode_checkpoint(data: bytes) -> Checkpoint:
    """Parse checkpoint bytes, validating magic, version and checksum.

    Raises:
        CheckpointError: If the container is malformed or corrupt.
    """
    if len(data) < HEADER.size + TRAILER.size:
        raise CheckpointError("checkpoint is truncated")
    magic, version, _, digest, step, count = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    body = data[HEADER.size:len(data) - TRAILER.size]
    (stored,) = TRAILER.unpack_from(data, len(data) - TRAILER.size)
    if stored != _checksum(body):
        raise CheckpointError("checkpoint checksum mismatch")

    tensors: Dict[str, np.ndarray] = {}
    offset = 0
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", body, offset)
            offset += 2
            name = body[offset:offset + name_len].decode("utf-8")
            offset += name_len
            tag = body[offset:offset + 4]
            offset += 4
            if tag not in DTYPE_TAGS:
                raise CheckpointError(f"unknown dtype tag {tag!r} for '{name}'")
            (ndim,) = struct.unpack_from("<B", body, offset)
            offset += 1
            shape = struct.unpack_from(f"<{ndim}Q", body, offset)
            offset += 8 * ndim
            dtype = DTYPE_TAGS[tag]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
            if offset + nbytes > len(body):
                raise CheckpointError(f"payload of '{name}' runs past the body")
            if name in tensors:
                raise CheckpointError(f"duplicate tensor name '{name}'")
            tensors[name] = np.frombuffer(body, dtype=dtype, count=nbytes // dtype.itemsize, offset=offset).reshape(shape).copy()
            offset += nbytes
    except struct.error as e:
        raise CheckpointError(f"malformed checkpoint body: {e}") from e
    if offset != len(body):
        raise CheckpointError("trailing bytes after the last tensor")
    return Checkpoint(digest=digest, step=step, tensors=tensors, version=version)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write a checkpoint file.

    Raises:
        DataIOError: If the file cannot be written.
    """
    path = Path(path)
    try:
        path.write_bytes(encode_checkpoint(ckpt))
    except OSError as e:
        raise DataIOError(f"cannot write checkpoint {path}: {e}") from e
    logger.info("saved checkpoint %s (step %d, %d tensors)", path, ckpt.step, len(ckpt.tensors))
    return path


def load_checkpoint(path) -> Checkpoint:
    """Read and validate a checkpoint file.

    Raises:
        CheckpointError: If the file is missing, corrupt or malformed.
    """
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    ckpt = decode_checkpoint(data)
    logger.debug("loaded checkpoint %s (step %d)", path, ckpt.step)
    return ckpt
