import numpy as np
import pytest

from app.errors import CheckpointError, DataIOError
from app.services.checkpoint import (
    HEADER,
    Checkpoint,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    save_checkpoint,
)

DIGEST = bytes(range(32))


def sample() -> Checkpoint:
    ckpt = Checkpoint(digest=DIGEST, step=42)
    ckpt.tensors["encoder.patch_embed.weight"] = np.arange(12, dtype=np.float32).reshape(3, 4)
    ckpt.tensors["adam.step"] = np.array([7], dtype=np.int64)
    ckpt.tensors["scalar"] = np.array(2.5, dtype=np.float64)
    ckpt.put_json("rng", {"state": 1, "name": "PCG64"})
    return ckpt


def test_load_save_is_byte_identical(tmp_path):
    path = save_checkpoint(sample(), tmp_path / "a.lmim")
    loaded = load_checkpoint(path)
    assert encode_checkpoint(loaded) == path.read_bytes()
    assert loaded.step == 42 and loaded.digest == DIGEST
    assert list(loaded.tensors) == list(sample().tensors)
    assert loaded.tensors["encoder.patch_embed.weight"].dtype == np.float32
    assert loaded.tensors["scalar"].shape == ()
    assert loaded.json("rng") == {"state": 1, "name": "PCG64"}


def test_header_layout():
    data = encode_checkpoint(sample())
    magic, version, _, digest, step, count = HEADER.unpack_from(data, 0)
    assert (magic, version, digest, step, count) == (b"LMIM", 1, DIGEST, 42, 4)


@pytest.mark.parametrize("corrupt", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:4] + b"\x09\x00" + d[6:],
    lambda d: d[:-1] + bytes([d[-1] ^ 0xFF]),
    lambda d: d[:HEADER.size + 3] + bytes([d[HEADER.size + 3] ^ 0x01]) + d[HEADER.size + 4:],
    lambda d: d[:10],
])
def test_corruption_is_detected(corrupt):
    with pytest.raises(CheckpointError):
        decode_checkpoint(corrupt(encode_checkpoint(sample())))


def test_bad_digest_and_dtype():
    with pytest.raises(CheckpointError):
        encode_checkpoint(Checkpoint(digest=b"short", step=0))
    ckpt = Checkpoint(digest=DIGEST, step=0)
    ckpt.tensors["c"] = np.zeros(2, dtype=np.complex64)
    with pytest.raises(CheckpointError):
        encode_checkpoint(ckpt)


def test_missing_file_and_unwritable_target(tmp_path):
    with pytest.raises(CheckpointError) as info:
        load_checkpoint(tmp_path / "nope.lmim")
    assert info.value.exit_code == 4
    with pytest.raises(DataIOError):
        save_checkpoint(sample(), tmp_path / "missing-dir" / "a.lmim")


def test_text_entries():
    ckpt = sample()
    ckpt.put_text("config", "mask_ratio = 0.9\n")
    assert decode_checkpoint(encode_checkpoint(ckpt)).text("config") == "mask_ratio = 0.9\n"
    with pytest.raises(CheckpointError):
        ckpt.text("absent")
