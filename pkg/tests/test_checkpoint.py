"""Tests for the named-tensor archive."""
from unittest.mock import patch

import pytest
import torch

from nightreid.checkpoint import is_archive, load_state_file, read_archive, write_archive
from nightreid.errors import CheckpointIntegrityError, IncompatibleCheckpointError

TEST_HEADER = {"step": 12, "note": "test"}


@pytest.fixture
def tensors(generator):
    """Return a few named tensors."""
    return {
        "embed.cls_token": torch.randn(1, 1, 8, generator=generator),
        "shared.blocks.0.norm1.weight": torch.rand(8, generator=generator),
        "optimizer/embed.cls_token/momentum_buffer": torch.randn(1, 1, 8, generator=generator),
    }


def test_round_trip(tmp_path, tensors):
    """Test tensors and header survive bit-exactly."""
    path = tmp_path / "ckpt.bin"
    write_archive(path, TEST_HEADER, tensors)
    archive = read_archive(path)

    assert archive.header["step"] == 12
    assert archive.header["note"] == "test"
    assert set(archive.tensors) == set(tensors)
    for name, tensor in tensors.items():
        assert torch.equal(archive.tensors[name], tensor)
    assert is_archive(path)
    assert not list(tmp_path.glob("*.tmp"))


def test_select(tmp_path, tensors):
    """Test selective reads skip unwanted entries."""
    path = tmp_path / "ckpt.bin"
    write_archive(path, TEST_HEADER, tensors)
    archive = read_archive(path, select=lambda name: name.startswith("shared."))

    assert list(archive.tensors) == ["shared.blocks.0.norm1.weight"]


def test_corrupt_payload(tmp_path, tensors):
    """Test a flipped payload byte is detected."""
    path = tmp_path / "ckpt.bin"
    write_archive(path, TEST_HEADER, tensors)
    data = bytearray(path.read_bytes())
    data[-3] ^= 0xFF
    path.write_bytes(bytes(data))

    with pytest.raises(CheckpointIntegrityError):
        read_archive(path)


def test_truncated(tmp_path, tensors):
    """Test a truncated file is detected."""
    path = tmp_path / "ckpt.bin"
    write_archive(path, TEST_HEADER, tensors)
    path.write_bytes(path.read_bytes()[:-10])

    with pytest.raises(CheckpointIntegrityError):
        read_archive(path)


def test_version_mismatch(tmp_path, tensors):
    """Test archives from another format version are refused."""
    path = tmp_path / "ckpt.bin"
    with patch("nightreid.checkpoint.CHECKPOINT_FORMAT_VERSION", 99):
        write_archive(path, TEST_HEADER, tensors)

    with pytest.raises(IncompatibleCheckpointError):
        read_archive(path)


def test_not_an_archive(tmp_path):
    """Test foreign files are refused."""
    path = tmp_path / "x.bin"
    path.write_bytes(b"hello world, not a checkpoint")

    with pytest.raises(CheckpointIntegrityError):
        read_archive(path)


def test_load_state_file(tmp_path, tensors):
    """Test state files load from archives and from torch.save dicts."""
    archive = tmp_path / "a.bin"
    write_archive(archive, TEST_HEADER, tensors)
    assert set(load_state_file(archive)) == {"embed.cls_token", "shared.blocks.0.norm1.weight"}

    saved = tmp_path / "vit.pth"
    torch.save({"state_dict": {"cls_token": torch.zeros(1, 1, 8)}, "epoch": 3}, saved)
    state = load_state_file(saved)
    assert list(state) == ["cls_token"]
