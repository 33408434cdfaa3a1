import numpy as np
import pytest

from tokenloom import checkpoint
from tokenloom.errors import (
    ChecksumError,
    SectionMissingError,
    TruncatedFileError,
    VersionError,
)


@pytest.fixture
def tensors(rng):
    return {
        "lm.embed": rng.standard_normal((11, 4)).astype(np.float32),
        "lm.head.bias": rng.standard_normal(11).astype(np.float32),
        "vq.codebook": rng.standard_normal((7, 3)).astype(np.float32),
    }


class TestRoundTrip:
    def test_bitwise_identical(self, tmp_path, tensors):
        path = tmp_path / "model.ckpt"
        checkpoint.save(path, {"stage": "test"}, tensors)
        header, back = checkpoint.load(path)
        assert header["stage"] == "test"
        assert header["format_version"] == checkpoint.FORMAT_VERSION
        assert set(back) == set(tensors)
        for name in tensors:
            assert back[name].dtype == np.float32
            assert np.array_equal(back[name], tensors[name])
            assert back[name].tobytes() == tensors[name].tobytes()

    def test_save_is_deterministic(self, tmp_path, tensors):
        checkpoint.save(tmp_path / "a.ckpt", {"x": 1}, tensors)
        checkpoint.save(tmp_path / "b.ckpt", {"x": 1}, tensors)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_loaded_tensors_are_writable(self, tmp_path, tensors):
        checkpoint.save(tmp_path / "a.ckpt", {}, tensors)
        _, back = checkpoint.load(tmp_path / "a.ckpt")
        back["lm.embed"][0, 0] = 42.0  # must not raise


class TestCorruption:
    def test_flipped_payload_byte_fails_checksum(self, tmp_path, tensors):
        path = tmp_path / "model.ckpt"
        checkpoint.save(path, {}, tensors)
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0xFF  # inside the last section's payload
        path.write_bytes(bytes(raw))
        with pytest.raises(ChecksumError):
            checkpoint.load(path)

    def test_truncated_file(self, tmp_path, tensors):
        path = tmp_path / "model.ckpt"
        checkpoint.save(path, {}, tensors)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) - 10])
        with pytest.raises(TruncatedFileError):
            checkpoint.load(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "model.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(VersionError):
            checkpoint.load(path)

    def test_wrong_version(self, tmp_path, tensors):
        path = tmp_path / "model.ckpt"
        checkpoint.save(path, {}, tensors)
        raw = bytearray(path.read_bytes())
        raw[4] = 99  # version field (little-endian u32 after magic)
        path.write_bytes(bytes(raw))
        with pytest.raises(VersionError):
            checkpoint.load(path)


class TestSections:
    def test_missing_section_named(self, tmp_path, tensors):
        vq_only = {k: v for k, v in tensors.items() if k.startswith("vq.")}
        path = tmp_path / "vq.ckpt"
        checkpoint.save(path, {}, vq_only)
        _, back = checkpoint.load(path)
        with pytest.raises(SectionMissingError) as err:
            checkpoint.require_sections(back, "lm.", str(path))
        assert err.value.section == "lm."

    def test_require_section_passes_through(self, tmp_path, tensors):
        checkpoint.save(tmp_path / "x.ckpt", {}, tensors)
        _, back = checkpoint.load(tmp_path / "x.ckpt")
        arr = checkpoint.require_section(back, "vq.codebook")
        assert np.array_equal(arr, tensors["vq.codebook"])
