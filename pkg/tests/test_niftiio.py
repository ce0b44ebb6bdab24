import gzip
import struct

import numpy as np
import pytest

from cardioseg.niftiio import (
    DATA_OFFSET,
    HEADER_SIZE,
    NiftiFormatError,
    from_array,
    read_nifti,
    read_nifti_file,
    write_nifti,
    write_nifti_file,
)


def random_volume(rng, dtype):
    ndim = int(rng.integers(2, 5))
    shape = tuple(int(rng.integers(1, 7)) for _ in range(ndim))
    if dtype == np.uint8:
        data = rng.integers(0, 256, size=shape).astype(np.uint8)
    elif dtype == np.int16:
        data = rng.integers(-1000, 3000, size=shape).astype(np.int16)
    else:
        data = rng.normal(size=shape).astype(np.float32)
    spacing = tuple(float(rng.uniform(0.5, 3.0)) for _ in range(ndim))
    return from_array(data, spacing=spacing)


class TestLayout:
    def test_minimal_uint8_file(self):
        vol = from_array(np.full((1, 1, 1), 7, dtype=np.uint8))
        blob = write_nifti(vol)
        assert len(blob) == DATA_OFFSET + 1 == 353
        assert blob[DATA_OFFSET] == 7
        assert struct.unpack_from("<i", blob)[0] == HEADER_SIZE
        assert blob[344:348] == b"n+1\x00"

    def test_extension_flag_zeroed(self):
        blob = write_nifti(from_array(np.zeros((2, 2), dtype=np.uint8)))
        assert blob[HEADER_SIZE:DATA_OFFSET] == b"\x00" * 4

    def test_x_axis_is_fastest_on_disk(self):
        data = np.arange(6, dtype=np.uint8).reshape(1, 2, 3)  # (z, y, x)
        blob = write_nifti(from_array(data))
        assert blob[DATA_OFFSET:] == bytes([0, 1, 2, 3, 4, 5])
        # header dims are (rank, nx, ny, nz, ...)
        dims = struct.unpack_from("<8h", blob, 40)
        assert dims[:4] == (3, 3, 2, 1)


class TestRoundTrip:
    @pytest.mark.parametrize("dtype", [np.uint8, np.int16, np.float32])
    def test_exact_for_integers_close_for_float(self, dtype):
        rng = np.random.default_rng(1)
        vol = random_volume(rng, dtype)
        back = read_nifti(write_nifti(vol))
        if dtype == np.float32:
            np.testing.assert_allclose(back.voxels, vol.voxels, atol=1e-6)
        else:
            np.testing.assert_array_equal(back.raw, vol.raw)
        assert back.header.dim == vol.header.dim
        np.testing.assert_allclose(back.header.pixdim, vol.header.pixdim, atol=1e-6)

    def test_label_histogram_preserved(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 4, size=(4, 8, 8)).astype(np.uint8)
        back = read_nifti(write_nifti(from_array(labels)))
        np.testing.assert_array_equal(
            np.bincount(back.raw.ravel(), minlength=4),
            np.bincount(labels.ravel(), minlength=4),
        )

    def test_byteswapped_encoding_parses_identically(self):
        rng = np.random.default_rng(3)
        vol = random_volume(rng, np.int16)
        little = read_nifti(write_nifti(vol, byteorder="<"))
        big = read_nifti(write_nifti(vol, byteorder=">"))
        np.testing.assert_array_equal(little.raw, big.raw)
        assert little.header.dim == big.header.dim

    def test_gzip_oracle(self):
        vol = from_array(np.arange(24, dtype=np.int16).reshape(2, 3, 4))
        plain = write_nifti(vol, gz=False)
        packed = write_nifti(vol, gz=True)
        assert gzip.decompress(packed) == plain
        np.testing.assert_array_equal(read_nifti(packed).raw, vol.raw)

    def test_gz_autodetect_and_explicit(self):
        vol = from_array(np.ones((2, 2), dtype=np.uint8))
        packed = write_nifti(vol, gz=True)
        assert read_nifti(packed).raw.sum() == 4  # sniffed
        assert read_nifti(packed, gz=True).raw.sum() == 4
        with pytest.raises(NiftiFormatError):
            read_nifti(packed, gz=False)

    def test_file_helpers(self, tmp_path):
        vol = from_array(np.arange(8, dtype=np.uint8).reshape(2, 4))
        for name in ("a.nii", "a.nii.gz"):
            p = tmp_path / name
            write_nifti_file(vol, p)
            np.testing.assert_array_equal(read_nifti_file(p).raw, vol.raw)
        raw_bytes = (tmp_path / "a.nii.gz").read_bytes()
        assert raw_bytes[:2] == b"\x1f\x8b"


class TestScaling:
    def test_slope_and_intercept_applied(self):
        vol = from_array(
            np.array([[0, 10]], dtype=np.int16), scl_slope=2.0, scl_inter=-1.0
        )
        back = read_nifti(write_nifti(vol))
        np.testing.assert_allclose(back.voxels, [[-1.0, 19.0]])
        np.testing.assert_array_equal(back.raw, [[0, 10]])

    def test_zero_slope_means_identity(self):
        vol = from_array(np.array([[5]], dtype=np.int16), scl_slope=0.0, scl_inter=99.0)
        back = read_nifti(write_nifti(vol))
        np.testing.assert_allclose(back.voxels, [[5.0]])


class TestFrames:
    def test_4d_frame_extraction(self):
        data = np.arange(2 * 3 * 4 * 5, dtype=np.int16).reshape(2, 3, 4, 5)
        back = read_nifti(write_nifti(from_array(data)))
        assert back.n_frames == 2
        np.testing.assert_array_equal(back.frame(1), data[1].astype(np.float64))

    def test_frame_on_3d_rejected(self):
        vol = from_array(np.zeros((2, 2, 2), dtype=np.uint8))
        with pytest.raises(ValueError):
            vol.frame(0)

    def test_to_volume3d(self):
        data = np.ones((3, 4, 5), dtype=np.float32)
        v3 = from_array(data, spacing=(1.5, 2.0, 8.0)).to_volume3d()
        assert v3.spacing == (1.5, 2.0, 8.0)
        assert v3.data.shape == (3, 4, 5)

    def test_2d_promoted_to_single_slice(self):
        v3 = from_array(np.ones((4, 6), dtype=np.uint8)).to_volume3d()
        assert v3.data.shape == (1, 4, 6)


class TestErrors:
    def blob(self, **overrides):
        vol = from_array(np.zeros((2, 2, 2), dtype=np.uint8))
        raw = bytearray(write_nifti(vol))
        for offset, fmt, value in overrides.values():
            struct.pack_into(fmt, raw, offset, value)
        return bytes(raw)

    def test_bad_magic(self):
        bad = self.blob(magic=(344, "4s", b"xxxx"))
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(bad)
        assert exc.value.field == "magic"

    def test_pair_magic_rejected(self):
        bad = self.blob(magic=(344, "4s", b"ni1\x00"))
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(bad)
        assert exc.value.field == "magic"
        assert "hdr" in str(exc.value)

    def test_nifti2_rejected(self):
        bad = self.blob(size=(0, "<i", 540))
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(bad)
        assert exc.value.field == "sizeof_hdr"
        assert "NIfTI-2" in str(exc.value)

    def test_unsupported_datatype(self):
        bad = self.blob(datatype=(70, "<h", 64))  # float64 not supported
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(bad)
        assert exc.value.field == "datatype"

    def test_bitpix_mismatch(self):
        bad = self.blob(bitpix=(72, "<h", 16))
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(bad)
        assert exc.value.field == "bitpix"

    def test_truncated_data(self):
        good = self.blob()
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(good[:-3])
        assert exc.value.field == "data"

    def test_short_stream(self):
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(b"\x00" * 100)
        assert exc.value.field == "sizeof_hdr"

    def test_bad_rank(self):
        for rank in (0, 1, 5, 7):
            bad = self.blob(rank=(40, "<h", rank))
            with pytest.raises(NiftiFormatError) as exc:
                read_nifti(bad)
            assert exc.value.field == "dim"

    def test_negative_extent(self):
        bad = self.blob(nx=(42, "<h", -4))
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(bad)
        assert exc.value.field == "dim"

    def test_bad_vox_offset(self):
        bad = self.blob(off=(108, "<f", 10.0))
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(bad)
        assert exc.value.field == "vox_offset"
        bad = self.blob(off=(108, "<f", float("nan")))
        with pytest.raises(NiftiFormatError) as exc:
            read_nifti(bad)
        assert exc.value.field == "vox_offset"

    def test_from_array_rejects_unsupported(self):
        with pytest.raises(NiftiFormatError):
            from_array(np.zeros((2, 2), dtype=np.float64))
        with pytest.raises(NiftiFormatError):
            from_array(np.zeros(4, dtype=np.uint8))

    def test_all_errors_are_value_errors(self):
        assert issubclass(NiftiFormatError, ValueError)


class TestFuzz:
    def test_mutated_headers_never_crash(self):
        rng = np.random.default_rng(99)
        base = bytearray(write_nifti(from_array(np.zeros((3, 3, 3), dtype=np.int16))))
        for _ in range(300):
            raw = bytearray(base)
            for _ in range(int(rng.integers(1, 8))):
                raw[int(rng.integers(0, HEADER_SIZE))] = int(rng.integers(0, 256))
            try:
                read_nifti(bytes(raw), gz=False)
            except NiftiFormatError:
                pass

    def test_random_streams_never_crash(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(0, 600))
            blob = rng.integers(0, 256, size=n, dtype=np.uint8).tobytes()
            try:
                read_nifti(blob)
            except NiftiFormatError:
                pass
