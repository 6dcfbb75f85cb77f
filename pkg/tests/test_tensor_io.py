"""
Unit tests for tensor_io module.
"""
import shutil
import tempfile
import unittest
import zipfile
from pathlib import Path

import numpy as np

from grid_field import FieldKind, Grid, ScalarImage, VectorField
from tensor_io import (
    ContainerError, decode_container, encode_container, load_field, load_image, read_archive,
    read_container, save_field, save_image, write_archive, write_container,
)


class TestContainer(unittest.TestCase):
    """Test the single-tensor container format."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_header_layout(self):
        """Test the 8-digit length prefix, JSON header and newline."""
        blob = encode_container(np.zeros((2, 3), dtype=np.float32), {"spacing": [1.5, 1.5]})
        length = int(blob[:8])
        header = blob[8:8 + length].decode("utf-8")
        self.assertIn('"dtype": "f32"', header)
        self.assertIn('"shape": [2, 3]', header)
        self.assertEqual(blob[8 + length:9 + length], b"\n")
        self.assertEqual(len(blob), 9 + length + 2 * 3 * 4)

    def test_preserves_values_and_dtype(self):
        """Test float32 and float64 tensors come back bit-exact."""
        for dtype in (np.float32, np.float64):
            array = self.rng.standard_normal((4, 5, 2)).astype(dtype)
            path = write_container(self.tmp / "t.tc", array, {"note": "x"})
            values, header = read_container(path)
            self.assertEqual(values.dtype, dtype)
            np.testing.assert_array_equal(values, array)
            self.assertEqual(header["meta"], {"note": "x"})

    def test_rejects_integer_tensors(self):
        """Test unsupported dtypes are refused."""
        with self.assertRaises(ContainerError):
            encode_container(np.zeros(3, dtype=np.int32))

    def test_truncated_payload(self):
        """Test a short payload is reported."""
        blob = encode_container(np.zeros(10))
        with self.assertRaises(ContainerError):
            decode_container(blob[:-8])

    def test_garbage_header(self):
        """Test a blob without a header is reported."""
        with self.assertRaises(ContainerError):
            decode_container(b"not a container at all")

    def test_image_spacing(self):
        """Test images carry their spacing."""
        img = ScalarImage(Grid((6, 4), (1.5, 2.0)), self.rng.random((6, 4)))
        loaded = load_image(save_image(self.tmp / "img.tc", img))
        self.assertEqual(loaded.grid, img.grid)
        np.testing.assert_array_equal(loaded.values, img.values)

    def test_field_kind(self):
        """Test fields carry spacing and kind."""
        v = VectorField(Grid((4, 4)), self.rng.standard_normal((4, 4, 2)), kind=FieldKind.VELOCITY)
        loaded = load_field(save_field(self.tmp / "v.tc", v))
        self.assertEqual(loaded.kind, FieldKind.VELOCITY)
        self.assertEqual(loaded.grid.spacing, (1.0, 1.0))


class TestArchive(unittest.TestCase):
    """Test archives of named tensors."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_members_and_record(self):
        """Test every tensor and the record are stored."""
        tensors = {"enc0.w": np.ones((2, 2)), "enc0.b": np.zeros(2)}
        path = write_archive(self.tmp / "ckpt.bin", tensors, {"step": 7})
        loaded, record = read_archive(path)
        self.assertEqual(set(loaded), set(tensors))
        np.testing.assert_array_equal(loaded["enc0.w"], tensors["enc0.w"])
        self.assertEqual(record, {"step": 7})
        with zipfile.ZipFile(path) as archive:
            self.assertIn("record.json", archive.namelist())

    def test_byte_identical(self):
        """Test equal inputs give equal archives."""
        tensors = {"a": np.arange(6.0)}
        first = write_archive(self.tmp / "a.bin", tensors, {"k": 1}).read_bytes()
        second = write_archive(self.tmp / "b.bin", tensors, {"k": 1}).read_bytes()
        self.assertEqual(first, second)

    def test_not_an_archive(self):
        """Test a non-zip file is reported."""
        path = self.tmp / "bad.bin"
        path.write_bytes(b"plain bytes")
        with self.assertRaises(ContainerError):
            read_archive(path)


if __name__ == "__main__":
    unittest.main()
