"""
Unit tests for synth_data module.
"""
import shutil
import tempfile
import unittest
from collections import Counter
from pathlib import Path

import numpy as np

from grid_field import jacobian_map, negative_jacobian_fraction
from synth_data import (
    CLASS_ORDER, MAX_DISPLACEMENT, DatasetError, DeformationClass, SynthSpec, generate_dataset,
    generate_pair, label_for_index, load_dataset, load_pair, read_manifest, save_dataset, save_pair,
    split_pairs,
)


class TestGeneratePair(unittest.TestCase):
    """Test single synthetic pairs."""

    def test_zero_strength_without_noise(self):
        """Test a pair with no deformation and no noise has F equal to M."""
        spec = SynthSpec(grid_dims=(32, 32), noise_sigma=0.0)
        pair = generate_pair(spec, DeformationClass.ROTATION, np.random.default_rng(0), strength=0.0)
        np.testing.assert_array_equal(pair.fixed.values, pair.moving.values)
        self.assertEqual(pair.strength, 0.0)

    def test_intensity_range_and_masks(self):
        """Test intensities stay in [0, 1] and masks are disjoint and non-empty."""
        pair = generate_pair(SynthSpec(grid_dims=(32, 32)), DeformationClass.SHEAR, np.random.default_rng(1))
        self.assertGreaterEqual(pair.fixed.values.min(), 0.0)
        self.assertLessEqual(pair.fixed.values.max(), 1.0)
        disk, annulus = pair.moving_masks["disk"], pair.moving_masks["annulus"]
        self.assertGreater(disk.sum(), 0)
        self.assertGreater(annulus.sum(), 0)
        self.assertFalse(np.any(disk & annulus))

    def test_area_follows_jacobian(self):
        """Test the Jacobian integrated over the fixed structure matches the moving area."""
        spec = SynthSpec(grid_dims=(64, 64))
        for label in CLASS_ORDER:
            pair = generate_pair(spec, label, np.random.default_rng(2))
            moving = pair.moving_masks["disk"] | pair.moving_masks["annulus"]
            fixed = pair.fixed_masks["disk"] | pair.fixed_masks["annulus"]
            jac = jacobian_map(pair.phi).values
            self.assertAlmostEqual(float(jac[fixed].sum()) / moving.sum(), 1.0, delta=0.05, msg=label.value)
            self.assertEqual(negative_jacobian_fraction(pair.phi), 0.0)

    def test_contraction_shrinks_structures(self):
        """Test contraction makes the fixed structures smaller than the moving ones."""
        spec = SynthSpec(grid_dims=(64, 64))
        pair = generate_pair(spec, DeformationClass.CONTRACTION_STRONG, np.random.default_rng(3))
        moving = pair.moving_masks["disk"] | pair.moving_masks["annulus"]
        fixed = pair.fixed_masks["disk"] | pair.fixed_masks["annulus"]
        self.assertLess(fixed.sum(), moving.sum())

    def test_displacement_capped_on_large_grids(self):
        """Test the strongest draws stay within the displacement cap at every grid size."""
        for dims in ((32, 32), (64, 64), (96, 96), (128, 128)):
            spec = SynthSpec(grid_dims=dims)
            for label in CLASS_ORDER:
                strongest = spec.strength_range(label)[1]
                pair = generate_pair(spec, label, np.random.default_rng(4), strength=strongest)
                peak = float(np.max(np.linalg.norm(pair.phi.displacement.vectors, axis=-1)))
                self.assertLessEqual(peak, MAX_DISPLACEMENT + 1e-9, msg=f"{label.value} {dims}")
        capped = generate_pair(SynthSpec(grid_dims=(128, 128)), DeformationClass.CONTRACTION_STRONG,
                               np.random.default_rng(4), strength=0.4)
        self.assertLess(capped.strength, 0.4)

    def test_spec_validation(self):
        """Test small grids and unordered ranges are rejected."""
        with self.assertRaises(ValueError):
            SynthSpec(grid_dims=(8, 8))
        with self.assertRaises(ValueError):
            SynthSpec(rotation=(0.4, 0.2))


class TestDataset(unittest.TestCase):
    """Test dataset generation and storage."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.spec = SynthSpec(grid_dims=(16, 16), n_per_class=2, seed=11)

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def test_balanced_classes_and_splits(self):
        """Test each class appears n_per_class times, split evenly."""
        pairs = generate_dataset(self.spec)
        self.assertEqual(len(pairs), 8)
        self.assertEqual(Counter(p.label for p in pairs), Counter({label: 2 for label in CLASS_ORDER}))
        train = split_pairs(pairs, "train")
        self.assertEqual(Counter(p.label for p in train), Counter({label: 1 for label in CLASS_ORDER}))
        self.assertEqual([label_for_index(i) for i in range(4)], CLASS_ORDER)

    def test_seeded_generation(self):
        """Test equal seeds give equal datasets and different seeds differ."""
        first = generate_dataset(self.spec)
        second = generate_dataset(self.spec)
        other = generate_dataset(SynthSpec(grid_dims=(16, 16), n_per_class=2, seed=12))
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.fixed.values, b.fixed.values)
        self.assertFalse(np.array_equal(first[0].fixed.values, other[0].fixed.values))

    def test_pair_archive(self):
        """Test a stored pair loads back with masks, transform and label."""
        pair = generate_dataset(self.spec)[5]
        loaded = load_pair(save_pair(self.tmp / "p.bin", pair))
        np.testing.assert_array_equal(loaded.moving.values, pair.moving.values)
        np.testing.assert_array_equal(loaded.fixed_masks["annulus"], pair.fixed_masks["annulus"])
        np.testing.assert_array_equal(loaded.phi.displacement.vectors, pair.phi.displacement.vectors)
        self.assertEqual(loaded.label, pair.label)
        self.assertEqual(loaded.index, 5)

    def test_manifest(self):
        """Test the manifest lists every pair with class and split."""
        manifest = save_dataset(generate_dataset(self.spec), self.tmp)
        entries = read_manifest(manifest)
        self.assertEqual(len(entries), 8)
        self.assertEqual(entries[0].filename, "pair_0000.bin")
        self.assertEqual(entries[4].class_id, CLASS_ORDER.index(label_for_index(4)))
        self.assertEqual(len(load_dataset(self.tmp, split="train")), 4)
        with self.assertRaises(DatasetError):
            load_dataset(self.tmp, split="validation")

    def test_empty_or_missing_manifest(self):
        """Test unusable manifests."""
        with self.assertRaises(DatasetError):
            read_manifest(self.tmp / "manifest.csv")
        (self.tmp / "manifest.csv").write_text("filename,class_id,split\n", encoding="utf-8")
        with self.assertRaises(DatasetError):
            read_manifest(self.tmp / "manifest.csv")


if __name__ == "__main__":
    unittest.main()
