#!/usr/bin/env python3
"""
Tests for the equivariant feature extractor.
"""

import unittest

import torch
from numpy.testing import assert_allclose

from backbone import (
    Backbone,
    BackboneConfig,
    BasicBlock,
    basic_block,
    depth_to_space,
    equivariance_report,
    space_to_depth,
)
from equivariant_core import FeatureField, FieldKind, FieldType, equivariance_residual
from errors import ConfigurationError

N = 8


class BackboneConfigTest(unittest.TestCase):

    def test_channel_counts(self):
        self.assertEqual(BackboneConfig(use_upsampling=True).out_channels, 24)
        self.assertEqual(BackboneConfig(use_upsampling=False).out_channels, 8)
        self.assertEqual(BackboneConfig().patch_px, 16)

    def test_inconsistent_geometry(self):
        with self.assertRaises(ValueError):
            BackboneConfig(input_size=250)
        with self.assertRaises(ValueError):
            BackboneConfig(widths=(2, 4, 8))


class BasicBlockTest(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)

    def test_shapes(self):
        field = FeatureField(torch.randn(1, 2 * N, 32, 32), FieldType(FieldKind.REGULAR, N, 2))
        down = basic_block(field, BasicBlock(2, 4, N, stride=2))
        same = basic_block(field, BasicBlock(2, 4, N, stride=1))
        self.assertEqual(tuple(down.tensor.shape), (1, 4 * N, 16, 16))
        self.assertEqual(tuple(same.tensor.shape), (1, 4 * N, 32, 32))

    def test_odd_size_with_stride_two(self):
        field = FeatureField(torch.randn(1, N, 15, 15), FieldType(FieldKind.REGULAR, N, 1))
        with self.assertRaises(ConfigurationError):
            basic_block(field, BasicBlock(1, 1, N, stride=2))

    def test_field_type_checked(self):
        field = FeatureField(torch.randn(1, N, 8, 8), FieldType(FieldKind.REGULAR, N, 1))
        with self.assertRaises(ConfigurationError):
            basic_block(field, BasicBlock(2, 2, N))

    def test_equivariance(self):
        block = BasicBlock(2, 3, N, stride=2).double()
        x = torch.randn(2, 2 * N, 16, 16, dtype=torch.float64)
        for turns in (1, 2, 3):
            self.assertLessEqual(equivariance_residual(block, x, block.in_type, block.out_type, turns), 1e-4)


class BackboneTest(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)
        self.full = Backbone(BackboneConfig(use_upsampling=True)).eval()
        self.down_only = Backbone(BackboneConfig(use_upsampling=False)).eval()
        self.image = torch.rand(1, 1, 256, 256)

    def test_feature_shapes(self):
        with torch.no_grad():
            features = self.full.extract_features(self.image, "moving")
            self.assertEqual(tuple(features.grid.shape), (1, 24, 16, 16))
            self.assertEqual(features.source, "moving")
            self.assertEqual(tuple(self.down_only.extract_features(self.image, "fixed").grid.shape), (1, 8, 16, 16))
            vectors = self.full.downsample_path(self.image)
        self.assertEqual(vectors.field_type.kind, FieldKind.VECTOR)
        self.assertEqual(tuple(vectors.tensor.shape), (1, 8, 16, 16))

    def test_zero_image(self):
        with torch.no_grad():
            out = self.full(torch.zeros(1, 1, 256, 256))
        self.assertEqual(float(out.abs().max()), 0.0)

    def test_wrong_input_size(self):
        with self.assertRaises(ConfigurationError):
            self.full(torch.zeros(1, 1, 128, 128))
        with self.assertRaises(ConfigurationError):
            self.full.extract_features(self.image, "other")

    def test_deterministic(self):
        with torch.no_grad():
            first = self.full(self.image)
            second = self.full(self.image)
        self.assertTrue(torch.equal(first, second))

    def test_upsample_path(self):
        deep = torch.randn(1, 8 * N, 16, 16)
        with torch.no_grad():
            out = self.full.upsample_path(deep)
            zero = self.full.upsample_path(torch.zeros_like(deep))
        self.assertEqual(tuple(out.shape), (1, 16, 16, 16))
        self.assertEqual(float(zero.abs().max()), 0.0)
        with self.assertRaises(ConfigurationError):
            self.down_only.upsample_path(deep)

    def test_vector_gates(self):
        vectors = torch.randn(1, 8, 16, 16)
        with torch.no_grad():
            self.assertTrue(torch.equal(self.full.vector_gate(vectors), vectors))
            self.full.vector_gate.threshold.fill_(1.0)
            gated = self.full.vector_gate(vectors)
        pairs, out = vectors.view(1, 4, 2, 16, 16), gated.view(1, 4, 2, 16, 16)
        short = pairs.norm(dim=2) <= 1.0
        self.assertEqual(float(out.norm(dim=2)[short].max()), 0.0)
        assert_allclose(out.norm(dim=2)[~short].numpy(), pairs.norm(dim=2)[~short].numpy() - 1.0, atol=1e-5)

    def test_space_to_depth(self):
        x = torch.arange(4.0).view(1, 1, 2, 2)
        assert_allclose(space_to_depth(x).flatten().numpy(), [0.0, 1.0, 2.0, 3.0])
        big = torch.randn(1, 4, 32, 32)
        folded = space_to_depth(big)
        self.assertEqual(tuple(folded.shape), (1, 16, 16, 16))
        self.assertTrue(torch.equal(depth_to_space(folded), big))

    def test_patch_locality(self):
        occluded = self.image.clone()
        occluded[..., 128:144, 128:144] = 0.0  # grid cell (8, 8)
        with torch.no_grad():
            before = self.full(self.image)[0]
            after = self.full(occluded)[0]
        changed = (before - after).abs().amax(dim=0)
        self.assertGreater(float(changed[8, 8]), 0.0)
        rows, cols = torch.meshgrid(torch.arange(16), torch.arange(16), indexing="ij")
        far = torch.maximum((rows - 8).abs(), (cols - 8).abs()) >= 4
        self.assertLessEqual(float(changed[far].max()), 1e-6)

    def test_equivariance_report(self):
        report = equivariance_report(self.full, trials=1, size=16)
        self.assertEqual(set(report.columns), {"layer", "quarter_turns", "residual"})
        self.assertIn("downsample_path", set(report["layer"]))
        self.assertIn("up_block", set(report["layer"]))
        self.assertTrue({"vector_gate", "up_vector_gate"} <= set(report["layer"]))
        self.assertLessEqual(report[report["layer"] != "downsample_path"]["residual"].max(), 1e-5)
        self.assertLessEqual(report["residual"].max(), 1e-4)
        # the report works on a copy
        self.assertEqual(next(self.full.parameters()).dtype, torch.float32)


if __name__ == "__main__":
    unittest.main()
