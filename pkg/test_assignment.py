#!/usr/bin/env python3
"""
Tests for dustbin Sinkhorn normalization and match extraction.
"""

import math
import unittest

import numpy as np
import torch
from numpy.testing import assert_allclose

from assignment import AssignmentMatrix, MatchSet, extract_matches, mask_scores, sinkhorn
from errors import ConfigurationError, NumericalFailure
from geometry import PatchGrid
from matcher import HeadOutput


def reference_log_transport(scores, alpha, row_bin, col_bin, tol=1e-13, max_iters=200):
    """Entropic transport plan from damped Newton steps on the dual, independent of Sinkhorn.

    The last column potential is pinned to zero to remove the shared offset.
    """
    m, n = scores.shape
    couplings = np.full((m + 1, n + 1), alpha, dtype=np.float64)
    couplings[:m, :n] = scores
    mu = np.append(np.ones(m), row_bin)
    nu = np.append(np.ones(n), col_bin)

    def potentials(x):
        return x[:m + 1], np.append(x[m + 1:], 0.0)

    def dual(x):
        u, v = potentials(x)
        return np.exp(couplings + u[:, None] + v[None, :]).sum() - mu @ u - nu @ v

    x = np.zeros(m + 1 + n)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(max_iters):
            u, v = potentials(x)
            plan = np.exp(couplings + u[:, None] + v[None, :])
            rows, cols = plan.sum(axis=1), plan.sum(axis=0)
            grad = np.concatenate([rows - mu, (cols - nu)[:-1]])
            if np.abs(grad).max() < tol:
                break
            hessian = np.block([[np.diag(rows), plan[:, :-1]], [plan[:, :-1].T, np.diag(cols[:-1])]])
            step = np.linalg.solve(hessian, grad)
            t, current = 1.0, dual(x)
            while not dual(x - t * step) <= current - 0.25 * t * (grad @ step) and t > 1e-12:
                t *= 0.5
            x = x - t * step
    u, v = potentials(x)
    return couplings + u[:, None] + v[None, :]


class SinkhornTest(unittest.TestCase):

    def setUp(self):
        torch.manual_seed(0)

    def test_two_by_two(self):
        scores = torch.tensor([[10.0, -10.0], [-10.0, 10.0]], dtype=torch.float64)
        assign = sinkhorn(scores, -10.0, n_iters=50)
        probs = assign.probs.numpy()
        self.assertGreater(probs[0, 0], 0.98)
        self.assertGreater(probs[1, 1], 0.98)
        self.assertEqual(assign.iterations_used, 50)

        # a dustbin score of -10 converges slowly; compare both solvers at convergence
        converged = sinkhorn(scores, -10.0, n_iters=300000, tol=1e-9)
        self.assertLess(converged.iterations_used, 300000)
        expected = reference_log_transport(scores.numpy(), -10.0, 2.0, 2.0)
        assert_allclose(converged.probs.numpy(), np.exp(expected), atol=1e-7)

    def test_three_by_three(self):
        scores = torch.tensor([[1.0, -0.5, 0.2], [0.3, 2.0, -1.0], [-0.7, 0.1, 0.4]], dtype=torch.float64)
        probs = sinkhorn(scores, 0.5, n_iters=100).probs.numpy()
        expected = reference_log_transport(scores.numpy(), 0.5, 3.0, 3.0)
        assert_allclose(probs, np.exp(expected), atol=1e-4)

    def test_uniform_scores(self):
        scores = torch.zeros(256, 256, dtype=torch.float64)
        assign = sinkhorn(scores, 0.0, n_iters=20, dustbin_mass=1.0)
        assert_allclose(assign.probs.numpy(), 1.0 / 257, rtol=1e-6)
        assert_allclose(-assign.log_probs[:256].numpy(), math.log(257), rtol=1e-6)

    def test_marginals(self):
        scores = torch.randn(8, 8, dtype=torch.float64)
        probs = sinkhorn(scores, torch.tensor(1.0, dtype=torch.float64), n_iters=100).probs
        assert_allclose(probs[:8].sum(dim=1).numpy(), 1.0, atol=1e-4)
        assert_allclose(probs[:, :8].sum(dim=0).numpy(), 1.0, atol=1e-6)
        assert_allclose(probs.sum().item(), 16.0, atol=1e-3)
        self.assertTrue(bool(((probs >= 0) & (probs <= 1 + 1e-9))[:8, :8].all()))

    def test_total_mass_full_grid(self):
        scores = torch.randn(256, 256, dtype=torch.float64)
        probs = sinkhorn(scores, 1.0, n_iters=100).probs
        assert_allclose(probs.sum().item(), 512.0, atol=1e-3)

    def test_rectangular(self):
        scores = torch.randn(5, 9, dtype=torch.float64)
        probs = sinkhorn(scores, 0.5, n_iters=200).probs
        self.assertEqual(tuple(probs.shape), (6, 10))
        assert_allclose(probs[:5].sum(dim=1).numpy(), 1.0, atol=1e-4)
        assert_allclose(probs[:, :9].sum(dim=0).numpy(), 1.0, atol=1e-4)

    def test_shift_invariance(self):
        scores = torch.randn(6, 6, dtype=torch.float64)
        base = sinkhorn(scores, 0.3, n_iters=30).log_probs
        shifted = sinkhorn(scores + 5.0, 5.3, n_iters=30).log_probs
        assert_allclose(shifted.numpy(), base.numpy(), atol=1e-5)

    def test_batched_matches_unbatched(self):
        scores = torch.randn(3, 6, 6, dtype=torch.float64)
        batched = sinkhorn(scores, 0.7, n_iters=20).log_probs
        self.assertEqual(tuple(batched.shape), (3, 7, 7))
        for b in range(3):
            assert_allclose(batched[b].numpy(), sinkhorn(scores[b], 0.7, n_iters=20).log_probs.numpy(), atol=1e-12)

    def test_gradients(self):
        scores = torch.randn(4, 4, dtype=torch.float64, requires_grad=True)
        alpha = torch.tensor(0.5, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(
            lambda s, a: sinkhorn(s, a, n_iters=10).log_probs.mean(), (scores, alpha), eps=1e-4, rtol=1e-3))

    def test_tolerance_stops_early(self):
        scores = torch.randn(8, 8, dtype=torch.float64)
        assign = sinkhorn(scores, 1.0, n_iters=500, tol=1e-8)
        self.assertLess(assign.iterations_used, 500)
        assert_allclose(assign.probs[:8].sum(dim=1).numpy(), 1.0, atol=1e-8)

    def test_nan_rejected(self):
        scores = torch.zeros(3, 3)
        scores[1, 2] = float("nan")
        with self.assertRaises(NumericalFailure):
            sinkhorn(scores, 1.0)

    def test_bad_settings(self):
        with self.assertRaises(ConfigurationError):
            sinkhorn(torch.zeros(3, 3), 1.0, n_iters=0)
        with self.assertRaises(ConfigurationError):
            sinkhorn(torch.zeros(3, 3), 1.0, dustbin_mass=0.0)

    def test_masked_tokens_go_to_dustbin(self):
        scores = torch.eye(4, dtype=torch.float64) * 10.0
        row_valid = torch.tensor([True, False, True, True])
        col_valid = torch.tensor([True, True, True, False])
        probs = sinkhorn(mask_scores(scores, row_valid, col_valid), 0.0, n_iters=100).probs
        self.assertGreater(probs[1, 4].item(), 0.99)
        self.assertGreater(probs[4, 3].item(), 0.99)
        self.assertGreater(probs[0, 0].item(), 0.9)

    def test_mask_scores_without_masks(self):
        scores = torch.randn(3, 3)
        self.assertIs(mask_scores(scores), scores)


def make_head(n, angle=0.3, refine_raw=0.0, invalid=()):
    raw = torch.zeros(1, n, 6, dtype=torch.float64)
    raw[..., 0] = math.sin(angle)
    raw[..., 1] = math.cos(angle)
    raw[..., 3] = refine_raw
    raw[..., 4] = -refine_raw
    for j in invalid:
        raw[0, j, :2] = 0.0
    return HeadOutput.from_raw(raw)


class ExtractMatchesTest(unittest.TestCase):

    def setUp(self):
        self.grid = PatchGrid(grid_size=4, patch_px=16, image_size=64)
        self.scores = torch.eye(16, dtype=torch.float64) * 20.0 - 10.0

    def _assign(self, scores):
        return sinkhorn(scores.unsqueeze(0), 0.0, n_iters=100)

    def test_identity_assignment(self):
        matches = extract_matches(self._assign(self.scores), make_head(16), self.grid)
        np.testing.assert_array_equal(matches.moving_idx, np.arange(16))
        np.testing.assert_array_equal(matches.fixed_idx, np.arange(16))
        self.assertTrue(np.all(matches.confidence > 0.9))
        assert_allclose(np.arctan2(matches.sin, matches.cos), 0.3)
        assert_allclose(matches.fixed_xy, matches.fixed_center_xy)
        assert_allclose(matches.moving_xy[5], [16 + 8, 16 + 8])

    def test_dustbin_winner_dropped(self):
        scores = self.scores.clone()
        scores[3] = -10.0
        matches = extract_matches(self._assign(scores), make_head(16), self.grid)
        self.assertNotIn(3, matches.moving_idx)
        self.assertNotIn(3, matches.fixed_idx)
        self.assertEqual(len(matches), 15)

    def test_degenerate_angle_dropped(self):
        matches = extract_matches(self._assign(self.scores), make_head(16, invalid=(5,)), self.grid)
        self.assertNotIn(5, matches.fixed_idx)
        self.assertEqual(len(matches), 15)

    def test_refinement_offsets(self):
        matches = extract_matches(self._assign(self.scores), make_head(16, refine_raw=1.0), self.grid)
        offset = 0.5 * math.tanh(1.0) * 16
        assert_allclose(matches.fixed_xy - matches.fixed_center_xy,
                        np.tile([offset, -offset], (16, 1)), rtol=1e-9)

    def test_threshold(self):
        uniform = sinkhorn(torch.zeros(16, 16, dtype=torch.float64), 0.0, n_iters=20, dustbin_mass=1.0)
        self.assertEqual(len(extract_matches(uniform, make_head(16), self.grid)), 0)
        with self.assertRaises(ConfigurationError):
            extract_matches(self._assign(self.scores), make_head(16), self.grid, threshold=1.0)
        with self.assertRaises(ConfigurationError):
            extract_matches(self._assign(self.scores), make_head(16), self.grid, threshold=0.0)

    def test_grid_mismatch(self):
        with self.assertRaises(ConfigurationError):
            extract_matches(self._assign(self.scores), make_head(16), PatchGrid(grid_size=2, patch_px=32, image_size=64))

    def test_partial_injection(self):
        torch.manual_seed(7)
        assign = self._assign(torch.randn(16, 16, dtype=torch.float64) * 5.0)
        matches = extract_matches(assign, make_head(16), self.grid, threshold=0.05)
        self.assertEqual(len(set(matches.moving_idx)), len(matches))
        self.assertEqual(len(set(matches.fixed_idx)), len(matches))
        frame = matches.to_frame()
        self.assertEqual(len(frame), len(matches))
        assert_allclose(frame["theta_deg"].to_numpy(), math.degrees(0.3))

    def test_duplicate_indices_rejected(self):
        with self.assertRaises(ConfigurationError):
            MatchSet(moving_idx=np.array([1, 1]), fixed_idx=np.array([2, 3]))

    def test_empty_match_set(self):
        matches = MatchSet()
        self.assertEqual(len(matches), 0)
        self.assertEqual(len(matches.to_frame()), 0)

    def test_assignment_views(self):
        assign = AssignmentMatrix(torch.zeros(3, 4), 1)
        self.assertEqual(tuple(assign.real_block().shape), (2, 3))
        assert_allclose(assign.probs.numpy(), 1.0)


if __name__ == "__main__":
    unittest.main()
