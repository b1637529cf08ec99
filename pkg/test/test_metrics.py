import math
import unittest

import numpy as np
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cybervax.data import generate_synthetic_faces
from cybervax.exceptions import ConfigError, DimensionError, MetricError
from cybervax.metrics import (
    PSNR_CAP,
    SSIM_C1,
    SSIM_C2,
    FaceEmbedder,
    LossBreakdown,
    LossWeights,
    MetricRecord,
    MetricRegion,
    RandomProjectionEmbedder,
    classification_report,
    composite_loss,
    distance,
    identity_similarity,
    mae,
    mean_of,
    measure,
    psnr,
    region_mask,
    ssim,
    ssim_map,
    summarise,
)


def half_mask(size: int = 32) -> torch.Tensor:
    mask = torch.zeros(1, size, size)
    mask[:, :, : size // 2] = 1.0
    return mask


class LeadingPixelsEmbedder(FaceEmbedder):
    def embed(self, image, mask=None):
        return image.reshape(-1)[:4]


class MaeTest(unittest.TestCase):
    def test_identical_images(self):
        image = torch.rand(3, 16, 16)
        self.assertEqual(0.0, float(mae(image, image)))

    def test_constant_difference(self):
        self.assertAlmostEqual(0.25, float(mae(torch.full((3, 8, 8), 0.75), torch.full((3, 8, 8), 0.5))))

    def test_region_restricts_pixels(self):
        a = torch.zeros(3, 32, 32)
        b = torch.zeros(3, 32, 32)
        b[:, :, 16:] = 1.0
        mask = half_mask()
        self.assertEqual(0.0, float(mae(a, b, mask)))
        self.assertEqual(1.0, float(mae(a, b, 1.0 - mask)))

    def test_empty_region(self):
        with self.assertRaises(MetricError):
            mae(torch.rand(3, 8, 8), torch.rand(3, 8, 8), torch.zeros(1, 8, 8))

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            mae(torch.rand(3, 8, 8), torch.rand(3, 8, 9))


class SsimTest(unittest.TestCase):
    def test_identical_images(self):
        image = torch.rand(3, 32, 32)
        self.assertAlmostEqual(1.0, float(ssim(image, image)), places=5)

    def test_map_uses_valid_windows(self):
        self.assertEqual((1, 3, 22, 22), tuple(ssim_map(torch.rand(3, 32, 32), torch.rand(3, 32, 32)).shape))

    def test_image_smaller_than_window(self):
        with self.assertRaises(MetricError):
            ssim(torch.rand(3, 10, 10), torch.rand(3, 10, 10))

    def test_noise_lowers_similarity(self):
        torch.manual_seed(0)
        image = torch.rand(3, 32, 32)
        noisy = torch.clamp(image + 0.2 * torch.randn_like(image), 0.0, 1.0)
        self.assertLess(float(ssim(image, noisy)), 0.9)

    def test_per_sample(self):
        image = torch.rand(2, 3, 32, 32)
        other = image.clone()
        other[1] = torch.rand(3, 32, 32)
        values = ssim(image, other, per_sample=True)
        self.assertEqual((2,), tuple(values.shape))
        self.assertAlmostEqual(1.0, float(values[0]), places=5)
        self.assertLess(float(values[1]), 1.0)

    def test_region_ignores_other_half(self):
        image = torch.rand(3, 32, 32)
        other = image.clone()
        other[:, :, 24:] = torch.rand(3, 32, 8)
        self.assertAlmostEqual(1.0, float(ssim(image, other, half_mask())), places=5)

    def test_region_without_windows(self):
        mask = torch.zeros(1, 32, 32)
        mask[:, 0, 0] = 1.0
        with self.assertRaises(MetricError):
            ssim(torch.rand(3, 32, 32), torch.rand(3, 32, 32), mask)

    def test_is_differentiable(self):
        a = torch.rand(3, 16, 16, requires_grad=True)
        distance(a, torch.rand(3, 16, 16)).backward()
        self.assertIsNotNone(a.grad)

    def test_constant_images_match_closed_form(self):
        a = torch.full((3, 16, 16), 0.25, dtype=torch.float64)
        b = torch.full((3, 16, 16), 0.75, dtype=torch.float64)
        luminance = (2 * 0.25 * 0.75 + SSIM_C1) * SSIM_C2
        expected = luminance / ((0.25 ** 2 + 0.75 ** 2 + SSIM_C1) * SSIM_C2)
        self.assertAlmostEqual(expected, float(ssim(a, b)), places=6)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_bounded_and_symmetric(self, seed):
        generator = torch.Generator().manual_seed(seed)
        a = torch.rand(3, 16, 16, generator=generator)
        b = torch.rand(3, 16, 16, generator=generator)
        forward, backward = float(ssim(a, b)), float(ssim(b, a))
        self.assertTrue(-1.0 <= forward <= 1.0)
        self.assertAlmostEqual(forward, backward, places=5)


class PsnrTest(unittest.TestCase):
    def test_identical_images_are_capped(self):
        image = torch.rand(3, 8, 8)
        self.assertEqual(PSNR_CAP, psnr(image, image))

    def test_known_value(self):
        a, b = torch.zeros(3, 8, 8), torch.full((3, 8, 8), 0.1)
        self.assertAlmostEqual(20.0, psnr(a, b), places=4)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(5)
        for _ in range(5):
            a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
            expected = 10.0 * math.log10(1.0 / np.mean((a - b) ** 2))
            with self.subTest(expected=expected):
                self.assertAlmostEqual(expected, psnr(torch.from_numpy(a), torch.from_numpy(b)), delta=1e-6)

    def test_decreases_as_noise_grows(self):
        image = torch.full((3, 16, 16), 0.5)
        noise = torch.randn(3, 16, 16, generator=torch.Generator().manual_seed(2))
        values = [psnr(image, image + level * noise) for level in (0.01, 0.05, 0.2)]
        self.assertGreater(values[0], values[1])
        self.assertGreater(values[1], values[2])

    def test_region(self):
        a = torch.zeros(3, 32, 32)
        b = a.clone()
        b[:, :, 16:] = 1.0
        self.assertEqual(PSNR_CAP, psnr(a, b, half_mask()))
        self.assertAlmostEqual(0.0, psnr(a, b, 1.0 - half_mask()))

    @settings(max_examples=25, deadline=None)
    @given(st.floats(min_value=0.0, max_value=1.0), st.floats(min_value=0.0, max_value=1.0))
    def test_never_exceeds_cap(self, x, y):
        value = psnr(torch.full((3, 4, 4), x), torch.full((3, 4, 4), y))
        self.assertLessEqual(value, PSNR_CAP)
        self.assertTrue(math.isfinite(value))


class DistanceTest(unittest.TestCase):
    @settings(max_examples=25, deadline=None)
    @given(st.integers(min_value=0, max_value=2 ** 31 - 1))
    def test_non_negative_and_zero_on_identity(self, seed):
        generator = torch.Generator().manual_seed(seed)
        a = torch.rand(3, 16, 16, generator=generator)
        b = torch.rand(3, 16, 16, generator=generator)
        self.assertGreaterEqual(float(distance(a, b)), 0.0)
        self.assertAlmostEqual(0.0, float(distance(a, a)), places=5)

    def test_gradient_matches_finite_difference(self):
        generator = torch.Generator().manual_seed(3)
        a = torch.rand(3, 12, 12, generator=generator, dtype=torch.float64).requires_grad_()
        b = torch.rand(3, 12, 12, generator=generator, dtype=torch.float64)
        self.assertTrue(torch.autograd.gradcheck(lambda t: distance(t, b), (a,), eps=1e-6, atol=1e-4))


class RegionMaskTest(unittest.TestCase):
    def test_full_has_no_selection(self):
        self.assertIsNone(region_mask(half_mask(), MetricRegion.FULL))

    def test_face_and_nonface_partition(self):
        soft = torch.rand(1, 8, 8)
        face = region_mask(soft, MetricRegion.FACE)
        nonface = region_mask(soft, "nonface")
        self.assertTrue(torch.equal(torch.ones(1, 8, 8), face + nonface))


class LossTest(unittest.TestCase):
    def test_weights_must_be_non_negative(self):
        with self.assertRaises(ConfigError):
            LossWeights.from_dict({"imp": -1.0})

    def test_weights_must_be_finite(self):
        with self.assertRaises(ConfigError):
            LossWeights.from_dict({"val": float("nan")})

    def test_breakdown_total(self):
        breakdown = LossBreakdown.from_components(1.0, 2.0, 3.0, LossWeights(1.0, 0.5, 0.0))
        self.assertEqual(2.0, breakdown.total)
        self.assertTrue(breakdown.is_finite())
        self.assertEqual({"imp": 1.0, "rev": 2.0, "val": 3.0, "total": 2.0}, breakdown.to_dict())

    def test_breakdown_non_finite(self):
        self.assertFalse(LossBreakdown.from_components(float("inf"), 0.0, 0.0).is_finite())

    def test_perfect_system_has_zero_loss(self):
        torch.manual_seed(0)
        original = torch.rand(2, 3, 16, 16)
        mask = torch.zeros(2, 1, 16, 16)
        mask[..., 4:12, 4:12] = 1.0
        inverse = 1.0 - mask
        breakdown = composite_loss(original, original, original, original * inverse, inverse)
        self.assertAlmostEqual(0.0, breakdown.total, places=5)
        self.assertFalse(breakdown.total_tensor.requires_grad)

    def test_total_is_weighted_sum(self):
        torch.manual_seed(1)
        original, other = torch.rand(3, 16, 16), torch.rand(3, 16, 16)
        inverse = torch.ones(1, 16, 16)
        weights = LossWeights(2.0, 0.5, 1.0)
        breakdown = composite_loss(original, other, other, other, inverse, weights)
        expected = 2.0 * breakdown.imp + 0.5 * breakdown.rev + 1.0 * breakdown.val
        self.assertAlmostEqual(expected, breakdown.total, places=5)

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            composite_loss(
                torch.rand(3, 16, 16),
                torch.rand(3, 16, 16),
                torch.rand(3, 8, 8),
                torch.rand(3, 16, 16),
                torch.ones(1, 16, 16),
            )


class IdentityTest(unittest.TestCase):
    def setUp(self):
        self.embedder = RandomProjectionEmbedder(resolution=16, dim=32, seed=3)

    def test_self_similarity(self):
        image = torch.rand(3, 16, 16)
        self.assertAlmostEqual(1.0, identity_similarity(image, image, self.embedder), places=6)

    def test_embedding_is_deterministic(self):
        image = torch.rand(3, 16, 16)
        other = RandomProjectionEmbedder(resolution=16, dim=32, seed=3)
        self.assertTrue(torch.equal(self.embedder.embed(image), other.embed(image)))

    def test_flat_image_has_zero_norm(self):
        flat = torch.full((3, 16, 16), 0.5)
        with self.assertRaises(MetricError):
            identity_similarity(flat, torch.rand(3, 16, 16), self.embedder)

    def test_orthogonal_embeddings(self):
        a, b = torch.zeros(3, 16, 16), torch.zeros(3, 16, 16)
        a[0, 0, 0], b[0, 0, 1] = 1.0, 1.0
        self.assertEqual(0.0, identity_similarity(a, b, LeadingPixelsEmbedder()))

    def test_same_identity_scores_higher(self):
        embedder = RandomProjectionEmbedder(resolution=32, dim=128, seed=0)
        faces = generate_synthetic_faces(2, 32, seed=4)
        first, second = faces[0].image, faces[1].image
        noise = 0.01 * torch.randn(first.shape, generator=torch.Generator().manual_seed(1))
        degraded = torch.clamp(0.95 * first + 0.02 + noise, 0.0, 1.0)
        self.assertNotEqual(faces[0].identity, faces[1].identity)
        self.assertGreater(
            identity_similarity(first, degraded, embedder), identity_similarity(first, second, embedder)
        )

    def test_wrong_resolution(self):
        with self.assertRaises(DimensionError):
            self.embedder.embed(torch.rand(3, 8, 8))


class ClassificationReportTest(unittest.TestCase):
    def test_rates(self):
        scores = [(0.9, True), (0.4, True), (0.1, False), (0.6, False), (0.2, False)]
        report = classification_report(scores)
        self.assertEqual((0.6, 0.5, 2 / 3), report.as_tuple())
        self.assertEqual(2, report.positives)
        self.assertEqual(3, report.negatives)

    def test_threshold_is_inclusive(self):
        self.assertEqual(1.0, classification_report([(0.5, True)]).tpr)

    def test_missing_class(self):
        report = classification_report([(0.9, True)])
        self.assertIsNone(report.tnr)
        self.assertEqual(1.0, report.accuracy)

    def test_no_scores(self):
        self.assertEqual((None, None, None), classification_report([]).as_tuple())


class MeasureTest(unittest.TestCase):
    def test_labels_are_carried(self):
        image = torch.rand(3, 16, 16)
        record = measure(image, image, sample_id="a_0001", condition="blur", magnitude=1.0)
        self.assertEqual(PSNR_CAP, record.psnr)
        self.assertEqual("a_0001", record.sample_id)
        self.assertEqual("blur", record.condition)
        self.assertIsNone(record.identity_sim)

    def test_region_requires_mask(self):
        with self.assertRaises(MetricError):
            measure(torch.rand(3, 16, 16), torch.rand(3, 16, 16), region=MetricRegion.FACE)

    def test_face_region(self):
        a = torch.rand(3, 32, 32)
        b = a.clone()
        b[:, :, 24:] = 0.0
        record = measure(b, a, half_mask(), MetricRegion.FACE)
        self.assertEqual("face", record.region)
        self.assertEqual(0.0, record.mae)

    def test_summarise(self):
        records = [
            MetricRecord(30.0, 0.9, 0.1, condition="none"),
            MetricRecord(20.0, 0.7, 0.3, condition="none"),
            MetricRecord(10.0, 0.5, 0.5, condition="blur"),
        ]
        summary = summarise(records, lambda r: r.condition)
        self.assertEqual(25.0, summary["none"]["psnr"])
        self.assertEqual(2, summary["none"]["count"])
        self.assertEqual(1, summary["blur"]["count"])

    def test_mean_of_skips_missing(self):
        records = [MetricRecord(1.0, 1.0, 0.0, identity_sim=0.5), MetricRecord(1.0, 1.0, 0.0)]
        self.assertEqual(0.5, mean_of(records, "identity_sim"))
        self.assertIsNone(mean_of(records[1:], "identity_sim"))


if __name__ == "__main__":
    unittest.main()
