import math
import tempfile
import unittest
from pathlib import Path

import torch

from cybervax.data import generate_synthetic_faces
from cybervax.exceptions import ConfigError, MaskError, ParameterError
from cybervax.imaging import FaceMask, MaskProvenance
from cybervax.masks import (
    AffineParams,
    AffineRanges,
    EllipseHeuristicDetector,
    FallbackDetector,
    LandmarkFileDetector,
    LandmarkSet,
    LandmarkSource,
    MaskConfig,
    ellipse_landmarks,
    format_landmark_line,
    mask_from_landmarks,
    mask_iou,
    parse_landmark_line,
    random_affine,
    rasterise_ellipse,
    read_landmark_file,
    sample_affine_params,
    select_largest_face,
    synthetic_mask,
)

SQUARE = LandmarkSet([(8, 8), (23, 8), (23, 23), (8, 23)])


class LandmarkSetTest(unittest.TestCase):
    def test_too_few_points(self):
        with self.assertRaises(MaskError):
            LandmarkSet([(1, 1), (2, 2)]).validate(8, 8)

    def test_point_outside_frame(self):
        with self.assertRaises(MaskError):
            LandmarkSet([(1, 1), (2, 2), (9, 1)]).validate(8, 8)

    def test_transformed(self):
        moved = LandmarkSet([(2, 4)]).transformed(0.5, 2.0, 2.0, 1.0)
        self.assertEqual([(0.0, 6.0)], moved.points)

    def test_hull_area_of_collinear_points(self):
        self.assertEqual(0.0, LandmarkSet([(0, 0), (1, 1), (2, 2)]).hull_area())

    def test_select_largest_face(self):
        small = LandmarkSet([(0, 0), (2, 0), (0, 2)])
        self.assertIs(SQUARE, select_largest_face([small, SQUARE]))

    def test_select_from_nothing(self):
        with self.assertRaises(MaskError):
            select_largest_face([])


class MaskFromLandmarksTest(unittest.TestCase):
    def test_binary_hull(self):
        mask = mask_from_landmarks(SQUARE, 32, 32, kernel_radius=0)
        self.assertEqual(MaskProvenance.LANDMARK, mask.provenance)
        self.assertEqual(16 * 16, mask.area())
        self.assertEqual(1.0, float(mask.data[0, 15, 15]))
        self.assertEqual(0.0, float(mask.data[0, 2, 2]))

    def test_soft_edge(self):
        mask = mask_from_landmarks(SQUARE, 32, 32, kernel_radius=3, sigma=2.0)
        self.assertEqual(1.0, float(mask.data[0, 15, 15]))
        edge = float(mask.data[0, 15, 8])
        self.assertGreater(edge, 0.0)
        self.assertLess(edge, 1.0)

    def test_translation_equivariance(self):
        mask = mask_from_landmarks(SQUARE, 32, 32)
        shifted = mask_from_landmarks(SQUARE.shifted(3, 2), 32, 32)
        self.assertTrue(torch.allclose(torch.roll(mask.data, shifts=(2, 3), dims=(-2, -1)), shifted.data, atol=1e-6))

    def test_sixteen_point_ellipse_area(self):
        landmarks = ellipse_landmarks((31.5, 31.5), (16, 20), 16)
        mask = mask_from_landmarks(landmarks, 64, 64, kernel_radius=0)
        expected = math.pi * 16 * 20
        self.assertLess(abs(mask.area() - expected) / expected, 0.05)

    def test_collinear_landmarks(self):
        with self.assertRaises(MaskError):
            mask_from_landmarks(LandmarkSet([(1, 1), (5, 5), (9, 9)]), 16, 16)


class SyntheticMaskTest(unittest.TestCase):
    def test_ellipse_area(self):
        mask = synthetic_mask(64, 64, (31.5, 31.5), (16, 20), kernel_radius=0)
        self.assertAlmostEqual(3.14159 * 16 * 20, mask.area(), delta=40)

    def test_ellipse_must_fit(self):
        with self.assertRaises(ParameterError):
            synthetic_mask(32, 32, (16, 16), (20, 10))

    def test_axes_must_be_positive(self):
        with self.assertRaises(ParameterError):
            synthetic_mask(32, 32, (16, 16), (0, 10))


class RandomAffineTest(unittest.TestCase):
    def test_identity(self):
        mask = mask_from_landmarks(SQUARE, 32, 32, kernel_radius=0)
        warped = random_affine(mask, AffineParams.identity())
        self.assertTrue(torch.allclose(mask.data, warped.data, atol=1e-5))

    def test_translation_moves_the_mask(self):
        mask = mask_from_landmarks(SQUARE, 32, 32, kernel_radius=0)
        warped = random_affine(mask, AffineParams(translate_frac=(0.25, 0.0)))
        self.assertAlmostEqual(0.0, float(warped.data[0, 15, 9]), places=5)
        self.assertAlmostEqual(1.0, float(warped.data[0, 15, 25]), places=5)

    def test_values_stay_in_unit_range(self):
        mask = FaceMask(torch.rand(2, 1, 16, 16))
        warped = random_affine(mask, [sample_affine_params(1), sample_affine_params(2)])
        self.assertGreaterEqual(float(warped.data.min()), 0.0)
        self.assertLessEqual(float(warped.data.max()), 1.0)

    def test_quarter_turn_swaps_ellipse_axes(self):
        mask = synthetic_mask(64, 64, (31.5, 31.5), (16, 24), kernel_radius=0)
        turned = random_affine(mask, AffineParams(rotation=90.0))
        expected = rasterise_ellipse(64, 64, (31.5, 31.5), (24, 16)).float().unsqueeze(0)
        self.assertGreaterEqual(mask_iou(turned, expected), 0.98)

    def test_default_ranges_keep_synthetic_masks_aligned(self):
        faces = generate_synthetic_faces(8, 64, seed=2)
        for index, sample in enumerate(faces):
            warped = random_affine(sample.mask, sample_affine_params(100 + index))
            with self.subTest(sample=sample.sample_id):
                self.assertGreaterEqual(mask_iou(sample.mask, warped), 0.7)

    def test_parameter_count_must_match(self):
        with self.assertRaises(ParameterError):
            random_affine(torch.rand(2, 1, 8, 8), [AffineParams(), AffineParams(), AffineParams()])

    def test_sampling_is_seeded(self):
        self.assertEqual(sample_affine_params(7), sample_affine_params(7))

    def test_sampled_params_within_ranges(self):
        ranges = AffineRanges(rotation_deg=2.0, translate_frac=0.01, scale=(0.99, 1.01))
        params = sample_affine_params(3, ranges)
        self.assertLessEqual(abs(params.rotation), 2.0)
        self.assertTrue(0.99 <= params.scale <= 1.01)

    def test_invalid_scale(self):
        with self.assertRaises(ParameterError):
            AffineParams(scale=0.0)

    def test_invalid_ranges(self):
        with self.assertRaises(ConfigError):
            AffineRanges.from_dict({"scale": [1.1, 0.9]})


class MaskIouTest(unittest.TestCase):
    def test_identical(self):
        mask = mask_from_landmarks(SQUARE, 32, 32)
        self.assertEqual(1.0, mask_iou(mask, mask))

    def test_disjoint(self):
        a = torch.zeros(1, 4, 4)
        b = torch.zeros(1, 4, 4)
        a[:, :2] = 1.0
        b[:, 2:] = 1.0
        self.assertEqual(0.0, mask_iou(a, b))

    def test_both_empty(self):
        self.assertEqual(1.0, mask_iou(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4)))


class LandmarkFileTest(unittest.TestCase):
    def test_parse_line(self):
        filename, landmarks = parse_landmark_line("face.png 1,2 3.5,4 5,6")
        self.assertEqual("face.png", filename)
        self.assertEqual([(1.0, 2.0), (3.5, 4.0), (5.0, 6.0)], landmarks.points)
        self.assertEqual(LandmarkSource.FILE, landmarks.source)

    def test_malformed_pair(self):
        with self.assertRaises(ValueError):
            parse_landmark_line("face.png 1;2")

    def test_format_parses_back(self):
        line = format_landmark_line("face.png", SQUARE)
        self.assertEqual(SQUARE.points, parse_landmark_line(line)[1].points)

    def test_read_file_with_comments_and_repeats(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "landmarks.txt"
            path.write_text("# header\n\na.png 1,1 5,1 5,5\na.png 1,1 9,1 9,9\nb.png 2,2 4,2 4,4\n")
            records = read_landmark_file(path)
        self.assertEqual(2, len(records["a.png"]))
        self.assertEqual(1, len(records["b.png"]))

    def test_read_file_reports_the_line(self):
        with tempfile.TemporaryDirectory() as directory:
            path = Path(directory) / "landmarks.txt"
            path.write_text("a.png 1,1 5,1 5,5\nb.png x,y\n")
            with self.assertRaisesRegex(MaskError, ":2:"):
                read_landmark_file(path)


class DetectorTest(unittest.TestCase):
    def test_file_detector(self):
        detector = LandmarkFileDetector({"a.png": [SQUARE]})
        mask = detector.detect(torch.rand(3, 32, 32), "dir/a.png", MaskConfig(kernel_radius=0))
        self.assertEqual(16 * 16, mask.area())

    def test_file_detector_unknown_key(self):
        with self.assertRaises(MaskError):
            LandmarkFileDetector({}).locate(torch.rand(3, 32, 32), "a.png")

    def test_ellipse_heuristic_is_centred(self):
        mask = EllipseHeuristicDetector().detect(torch.rand(3, 32, 32))
        self.assertEqual(1.0, float(mask.data[0, 16, 16]))
        self.assertEqual(0.0, float(mask.data[0, 0, 0]))

    def test_fallback_logs_and_uses_heuristic(self):
        detector = FallbackDetector(LandmarkFileDetector({}))
        with self.assertLogs("cybervax.masks", level="WARNING"):
            landmarks = detector.locate(torch.rand(3, 32, 32), "missing.png")
        self.assertEqual(LandmarkSource.EXTERNAL_DETECTOR, landmarks.source)

    def test_mask_config_validation(self):
        with self.assertRaises(ConfigError):
            MaskConfig.from_dict({"sigma": 0})


if __name__ == "__main__":
    unittest.main()
