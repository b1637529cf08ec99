import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from cybervax.exceptions import DimensionError, MaskError, ParameterError
from cybervax.imaging import (
    FaceMask,
    MaskProvenance,
    blend,
    check_image,
    clamp_unit,
    from_array,
    load_image,
    resize_image,
    save_image,
    soften_mask,
    to_array,
)


def square_mask(size: int = 16, start: int = 4, stop: int = 12) -> FaceMask:
    values = torch.zeros(1, size, size)
    values[:, start:stop, start:stop] = 1.0
    return FaceMask(values, MaskProvenance.LANDMARK)


class FaceMaskTest(unittest.TestCase):
    def test_two_dimensional_values_gain_a_channel(self):
        mask = FaceMask(torch.zeros(8, 8))
        self.assertEqual((1, 8, 8), tuple(mask.values.shape))

    def test_values_outside_unit_range(self):
        with self.assertRaises(MaskError):
            FaceMask(torch.full((1, 4, 4), 1.5))

    def test_wrong_channel_count(self):
        with self.assertRaises(DimensionError) as context:
            FaceMask(torch.zeros(3, 4, 4))
        self.assertEqual((3, 4, 4), context.exception.actual)

    def test_complement_twice_is_identity(self):
        mask = FaceMask(torch.rand(1, 8, 8))
        twice = mask.complement().complement()
        self.assertTrue(torch.equal(mask.data, twice.data))

    def test_complement_values(self):
        mask = square_mask()
        self.assertTrue(torch.equal(1.0 - mask.data, mask.complement().data))

    def test_binary(self):
        mask = FaceMask(torch.tensor([[[0.2, 0.5], [0.7, 0.0]]]))
        self.assertEqual([[[0.0, 1.0], [1.0, 0.0]]], mask.binary().data.tolist())

    def test_stack(self):
        stacked = FaceMask.stack([square_mask(), square_mask()])
        self.assertEqual((2, 1, 16, 16), tuple(stacked.data.shape))

    def test_stack_empty(self):
        with self.assertRaises(DimensionError):
            FaceMask.stack([])


class BlendTest(unittest.TestCase):
    def test_zero_mask_returns_base(self):
        raw, base = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
        self.assertTrue(torch.equal(base, blend(raw, base, torch.zeros(1, 8, 8))))

    def test_one_mask_returns_raw(self):
        raw, base = torch.rand(3, 8, 8), torch.rand(3, 8, 8)
        self.assertTrue(torch.equal(raw, blend(raw, base, torch.ones(1, 8, 8))))

    def test_soft_mask_is_convex(self):
        raw, base = torch.ones(3, 4, 4), torch.zeros(3, 4, 4)
        result = blend(raw, base, torch.full((1, 4, 4), 0.25))
        self.assertTrue(torch.allclose(result, torch.full((3, 4, 4), 0.25)))

    def test_swapped_blends_sum_to_both_images(self):
        torch.manual_seed(6)
        a, b, mask = torch.rand(3, 8, 8), torch.rand(3, 8, 8), torch.rand(1, 8, 8)
        self.assertTrue(torch.allclose(a + b, blend(a, b, mask) + blend(b, a, mask), atol=1e-6))

    def test_shape_mismatch(self):
        with self.assertRaises(DimensionError):
            blend(torch.rand(3, 8, 8), torch.rand(3, 4, 4), torch.ones(1, 8, 8))

    def test_mask_mismatch(self):
        with self.assertRaises(DimensionError):
            blend(torch.rand(3, 8, 8), torch.rand(3, 8, 8), torch.ones(1, 4, 4))


class ClampUnitTest(unittest.TestCase):
    def test_clamps_out_of_range_values(self):
        clamped = clamp_unit(torch.tensor([[[-0.5, 0.25, 1.5]]]))
        self.assertTrue(torch.equal(torch.tensor([[[0.0, 0.25, 1.0]]]), clamped))


class CheckImageTest(unittest.TestCase):
    def test_channel_first(self):
        self.assertEqual((3, 16, 16), check_image(torch.rand(3, 16, 16), 16))

    def test_wrong_rank(self):
        with self.assertRaises(DimensionError):
            check_image(torch.rand(16, 16))

    def test_wrong_resolution(self):
        with self.assertRaises(DimensionError) as context:
            check_image(torch.rand(3, 16, 16), 32)
        self.assertEqual((32, 32), context.exception.expected)


class SoftenMaskTest(unittest.TestCase):
    def test_plateaus_are_preserved(self):
        mask = square_mask(24, 4, 20)
        softened = soften_mask(mask, kernel_radius=2, sigma=1.0).data
        self.assertTrue(torch.all(softened[:, 7:17, 7:17] == 1.0))
        self.assertEqual(0.0, float(softened[0, 0, 0]))

    def test_edge_is_soft(self):
        softened = soften_mask(square_mask(24, 4, 20), kernel_radius=2, sigma=1.0).data
        edge = float(softened[0, 12, 4])
        self.assertGreater(edge, 0.0)
        self.assertLess(edge, 1.0)

    def test_values_stay_in_unit_range(self):
        softened = soften_mask(square_mask(), kernel_radius=3, sigma=2.0).data
        self.assertGreaterEqual(float(softened.min()), 0.0)
        self.assertLessEqual(float(softened.max()), 1.0)

    def test_zero_radius_keeps_binary(self):
        mask = square_mask()
        self.assertTrue(torch.equal(mask.data, soften_mask(mask, kernel_radius=0).data))

    def test_invalid_sigma(self):
        with self.assertRaises(ParameterError):
            soften_mask(square_mask(), sigma=0.0)

    def test_mask_too_small(self):
        with self.assertRaises(ParameterError):
            soften_mask(FaceMask(torch.ones(1, 2, 2)), kernel_radius=3)


class ConversionTest(unittest.TestCase):
    def test_from_array_scales_uint8(self):
        array = np.full((4, 5, 3), 255, dtype=np.uint8)
        tensor = from_array(array)
        self.assertEqual((3, 4, 5), tuple(tensor.shape))
        self.assertEqual(torch.float32, tensor.dtype)
        self.assertTrue(torch.all(tensor == 1.0))

    def test_to_array_quantises(self):
        array = to_array(torch.full((3, 2, 2), 0.5))
        self.assertEqual(np.uint8, array.dtype)
        self.assertEqual((2, 2, 3), array.shape)
        self.assertEqual(128, int(array[0, 0, 0]))

    def test_save_and_load(self):
        image = torch.rand(3, 8, 8)
        with tempfile.TemporaryDirectory() as directory:
            path = save_image(image, Path(directory) / "nested" / "image.png")
            loaded = load_image(path)
        self.assertEqual((3, 8, 8), tuple(loaded.shape))
        self.assertLessEqual(float((loaded - image).abs().max()), 0.5 / 255 + 1e-6)

    def test_resize(self):
        resized = resize_image(torch.rand(3, 32, 32), (16, 16))
        self.assertEqual((3, 16, 16), tuple(resized.shape))

    def test_resize_same_size_is_copy(self):
        image = torch.rand(3, 8, 8)
        resized = resize_image(image, (8, 8))
        self.assertTrue(torch.equal(image, resized))
        self.assertIsNot(image, resized)


if __name__ == "__main__":
    unittest.main()
