import tempfile
import unittest
from pathlib import Path

import torch

from cybervax.exceptions import MaskError, NeutralisationError, ParameterError, VaccinationError
from cybervax.imaging import FaceMask, save_image
from cybervax.masks import LandmarkFileDetector, LandmarkSet, MaskDetector
from cybervax.models import ImmuneSystem, UNetConfig, Validator, ValidatorConfig
from cybervax.pipeline import (
    FrameResult,
    PortraitRecord,
    SequenceMode,
    VerdictRecord,
    crop_box_for_landmarks,
    neutralise,
    neutralise_frame,
    neutralise_image,
    paste_back,
    prepare_portrait,
    process_sequence,
    seam_weights,
    vaccinate,
    vaccinate_frame,
    vaccinate_image,
    validate,
)


def tiny_system() -> ImmuneSystem:
    torch.manual_seed(0)
    return ImmuneSystem(
        UNetConfig(
            resolution=16,
            base_width=8,
            channel_mult=(1, 2),
            res_blocks_per_level=1,
            attention_resolutions=(4,),
            depth=2,
            head_channels=8,
        )
    )


def centre_mask(size: int = 16) -> torch.Tensor:
    mask = torch.zeros(1, size, size)
    mask[:, 4:12, 4:12] = 1.0
    return mask


class NoFaceDetector(MaskDetector):
    def locate(self, image, key=None):
        raise MaskError(f"No face in {key}")


class VerdictRecordTest(unittest.TestCase):
    def test_from_probability(self):
        verdict = VerdictRecord.from_probability(0.7, source="a.png")
        self.assertTrue(verdict.vaccinated)
        self.assertEqual("a.png", verdict.source)

    def test_threshold_is_inclusive(self):
        self.assertTrue(VerdictRecord.from_probability(0.5).vaccinated)
        self.assertFalse(VerdictRecord.from_probability(0.49).vaccinated)

    def test_inconsistent_verdict(self):
        with self.assertRaises(ParameterError):
            VerdictRecord(True, 0.2)

    def test_probability_range(self):
        with self.assertRaises(ParameterError):
            VerdictRecord(True, 1.2)


class CropTest(unittest.TestCase):
    def test_box_is_square_and_inside(self):
        landmarks = LandmarkSet([(50, 10), (70, 10), (70, 40), (50, 40)])
        x0, y0, x1, y1 = crop_box_for_landmarks(landmarks, 48, 80)
        self.assertEqual(x1 - x0, y1 - y0)
        self.assertTrue(0 <= x0 and x1 <= 80 and 0 <= y0 and y1 <= 48)

    def test_box_is_expanded(self):
        landmarks = LandmarkSet([(40, 40), (59, 40), (59, 59), (40, 59)])
        x0, _, x1, _ = crop_box_for_landmarks(landmarks, 100, 100)
        self.assertEqual(28, x1 - x0)

    def test_portrait_record_checks_box(self):
        with self.assertRaises(ParameterError):
            PortraitRecord(torch.rand(3, 8, 8), FaceMask(torch.ones(1, 8, 8)), (0, 0, 20, 20), (10, 10))

    def test_prepare_portrait(self):
        frame = torch.rand(3, 48, 64)
        detector = LandmarkFileDetector({"f.png": [LandmarkSet([(20, 10), (40, 10), (40, 30), (20, 30)])]})
        record = prepare_portrait(frame, detector, 16, "f.png", 3)
        self.assertEqual((3, 16, 16), tuple(record.image.shape))
        self.assertEqual((1, 16, 16), tuple(record.mask.data.shape))
        self.assertEqual((48, 64), record.frame_size)
        self.assertEqual(3, record.frame_index)
        self.assertEqual(1.0, float(record.mask.data[0, 8, 8]))
        self.assertEqual(0.0, float(record.mask.data[0, 0, 0]))


class PasteBackTest(unittest.TestCase):
    def test_seam_weights(self):
        weights = seam_weights(10, 10, 3)
        self.assertEqual(0.25, float(weights[0, 0, 5]))
        self.assertEqual(1.0, float(weights[0, 5, 5]))
        self.assertTrue(torch.all(seam_weights(4, 4, 0) == 1.0))

    def test_outside_box_is_untouched(self):
        frame = torch.rand(3, 32, 40)
        box = (8, 4, 24, 20)
        out = paste_back(frame, torch.zeros(3, 16, 16), box)
        outside = torch.ones(32, 40, dtype=torch.bool)
        outside[4:20, 8:24] = False
        self.assertTrue(torch.equal(frame[:, outside], out[:, outside]))
        self.assertTrue(torch.all(out[:, 12, 16] == 0.0))


class ImageStageTest(unittest.TestCase):
    def setUp(self):
        self.system = tiny_system()
        self.image = torch.rand(3, 16, 16)
        self.mask = centre_mask()

    def test_vaccination_keeps_the_face(self):
        vaccinated = vaccinate_image(self.system, self.image, self.mask)
        self.assertTrue(torch.equal(self.image[:, 4:12, 4:12], vaccinated[:, 4:12, 4:12]))
        self.assertFalse(torch.equal(self.image, vaccinated))

    def test_neutralisation_keeps_the_background(self):
        neutralised = neutralise_image(self.system, self.image, self.mask)
        self.assertTrue(torch.equal(self.image[:, :4], neutralised[:, :4]))
        self.assertFalse(torch.equal(self.image[:, 4:12, 4:12], neutralised[:, 4:12, 4:12]))

    def test_neutralisation_ignores_the_face_content(self):
        other = self.image.clone()
        other[:, 4:12, 4:12] = torch.rand(3, 8, 8)
        self.assertTrue(
            torch.equal(
                neutralise_image(self.system, self.image, self.mask),
                neutralise_image(self.system, other, self.mask),
            )
        )

    def test_no_gradients(self):
        self.assertFalse(vaccinate_image(self.system, self.image, self.mask).requires_grad)

    def test_neutralise_detects_when_no_mask(self):
        self.assertEqual((3, 16, 16), tuple(neutralise(self.system, self.image).shape))

    def test_neutralise_detection_failure(self):
        with self.assertRaises(NeutralisationError):
            neutralise(self.system, self.image, detector=NoFaceDetector(), key="x.png")

    def test_vaccinate_record(self):
        record = prepare_portrait(self.image, resolution=16)
        self.assertEqual((3, 16, 16), tuple(vaccinate(self.system, record).shape))

    def test_validate(self):
        validator = Validator(ValidatorConfig(resolution=16))
        verdict = validate(validator, self.image, 0.5, source="x.png")
        self.assertEqual(verdict.vaccinated, verdict.probability >= 0.5)
        self.assertEqual("x.png", verdict.source)


class FrameStageTest(unittest.TestCase):
    def setUp(self):
        self.system = tiny_system()

    def test_vaccinate_frame(self):
        frame = torch.rand(3, 40, 48)
        out, record, portrait = vaccinate_frame(self.system, frame)
        self.assertEqual(frame.shape, out.shape)
        self.assertEqual((3, 16, 16), tuple(portrait.shape))
        x0, y0, x1, y1 = record.box
        self.assertTrue(torch.equal(frame[:, :, :x0], out[:, :, :x0]))
        self.assertTrue(torch.equal(frame[:, :, x1:], out[:, :, x1:]))

    def test_vaccinate_frame_without_face(self):
        with self.assertRaises(VaccinationError):
            vaccinate_frame(self.system, torch.rand(3, 32, 32), NoFaceDetector())

    def test_neutralise_frame_without_face(self):
        with self.assertRaises(NeutralisationError):
            neutralise_frame(self.system, torch.rand(3, 32, 32), NoFaceDetector())


class ProcessSequenceTest(unittest.TestCase):
    def setUp(self):
        self.system = tiny_system()
        self.validator = Validator(ValidatorConfig(resolution=16))

    def test_order_is_preserved(self):
        frames = [(f"frame_{i}", torch.rand(3, 24, 24)) for i in range(6)]
        results = list(process_sequence(self.system, None, frames, SequenceMode.VACCINATE, workers=3))
        self.assertEqual([f"frame_{i}" for i in range(6)], [r.source for r in results])
        self.assertEqual(list(range(6)), [r.index for r in results])

    def test_full_mode_has_verdicts(self):
        results = list(process_sequence(self.system, self.validator, [torch.rand(3, 24, 24)], SequenceMode.FULL))
        self.assertIsInstance(results[0], FrameResult)
        self.assertIsNotNone(results[0].verdict)
        self.assertEqual("frame_000000", results[0].source)

    def test_failed_detection_passes_frame_through(self):
        frame = torch.rand(3, 24, 24)
        with self.assertLogs("cybervax.pipeline", level="WARNING"):
            results = list(process_sequence(self.system, None, [frame], "neutralise", NoFaceDetector()))
        self.assertTrue(results[0].failed)
        self.assertTrue(torch.equal(frame, results[0].output))

    def test_unreadable_frames_are_skipped(self):
        with tempfile.TemporaryDirectory() as directory:
            good = save_image(torch.rand(3, 24, 24), Path(directory) / "good.png")
            bad = Path(directory) / "bad.png"
            bad.write_bytes(b"not an image")
            with self.assertLogs("cybervax.pipeline", level="WARNING"):
                results = list(
                    process_sequence(self.system, None, [("bad.png", bad), ("good.png", good)], "vaccinate")
                )
        self.assertEqual(["good.png"], [r.source for r in results])

    def test_malformed_frame_does_not_end_the_stream(self):
        frames = [torch.rand(3, 24, 24), torch.rand(24, 24), torch.rand(3, 24, 24)]
        with self.assertLogs("cybervax.pipeline", level="WARNING"):
            results = list(process_sequence(self.system, None, frames, SequenceMode.VACCINATE, workers=2))
        self.assertEqual([0, 1, 2], [r.index for r in results])
        self.assertEqual([False, True, False], [r.failed for r in results])
        self.assertTrue(torch.equal(frames[1], results[1].output))

    def test_frames_are_read_lazily(self):
        pulled = []

        def stream():
            for i in range(200):
                pulled.append(i)
                yield torch.rand(3, 24, 24)

        results = process_sequence(self.system, None, stream(), SequenceMode.VACCINATE, workers=2)
        first = next(results)
        self.assertEqual(0, first.index)
        self.assertLessEqual(len(pulled), 5)
        results.close()
        self.assertLess(len(pulled), 200)

    def test_empty_stream(self):
        self.assertEqual([], list(process_sequence(self.system, self.validator, iter([]), workers=2)))


if __name__ == "__main__":
    unittest.main()
