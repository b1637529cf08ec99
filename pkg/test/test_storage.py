import json
import os
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import torch

from cybervax.exceptions import CheckpointError
from cybervax.storage import (
    FORMAT_VERSION,
    CheckpointStorageInterface,
    LocalCheckpointStorage,
    atomic_write_bytes,
    atomic_write_json,
)


class AtomicWriteTest(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.root = Path(self.directory.name)

    def tearDown(self):
        self.directory.cleanup()

    def test_creates_parents(self):
        path = atomic_write_bytes(self.root / "a" / "b" / "c.bin", b"abc")
        self.assertEqual(b"abc", path.read_bytes())

    def test_replaces_existing(self):
        path = self.root / "out.json"
        atomic_write_json(path, {"a": 1})
        atomic_write_json(path, {"b": 2})
        self.assertEqual({"b": 2}, json.loads(path.read_text()))

    def test_failure_keeps_previous_content(self):
        path = atomic_write_bytes(self.root / "keep.bin", b"old")
        with mock.patch("cybervax.storage.os.replace", side_effect=OSError("disk full")):
            with self.assertRaises(OSError):
                atomic_write_bytes(path, b"new")
        self.assertEqual(b"old", path.read_bytes())
        self.assertEqual(["keep.bin"], os.listdir(self.root))


class InterfaceTest(unittest.TestCase):
    def test_methods_are_abstract(self):
        storage = CheckpointStorageInterface()
        with self.assertRaises(NotImplementedError):
            storage.fetch("x")
        with self.assertRaises(NotImplementedError):
            storage.store("x", {}, {})


class LocalCheckpointStorageTest(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.TemporaryDirectory()
        self.storage = LocalCheckpointStorage(Path(self.directory.name) / "checkpoints")

    def tearDown(self):
        self.directory.cleanup()

    def test_store_and_fetch(self):
        state = {"weights": torch.arange(4.0)}
        self.storage.store("model", state, {"kind": "model", "step": 3})
        self.assertTrue(self.storage.exists("model"))

        fetched_state, metadata = self.storage.fetch("model")
        self.assertTrue(torch.equal(state["weights"], fetched_state["weights"]))
        self.assertEqual(3, metadata["step"])
        self.assertEqual(FORMAT_VERSION, metadata["format_version"])

    def test_missing(self):
        self.assertFalse(self.storage.exists("missing"))
        self.assertIsNone(self.storage.fetch("missing"))
        with self.assertRaises(CheckpointError) as context:
            self.storage.require("missing")
        self.assertEqual("missing", context.exception.path)

    def test_sidecar_alone_is_missing(self):
        self.storage.store("model", {}, {})
        os.remove(self.storage.path / "model.pt")
        self.assertFalse(self.storage.exists("model"))
        self.assertIsNone(self.storage.fetch("model"))

    def test_version_mismatch(self):
        self.storage.store("model", {}, {"format_version": FORMAT_VERSION + 1})
        with self.assertRaises(CheckpointError):
            self.storage.fetch("model")

    def test_corrupt_archive(self):
        self.storage.store("model", {}, {})
        (self.storage.path / "model.pt").write_bytes(b"not a checkpoint")
        with self.assertRaises(CheckpointError):
            self.storage.fetch("model")

    def test_corrupt_sidecar(self):
        self.storage.store("model", {}, {})
        (self.storage.path / "model.json").write_text("{")
        with self.assertRaises(CheckpointError):
            self.storage.fetch("model")


if __name__ == "__main__":
    unittest.main()
