import json
import logging
import os
import pickle
import tempfile
from pathlib import Path
from typing import Optional, Tuple, Union

import torch

from cybervax.exceptions import CheckpointError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


def atomic_write_bytes(path: Union[str, Path], content: bytes) -> Path:
    """Write to a temporary sibling then rename over the destination."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(content)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise
    return path


def atomic_write_text(path: Union[str, Path], content: str) -> Path:
    return atomic_write_bytes(path, content.encode("utf-8"))


def atomic_write_json(path: Union[str, Path], payload) -> Path:
    return atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


class CheckpointStorageInterface:
    def store(self, name: str, state: dict, metadata: dict):
        raise NotImplementedError

    def fetch(self, name: str) -> Optional[Tuple[dict, dict]]:
        raise NotImplementedError

    def exists(self, name: str) -> bool:
        raise NotImplementedError

    def require(self, name: str) -> Tuple[dict, dict]:
        fetched = self.fetch(name)
        if fetched is None:
            raise CheckpointError(f"Missing checkpoint {name}", name)
        return fetched


class LocalCheckpointStorage(CheckpointStorageInterface):
    """Checkpoints as a ``torch.save`` archive plus a JSON sidecar per name."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def store(self, name: str, state: dict, metadata: dict):
        metadata = dict(metadata)
        metadata.setdefault("format_version", FORMAT_VERSION)

        with tempfile.SpooledTemporaryFile() as buffer:
            torch.save(state, buffer)
            buffer.seek(0)
            atomic_write_bytes(self.__get_path(name, "pt"), buffer.read())
        atomic_write_json(self.__get_path(name, "json"), metadata)
        logger.info(f"Stored checkpoint {name}", extra={"path": str(self.path)})

    def fetch(self, name: str) -> Optional[Tuple[dict, dict]]:
        state_path = self.__get_path(name, "pt")
        metadata_path = self.__get_path(name, "json")

        if not state_path.exists() or not metadata_path.exists():
            return None

        try:
            with open(metadata_path) as f:
                metadata = json.load(f)
            state = torch.load(state_path, map_location="cpu", weights_only=False)
        except (OSError, EOFError, json.JSONDecodeError, pickle.UnpicklingError, RuntimeError) as e:
            raise CheckpointError(
                f"Failed to read checkpoint {name} - {e}", str(state_path)
            ) from e

        version = metadata.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"Checkpoint {name} has format version {version}, expected {FORMAT_VERSION}",
                str(metadata_path),
            )

        return state, metadata

    def exists(self, name: str) -> bool:
        return self.__get_path(name, "pt").exists() and self.__get_path(
            name, "json"
        ).exists()

    def __get_path(self, name: str, suffix: str) -> Path:
        return self.path / f"{name}.{suffix}"
