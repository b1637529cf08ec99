import dataclasses
import json
import logging
import typing
from pathlib import Path
from typing import Any, Callable, Dict, Mapping, Optional, Union

import torch
from environs import Env

from cybervax.exceptions import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = "CYBERVAX_"


class ConfigSection:
    """Mixin for dataclass configuration sections.

    Provides JSON-friendly round trips and strict key checking. Nested sections are
    rebuilt from their own ``from_dict``.
    """

    def validate(self):
        return self

    def to_dict(self) -> dict:
        payload = {}
        for field in dataclasses.fields(self):
            value = getattr(self, field.name)
            if isinstance(value, ConfigSection):
                value = value.to_dict()
            elif isinstance(value, tuple):
                value = list(value)
            payload[field.name] = value
        return payload

    @classmethod
    def from_dict(cls, payload: Optional[Mapping[str, Any]] = None):
        payload = dict(payload or {})
        names = {field.name for field in dataclasses.fields(cls)}
        unknown = sorted(set(payload) - names)
        if unknown:
            raise ConfigError(f"Unknown keys for {cls.__name__}: {unknown}")

        hints = typing.get_type_hints(cls)
        kwargs = {}
        for name, value in payload.items():
            hint = hints.get(name)
            if (
                isinstance(hint, type)
                and issubclass(hint, ConfigSection)
                and isinstance(value, Mapping)
            ):
                value = hint.from_dict(value)
            elif isinstance(value, list):
                value = tuple(value)
            kwargs[name] = value

        try:
            return cls(**kwargs).validate()
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Invalid {cls.__name__}: {e}") from e

    def replace(self, **changes):
        return dataclasses.replace(self, **changes).validate()


def load_config_file(path: Union[str, Path]) -> dict:
    """
    Load a JSON configuration file.

    :param path: The file path
    :return: The decoded configuration tree
    """
    path = Path(path)
    try:
        with open(path) as f:
            payload = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"Config file {path} does not exist") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON - {e}") from e

    if not isinstance(payload, dict):
        raise ConfigError(f"Config file {path} must contain a JSON object")

    return payload


def deep_merge(base: Mapping, override: Mapping) -> dict:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def set_dotted(tree: dict, dotted_key: str, value: Any) -> dict:
    node = tree
    *parents, leaf = dotted_key.split(".")
    for parent in parents:
        node = node.setdefault(parent, {})
    node[leaf] = value
    return tree


def get_dotted(tree: Mapping, dotted_key: str, default: Any = None) -> Any:
    node: Any = tree
    for part in dotted_key.split("."):
        if not isinstance(node, Mapping) or part not in node:
            return default
        node = node[part]
    return node


def read_environment(
    casters: Mapping[str, Callable[[Env, str], Any]], read_dotenv: bool = True
) -> Dict[str, Any]:
    """
    Read ``CYBERVAX_`` prefixed variables.

    :param casters: Map of variable name (without prefix) to a reader taking the env and the name
    :param read_dotenv: Whether to load a ``.env`` file first
    :return: The values that are set in the environment
    """
    env = Env()
    if read_dotenv:
        env.read_env()

    values = {}
    with env.prefixed(ENV_PREFIX):
        for name, caster in casters.items():
            try:
                value = caster(env, name)
            except Exception as e:
                raise ConfigError(f"Invalid value for {ENV_PREFIX}{name} - {e}") from e
            if value is not None:
                values[name] = value

    return values


def read_log_level(read_dotenv: bool = True) -> int:
    env = Env()
    if read_dotenv:
        env.read_env()
    with env.prefixed(ENV_PREFIX):
        return env.log_level("LOG_LEVEL", logging.INFO)


def select_device(device_name: str) -> torch.device:
    name = str(device_name).strip().lower()
    if name.startswith("cuda"):
        if not torch.cuda.is_available():
            raise ConfigError(
                f"Device {device_name} was requested but CUDA is not available"
            )
        return torch.device(name)
    if name == "cpu":
        return torch.device("cpu")
    raise ConfigError(f"Unsupported device {device_name}, use cpu or cuda[:index]")
