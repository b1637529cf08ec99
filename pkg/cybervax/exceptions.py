from typing import Optional, Sequence


class CyberVaxError(Exception):
    pass


class ConfigError(CyberVaxError):
    pass


class ParameterError(CyberVaxError):
    pass


class DimensionError(CyberVaxError):
    def __init__(self, message: str, expected: Optional[Sequence] = None, actual=None):
        self.expected = tuple(expected) if expected is not None else None
        self.actual = tuple(actual) if actual is not None else None
        super().__init__(message)


class MaskError(CyberVaxError):
    pass


class MetricError(CyberVaxError):
    pass


class DataError(CyberVaxError):
    pass


class CheckpointError(CyberVaxError):
    def __init__(self, message: str, path: Optional[str] = None):
        self.path = path
        super().__init__(message)


class VaccinationError(CyberVaxError):
    pass


class NeutralisationError(CyberVaxError):
    pass


class NonFiniteLossError(CyberVaxError):
    def __init__(self, step: int, components: dict, snapshot_path: Optional[str] = None):
        self.step = step
        self.components = components
        self.snapshot_path = snapshot_path
        super().__init__(f"Non-finite loss encountered at step {step}: {components}")
