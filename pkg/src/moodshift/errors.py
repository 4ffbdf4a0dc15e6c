"""Exception hierarchy shared by the pipeline; each class carries a CLI exit code."""

from __future__ import annotations


class MoodShiftError(Exception):
    exit_code = 1


class ConfigError(MoodShiftError, ValueError):
    """Bad configuration or model construction request."""

    exit_code = 2


class ValidationError(MoodShiftError, ValueError):
    """A value or record violates a domain invariant."""

    exit_code = 3


class DataError(MoodShiftError):
    exit_code = 3


class FrameGapError(DataError):
    def __init__(self, video_id: str, missing: list[int]):
        self.video_id = video_id
        self.missing = list(missing)
        super().__init__(f"video {video_id!r}: missing frame indices {self.missing}")


class FrameDecodeError(DataError):
    pass


class InferenceError(MoodShiftError, ValueError):
    exit_code = 3


class DivergenceError(MoodShiftError, FloatingPointError):
    exit_code = 4

    def __init__(self, epoch: int, loss: float):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"non-finite training loss {loss!r} at epoch {epoch}")
