"""Exception hierarchy shared by all envsynth modules."""

from __future__ import annotations

from typing import Any, Optional


class EnvSynthError(Exception):
    """Base class for every error raised by this package."""


class ParseError(EnvSynthError):
    """Malformed input text (bad JSON, wrong top-level shape, dangling references)."""


class SpecError(EnvSynthError):
    """A parsed document violates a type invariant."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path
        self.message = message


class PathError(EnvSynthError):
    """A state path string is malformed."""


class ProviderError(EnvSynthError):
    """The similarity provider could not produce scores."""


class RefinerError(EnvSynthError):
    """The remote graph refiner was unreachable or answered garbage."""


class RemoteError(EnvSynthError):
    """A remote classifier or masker endpoint failed."""


class ExhaustedError(EnvSynthError):
    """The sampler ran out of restarts before reaching the target length."""


class TooLargeError(EnvSynthError):
    """Brute-force enumeration refused because the graph is too big."""


class ReplayError(EnvSynthError):
    """A trajectory step failed during replay."""

    def __init__(self, step_index: int, tool: str, cause: Exception):
        super().__init__(f"step {step_index} ({tool}): {cause}")
        self.step_index = step_index
        self.tool = tool
        self.cause = cause


class RuntimeToolError(EnvSynthError):
    """Errors surfaced by the environment runtime; each carries a wire code."""

    code = 1000

    def __init__(self, message: str, data: Optional[Any] = None):
        super().__init__(message)
        self.message = message
        self.data = data

    def to_wire(self) -> dict:
        err = {"code": self.code, "message": self.message}
        if self.data is not None:
            err["data"] = self.data
        return err


class UnknownTool(RuntimeToolError):
    code = 1001


class InvalidArgs(RuntimeToolError):
    code = 1002


class NoSession(RuntimeToolError):
    code = 1003


class NotLoaded(RuntimeToolError):
    code = 1003


class SchemaViolation(RuntimeToolError):
    code = 1004


class BusinessError(RuntimeToolError):
    code = 1005


class DuplicateSession(RuntimeToolError):
    code = 1006


class UnknownEnvironment(RuntimeToolError):
    code = 1007


class ExecutorError(RuntimeToolError):
    """The external executor adapter failed at the transport level."""

    code = 1008
