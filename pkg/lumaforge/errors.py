"""Exception hierarchy shared by every lumaforge module."""
from __future__ import annotations

from typing import Optional, Tuple


class LumaforgeError(Exception):
    """Base class for all errors raised by lumaforge."""


class ContractError(LumaforgeError, ValueError):
    """A caller broke an API precondition (color space, shape, value domain)."""


class ParameterError(LumaforgeError, ValueError):
    """An operation parameter lies outside its admissible interval."""

    def __init__(self, op: str, param: str, value: float,
                 interval: Optional[Tuple[float, float]] = None, reason: str = ""):
        self.op = op
        self.param = param
        self.value = value
        self.interval = interval
        if reason:
            msg = f"{op}.{param}={value!r}: {reason}"
        elif interval is not None:
            msg = f"{op}.{param}={value!r} outside [{interval[0]}, {interval[1]}]"
        else:
            msg = f"{op}.{param}={value!r} is not admissible"
        super().__init__(msg)


class ImageIOError(LumaforgeError, OSError):
    """An image file could not be read or written."""


class IngestError(LumaforgeError):
    """The COCO annotation document is malformed or inconsistent."""


class ConfigError(LumaforgeError):
    """A configuration document failed schema or semantic validation."""


class ManifestError(LumaforgeError):
    """A pair manifest is missing, malformed or fails its schema."""
