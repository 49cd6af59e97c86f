"""
Error types for voxslice

Every failure raised by the library derives from VoxSliceError, which carries
the process exit code the command-line surface reports for it.
"""

import re
from enum import IntEnum
from typing import Optional


class ExitCode(IntEnum):
    """Process exit codes.

    The CLI returns exactly these values; library code attaches one to every
    exception so the mapping lives in a single place.
    """
    OK = 0
    VERIFICATION_FAILED = 1
    USAGE = 2
    DIVERGENCE = 3


class VoxSliceError(Exception):
    """Base exception for voxslice.

    Attributes:
        code: ExitCode the CLI reports for this error
        message: Human-readable description

    Example:
        try:
            partition = default_partition(12)
        except VoxSliceError as e:
            if e.code == ExitCode.USAGE:
                print(f"bad configuration: {e.message}")
    """

    default_code = ExitCode.USAGE

    def __init__(self, message: str, code: Optional[int] = None):
        if code is None:
            code = self.default_code
        self.code = ExitCode(code) if code in ExitCode._value2member_map_ else code
        self.message = message
        name = self.code.name if isinstance(self.code, ExitCode) else f"Code {code}"
        super().__init__(f"[{name}] {message}")

    def to_error_string(self) -> str:
        """Serialize as 'Code: X, Message: Y' (the form the CLI logs)."""
        return f"Code: {int(self.code)}, Message: {self.message}"

    @classmethod
    def from_error_string(cls, error_str: str) -> "VoxSliceError":
        """Parse an error string in the format 'Code: X, Message: Y'.

        Args:
            error_str: Serialized error

        Returns:
            VoxSliceError with the parsed code and message
        """
        match = re.match(r'Code: (\d+), Message: (.+)', error_str, re.DOTALL)
        if match:
            return cls(match.group(2), int(match.group(1)))
        # Fallback for unexpected format
        return cls(error_str, ExitCode.USAGE)


class ShapeError(VoxSliceError):
    """Operand dimensions are incompatible."""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class ConfigError(VoxSliceError):
    """Configuration value or cross-field constraint is invalid."""


class ValidationError(VoxSliceError):
    """Input data violates a documented constraint (labels, files)."""


class CodecError(ValidationError):
    """A serialized tensor, label grid or checkpoint cannot be decoded."""


class StateError(VoxSliceError):
    """An object was used in the wrong lifecycle state."""


class GenerationError(VoxSliceError):
    """Synthetic scene generation failed."""

    def __init__(self, message: str, seed: int):
        self.seed = seed
        super().__init__(f"{message} (seed={seed})")


class DivergenceError(VoxSliceError):
    """Training produced a non-finite loss."""

    default_code = ExitCode.DIVERGENCE

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"{message} at step {step}")


class GradcheckError(VoxSliceError):
    """Analytic gradient disagrees with the finite-difference estimate."""

    default_code = ExitCode.VERIFICATION_FAILED

    def __init__(self, op_name: str, max_rel_error: float, coordinate: tuple):
        self.op_name = op_name
        self.max_rel_error = max_rel_error
        self.coordinate = coordinate
        super().__init__(
            f"gradient check failed for {op_name}: "
            f"max relative error {max_rel_error:.3e} at {coordinate}"
        )
