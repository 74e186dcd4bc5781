"""Exception hierarchy. Exit codes are consumed by the CLI error envelope."""


class MeshsplatError(Exception):
    """Base class for all package errors."""

    exit_code = 1
    code = "error"


class ContractError(MeshsplatError, ValueError):
    """A documented pre/postcondition or invariant was violated."""

    exit_code = 3
    code = "contract"


class ConfigError(MeshsplatError):
    """Run configuration is missing keys, has unknown keys, or bad values."""

    exit_code = 2
    code = "config"


class DatasetError(MeshsplatError):
    """Dataset on disk failed validation. Carries a machine-readable code."""

    exit_code = 3

    MISSING_FILE = "missing_file"
    PARSE_ERROR = "parse_error"
    DIMENSION_MISMATCH = "dimension_mismatch"
    VALIDATION_ERROR = "validation_error"

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class TrainingDivergedError(MeshsplatError):
    """Loss went non-finite during optimization."""

    exit_code = 4
    code = "training_diverged"


class EnhancerError(MeshsplatError):
    """Enhancer backend failed or returned an unusable image."""

    exit_code = 4
    code = "enhancer"


class LockError(MeshsplatError):
    """Another process holds the output-directory lock."""

    exit_code = 3
    code = "lock"
