"""Exception types shared across classkit."""


class ClassKitError(Exception):
    """Base class for all classkit errors."""


class DimensionError(ClassKitError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateBatchError(ClassKitError, ValueError):
    """Batch statistics requested over a single element per channel."""


class EmptyRegionError(ClassKitError, ValueError):
    """A reduction was asked to summarise zero elements."""


class ContractError(ClassKitError, ValueError):
    """A documented precondition of an operation was violated."""


class ConfigError(ClassKitError, ValueError):
    """Invalid configuration value; the message names the field."""


class NetpbmError(ClassKitError, ValueError):
    """Base class for PGM/PPM decoding problems."""


class NetpbmFormatError(NetpbmError):
    """Unsupported or wrong magic number."""


class NetpbmParseError(NetpbmError):
    """Malformed header or truncated payload."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(ClassKitError, ValueError):
    """Checkpoint file is malformed or does not match the expected config."""


class TrainingDiverged(ClassKitError, RuntimeError):
    """The training loss became non-finite."""

    def __init__(self, message: str, batch_ids, dump_path=None):
        super().__init__(message)
        self.batch_ids = list(batch_ids)
        self.dump_path = dump_path


class ManifestError(ClassKitError, ValueError):
    """Dataset manifest is malformed or references a missing file."""
