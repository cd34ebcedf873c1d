"""Exception hierarchy shared across the package."""


class MeshSplatError(Exception):
    """Base class for all package errors."""


class DegenerateRotationError(MeshSplatError):
    """Quaternion with (near-)zero norm cannot represent a rotation."""


class InvalidScaleError(MeshSplatError):
    """Scale vector with non-positive components."""


class ConfigError(MeshSplatError):
    """Inconsistent or out-of-range configuration."""


class RigError(MeshSplatError):
    """Rigged-mesh invariant violation (weights, hierarchy, indices)."""


class DegenerateFaceError(MeshSplatError):
    """Triangle with area below the degeneracy threshold."""


class DatasetError(MeshSplatError):
    """Manifest or frame data failed validation."""


class CheckpointError(MeshSplatError):
    """Checkpoint file unreadable."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint truncated or failed a section checksum."""


class NumericalAbort(MeshSplatError):
    """Non-finite value encountered during optimization; run aborted."""
