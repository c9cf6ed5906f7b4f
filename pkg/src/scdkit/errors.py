"""Exception types shared across the package.

Every error raised on a contract violation carries a short machine-readable
code so the CLI can emit ``ERROR <code>: <msg>`` lines.
"""


class ScdkitError(Exception):
    code = "INTERNAL"


class ShapeError(ScdkitError):
    """Operand extents do not conform for a primitive or layer."""

    code = "SHAPE"

    def __init__(self, op, detail):
        super().__init__(f"{op}: {detail}")
        self.op = op


class NumericsError(ScdkitError):
    """Non-finite value produced, or a numerically invalid input (zero norm)."""

    code = "NUMERIC"


class RegionError(ScdkitError):
    """Invalid or degenerate box / proposal constraints infeasible."""

    code = "REGION"


class ConfigError(ScdkitError):
    code = "CONFIG"


class CheckpointError(ScdkitError):
    code = "CHECKPOINT"


class DataError(ScdkitError):
    code = "DATA"


class TrainingError(ScdkitError):
    """Training diverged or failed a sanity threshold."""

    code = "TRAINING"
