class BlockPruneError(Exception):
    pass


class DimensionError(BlockPruneError, ValueError):
    """Operand shapes or block geometry do not line up."""


class ContractError(BlockPruneError, RuntimeError):
    """A precondition of an operation was violated."""


class RunError(BlockPruneError, RuntimeError):
    """Training diverged or a pipeline stage failed."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class EquivalenceError(BlockPruneError):
    """Compacted model deviates from its masked source."""

    def __init__(self, deviation, bound):
        super().__init__(f"max logit deviation {deviation:.3e} exceeds {bound:.0e}")
        self.deviation = deviation
        self.bound = bound


class DatasetError(BlockPruneError, ValueError):
    pass


class ConfigError(BlockPruneError, ValueError):
    pass
