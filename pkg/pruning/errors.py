"""
Exception hierarchy for blockprune.

Each class carries the process exit code the CLI uses when it escapes a
command.
"""

from typing import Optional


class BlockPruneError(Exception):
    exit_code = 1


class PreconditionError(BlockPruneError, ValueError):
    """An input violates a documented precondition."""
    exit_code = 2


class ShapeError(PreconditionError):
    """Dimension or block-divisibility mismatch."""


class StaleCacheError(PreconditionError):
    """A forward cache no longer matches the parameters it was built from."""


class ContainerFormatError(PreconditionError):
    """A .bpmodel container or report file is malformed."""


class NonFiniteError(BlockPruneError):
    """A public operation produced NaN or Inf."""


class TrainingDivergedError(BlockPruneError):
    """The training loss or the parameters became non-finite."""

    def __init__(self, epoch: int, step: int, last_loss: Optional[float]):
        self.epoch = epoch
        self.step = step
        self.last_loss = last_loss
        last = "none" if last_loss is None else f"{last_loss:.6g}"
        super().__init__(
            f"training diverged at epoch {epoch}, step {step} (last finite loss {last}); "
            f"lower the learning rate or the momentum"
        )


class InfeasibleConstraintError(BlockPruneError):
    """The FLOPs target is below what the pruning grid can reach."""
    exit_code = 3

    def __init__(self, target: float, floor: float):
        self.target = target
        self.floor = floor
        super().__init__(
            f"FLOPs target R={target:.6g} is infeasible; "
            f"the lowest achievable ratio is {floor:.6g}"
        )
