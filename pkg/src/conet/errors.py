"""Exception hierarchy shared by every module."""


class ConetError(Exception):
    """Base class for all package errors."""


class InputError(ConetError, ValueError):
    """Rejected input: bad shapes, out-of-range arguments, unbound variables."""


class GraphError(InputError):
    """The network graph is malformed (cycle, dangling edge, bad combine mode)."""

    def __init__(self, message, *, edge=None, node=None):
        super().__init__(message)
        self.edge = edge
        self.node = node


class ConstraintConflict(GraphError):
    """Channel constraints cannot be satisfied by positive sizes."""

    def __init__(self, message, nodes=()):
        super().__init__(message)
        self.nodes = tuple(nodes)


class FormatError(InputError):
    """A snapshot or graph file could not be decoded."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IncompatibleError(InputError):
    """Stored tensors do not match the requested channel sizes."""


class ConsistencyError(ConetError):
    """An internal invariant was violated."""


class TrainerError(ConetError, RuntimeError):
    """Training diverged or a trainer failed during a search trial."""

    def __init__(self, message, *, epoch=None, trial=None):
        super().__init__(message)
        self.epoch = epoch
        self.trial = trial
