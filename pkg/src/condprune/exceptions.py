"""Exception hierarchy. Every error raised on purpose derives from PruningError."""


class PruningError(Exception):
    pass


class MalformedManifest(PruningError):
    pass


class ShapeMismatch(PruningError):
    pass


class ChainBroken(PruningError):
    pass


class IoFailure(PruningError, OSError):
    pass


class InvalidSpec(PruningError, ValueError):
    pass


class InvalidRate(PruningError, ValueError):
    pass


class CursorMismatch(PruningError):
    pass


class InfeasibleBudget(PruningError):
    pass


class PlanMismatch(PruningError):
    pass


class EmptyLayer(PruningError):
    pass


class DivergedParameters(PruningError, FloatingPointError):
    pass


class ShapeError(PruningError, ValueError):
    pass


class NoFeasibleAssignment(PruningError):
    pass


class CorruptPolicy(PruningError):
    pass
