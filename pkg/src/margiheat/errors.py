"""Exception types shared across the package."""


class MargiheatError(Exception):
    pass


class InvalidParameterError(MargiheatError, ValueError):
    pass


class InvalidInputError(MargiheatError, ValueError):
    pass


class DegenerateTargetError(MargiheatError, ValueError):
    pass


class PMFContractError(MargiheatError, ValueError):
    """A heatmap that is not a valid probability mass function reached an op that needs one."""


class ShapeError(MargiheatError, ValueError):
    pass


class DegeneratePoseError(MargiheatError, ValueError):
    pass


class AlignmentError(MargiheatError, ValueError):
    pass


class StateError(MargiheatError, RuntimeError):
    """Backward called before forward."""


class TrainingDivergedError(MargiheatError, RuntimeError):
    pass
