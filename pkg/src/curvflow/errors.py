"""Exception hierarchy shared by all modules."""


class CurvflowError(Exception):
    """Base class for every error raised by the package."""


class OutOfRange(CurvflowError):
    pass


class NotASpaceForm(CurvflowError):
    pass


class WrongSignature(CurvflowError):
    pass


class BadResolution(CurvflowError):
    pass


class DegenerateMetric(CurvflowError):
    pass


class NotSpacelike(CurvflowError):
    pass


class OutsideCone(CurvflowError):
    pass


class NonPositiveArgument(CurvflowError):
    pass


class DegenerateSpread(CurvflowError):
    pass


class FlowError(CurvflowError):
    """Numerical failure during a flow; carries the partial trace if any."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class LostAdmissibility(FlowError):
    pass


class LostSpacelike(FlowError):
    pass


class StepUnderflow(FlowError):
    pass


class MeanCurvatureFloor(FlowError):
    pass


class Diverged(FlowError):
    """The solution or the time step stopped being finite."""


class UnsupportedModel(CurvflowError):
    pass


class NonPositiveSliceH(CurvflowError):
    pass


class NewtonStall(CurvflowError):
    pass


class LinearSolveFail(CurvflowError):
    pass


class IndefiniteCoefficient(CurvflowError):
    pass


class NonMonotone(CurvflowError):
    pass


class ConfigError(CurvflowError):
    pass
