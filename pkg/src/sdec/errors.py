"""Exception hierarchy.

Every error raised by the package derives from :class:`SdecError`. Validation
problems (bad shapes, bad hyperparameters, bad files) additionally derive from
:class:`ValidationError`; the CLI maps those to exit code 1 and everything
else to exit code 2.
"""


class SdecError(Exception):
    pass


class ValidationError(SdecError, ValueError):
    pass


# mdp_core
class NonStochasticRow(ValidationError):
    pass


class NegativeProbability(ValidationError):
    pass


class GammaOutOfRange(ValidationError):
    pass


class UnknownEnvironment(ValidationError):
    pass


class BadParams(ValidationError):
    pass


class InvalidAction(ValidationError):
    pass


class EmptyBuffer(SdecError):
    pass


class SampleTooLarge(ValidationError):
    pass


# smoothed_bellman
class ShapeMismatch(ValidationError):
    pass


class NonPositiveLambda(ValidationError):
    pass


class MaxIterExceeded(SdecError):
    pass


class ZeroPolicyProbability(ValidationError):
    pass


# function_approx
class KindMismatch(ValidationError):
    pass


class ActionOutOfBounds(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


# saddle_objective
class EmptyBatch(ValidationError):
    pass


class SingularSystem(SdecError):
    pass


class SegmentTooShort(ValidationError):
    pass


class TrajectoryTooShort(ValidationError):
    pass


class ZetaOutOfRange(ValidationError):
    pass


# optimizer
class NotADistribution(ValidationError):
    pass


class ZeroEntry(ValidationError):
    pass


class DivergedInnerSolve(SdecError):
    pass


class BadIteration(ValidationError):
    pass


# training / config
class NonFiniteLoss(SdecError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConfigInvalid(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class UnknownKey(ValidationError):
    pass


class InvalidValue(ValidationError):
    pass


# command line
class UnknownSubcommand(ValidationError):
    pass
