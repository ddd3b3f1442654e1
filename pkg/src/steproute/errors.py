"""Exception hierarchy shared across the routing engine."""


class SteprouteError(Exception):
    """Base class for all engine errors."""


class InvariantViolation(SteprouteError):
    """A domain invariant does not hold; ``field`` names the offender."""

    def __init__(self, field: str, message: str = ""):
        self.field = field
        super().__init__(f"invariant violated on {field!r}" + (f": {message}" if message else ""))


class AppendAfterTermination(SteprouteError):
    """Attempted to extend a trace that was already terminated."""


class MaxStepsExceeded(SteprouteError):
    """Attempted to extend a trace past its step cap."""


class EmptyTrace(SteprouteError):
    """Operation requires at least one step."""


class SteppedTerminal(SteprouteError):
    """Attempted a latent transition out of the absorbing terminal class."""


class PolicyFailure(SteprouteError):
    """A routing-policy callback raised; the cause is chained."""


class ParseError(SteprouteError):
    """Malformed serialized input; carries the 1-based line number."""

    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"line {line}: {message}")


class EmptyDataset(SteprouteError):
    """Calibration/fit input was empty."""


class InsufficientSamples(SteprouteError):
    """Too few labeled samples for a class; carries the class name."""

    def __init__(self, class_name: str, count: int, required: int):
        self.class_name = class_name
        super().__init__(f"class {class_name}: {count} samples, need at least {required}")


class NoSamples(SteprouteError):
    """No labeled steps for a generator origin; carries the origin name."""

    def __init__(self, origin: str):
        self.origin = origin
        super().__init__(f"no labeled steps with origin {origin}")


class OutOfDomain(SteprouteError):
    """Observation lies outside the unit square."""


class DegenerateBelief(SteprouteError):
    """Belief update lost all probability mass."""


class NonFiniteInput(SteprouteError):
    """A network input contained NaN or infinity."""


class NonFiniteGradient(SteprouteError):
    """A gradient contained NaN or infinity; the update was aborted."""


class LengthMismatch(SteprouteError):
    """Paired sequences differ in length."""


class DegenerateGap(SteprouteError):
    """Weak and strong endpoint accuracies coincide."""


class Unreachable(SteprouteError):
    """The requested performance level exceeds the curve's maximum."""

    def __init__(self, target: float, maximum: float):
        self.target = target
        self.maximum = maximum
        super().__init__(f"target {target} unreachable (curve max {maximum})")


class EmptyCurve(SteprouteError):
    """The trade-off curve has no sweep points."""


class SingleClass(SteprouteError):
    """Ranking metric needs both correct and incorrect traces."""


class SolverBudgetExceeded(SteprouteError):
    """Planner hit its iteration/time cap; carries partial results."""

    def __init__(self, message: str, partial=None):
        self.partial = partial
        super().__init__(message)


class ConfigError(SteprouteError):
    """Invalid run configuration; ``path`` is the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")
