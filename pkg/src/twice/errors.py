"""Exception hierarchy shared across modules."""


class TwiceError(Exception):
    """Base class for all package errors."""


class ValidationError(TwiceError, ValueError):
    """Bad input detected before any computation ran."""


class SchemaMismatch(ValidationError):
    pass


class MalformedRow(ValidationError):
    def __init__(self, line, reason=""):
        self.line = line
        self.reason = reason
        msg = f"malformed row on line {line}"
        super().__init__(f"{msg}: {reason}" if reason else msg)


class DuplicateWorkerYear(ValidationError):
    def __init__(self, worker_id, year):
        self.worker_id = worker_id
        self.year = year
        super().__init__(f"worker {worker_id!r} observed more than once in year {year}")


class DegenerateSplit(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class AllWeightsZero(ValidationError):
    pass


class EmptyTrainingCell(TwiceError):
    def __init__(self, a, b):
        self.cell = (a, b)
        super().__init__(f"training complement of cell ({a}, {b}) is empty; B is too large for this panel")


class NoConvergence(TwiceError):
    def __init__(self, max_iter, last, residual):
        self.max_iter = max_iter
        self.last = last
        self.residual = residual
        super().__init__(f"no convergence after {max_iter} iterations (last change {residual:.3e})")


class NotConnected(ValidationError):
    pass


class SingularControls(TwiceError):
    pass


class SingularDesign(TwiceError):
    pass


class LengthMismatch(ValidationError):
    pass


class UnknownFeature(ValidationError):
    pass


class EmptyGrid(ValidationError):
    pass


class DegenerateSupport(ValidationError):
    pass


class MissingArtifact(ValidationError):
    def __init__(self, stage, path=None):
        self.stage = stage
        self.path = path
        where = f" ({path})" if path else ""
        super().__init__(f"missing artifact from stage {stage!r}{where}")


class ConfigInvalid(ValidationError):
    def __init__(self, key, reason=""):
        self.key = key
        super().__init__(f"invalid config key {key!r}" + (f": {reason}" if reason else ""))


class InsufficientEvents(TwiceError):
    """A quartile transition with no qualifying movers. Collected in event-study output, not raised."""

    def __init__(self, pair):
        self.pair = tuple(pair)
        super().__init__(f"no qualifying movers for quartile transition {self.pair[0]} -> {self.pair[1]}")


class ZeroVariance(TwiceError):
    pass
