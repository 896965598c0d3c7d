"""Exception hierarchy shared by every shielda module."""


class ShieldaError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ShieldaError):
    """A data document (taxonomy, rules, registry, log, scenario) is malformed."""


class IntegrityError(ShieldaError):
    """A document parsed but violates a structural invariant."""


class UnknownTargetError(IntegrityError):
    """A classification rule points at an id missing from the taxonomy."""


class InvalidTriadError(ShieldaError):
    """A handler pattern names a component outside its dimension."""

    def __init__(self, dimension: str, value: str):
        super().__init__(f"invalid {dimension} component: {value!r}")
        self.dimension = dimension
        self.value = value


class StateRecoveryError(ShieldaError):
    """Rollback or compensation could not be carried out."""


class DependencyViolation(ShieldaError):
    """Skipping a step would starve a successor that hard-depends on it."""


class UnknownCheckpoint(ShieldaError):
    pass


class MalformedLog(ShieldaError):
    pass


class DirectiveError(ShieldaError):
    """Corrective directive preconditions were not met."""


class MissingGoalError(DirectiveError):
    pass


class ScenarioConfigError(ShieldaError):
    pass


class UnknownStep(ShieldaError):
    pass


class Exhausted(ShieldaError):
    """Retry budget spent; carries the last failure and the delay schedule."""

    def __init__(self, max_attempts: int, last_failure: object, delays: list[int]):
        super().__init__(f"exhausted after {max_attempts} attempts: {last_failure}")
        self.max_attempts = max_attempts
        self.last_failure = last_failure
        self.delays = delays


class LogFull(ShieldaError):
    """An append would exceed the event log's capacity."""
