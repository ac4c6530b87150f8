"""Exception hierarchy shared by the simulator modules."""


class C4SimError(Exception):
    """Base class for every error raised by c4sim."""


class TopologyError(C4SimError):
    """Inconsistent fabric construction parameters."""


class RoutingError(C4SimError):
    """No usable next hop (ECMP black hole)."""


class UnreachableError(RoutingError):
    def __init__(self, switch: str, message: str = ""):
        self.switch = switch
        super().__init__(message or f"no up path beyond {switch}")


class UnknownLinkError(C4SimError, KeyError):
    pass


class ScheduleError(C4SimError):
    pass


class AllocationError(C4SimError):
    pass


class ProbeCoverageError(C4SimError):
    pass


class ValidationError(C4SimError):
    """Scenario or configuration rejected before any event executes."""


class TraceFormatError(C4SimError):
    def __init__(self, lineno: int, message: str):
        self.lineno = lineno
        super().__init__(f"line {lineno}: {message}")


class LedgerError(C4SimError):
    def __init__(self, orphans):
        self.orphans = list(orphans)
        super().__init__(f"unmatched incident lifecycles: {self.orphans}")


class ConfigError(ValidationError):
    """Malformed or inconsistent configuration; carries the source position when known."""

    def __init__(self, message: str, lineno: int | None = None, colno: int | None = None):
        self.lineno, self.colno = lineno, colno
        where = f"line {lineno}, column {colno}: " if lineno is not None else ""
        super().__init__(where + message)
