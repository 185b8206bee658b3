"""Exception types shared across the toolkit."""


class PareRegError(Exception):
    """Base class for all toolkit errors."""


class InputError(PareRegError):
    """Malformed or inconsistent caller input. CLI exit code 2."""


class DegenerateGeometryError(PareRegError):
    """Geometry too degenerate to continue. CLI exit code 3."""
