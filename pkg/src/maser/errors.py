"""Exception hierarchy shared by every maser module."""

from __future__ import annotations


class MaserError(Exception):
    """Base class for all errors raised by this package."""


class ParameterError(MaserError, ValueError):
    """Invalid scheme, ring or sparsification parameters."""


class CapacityError(MaserError, ValueError):
    """A payload does not fit in the available slots."""


class InputError(MaserError, ValueError):
    """Malformed or inconsistent caller input."""


class FormatError(MaserError, ValueError):
    """Bytes on disk or on the wire do not parse."""


class ConfigError(MaserError, ValueError):
    """An experiment configuration failed validation.

    ``key`` carries the dotted path of the offending entry, e.g. ``experiment.kappa``.
    """

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class ProtocolError(MaserError):
    """A party deviated from the round protocol."""


class Abort(ProtocolError):
    """A round was aborted; ``phase`` and ``round`` say where."""

    def __init__(self, message: str, phase: str | None = None, round: int | None = None):
        self.phase = phase
        self.round = round
        where = []
        if round is not None:
            where.append(f"round {round}")
        if phase is not None:
            where.append(f"phase {phase}")
        prefix = f"[{', '.join(where)}] " if where else ""
        super().__init__(prefix + message)
        self.reason = message
