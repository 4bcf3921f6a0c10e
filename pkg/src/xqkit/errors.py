"""Exception types shared across the toolkit."""


class XqError(Exception):
    """Base class for all toolkit errors."""


class ParseError(XqError):
    """Malformed FEN, ICCS token, or game-record document."""


class IllegalMoveError(XqError):
    """A move is not legal in the position it was applied to.

    ``index`` carries the move index when the failure happened while
    replaying a game record.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class DomainError(XqError):
    """Numeric argument outside its documented domain."""


class TerminalPositionError(XqError):
    """Operation requires a non-terminal position."""


class RangeError(XqError):
    """Index outside the action space."""


class ShapeMismatchError(XqError):
    """Tensor shapes incompatible at graph build time."""


class ConfigError(XqError):
    """Invalid or inconsistent configuration."""


class FormatError(XqError):
    """Corrupt or unrecognized checkpoint/file format."""


class ManifestMismatchError(XqError):
    """Checkpoint parameter manifest does not match the requested build."""


class IllegalLabelError(XqError):
    """Training label refers to a move outside the legality mask."""


class UnknownEntryError(XqError):
    """Opponent-pool operation referenced an entry not in the pool."""


class DisconnectedGraphError(XqError):
    """Elo fit requires a connected comparison graph."""
