"""Exception hierarchy shared by every engine and tool."""


class StagecoachError(Exception):
    """Base class for all errors raised by this package."""


# -- stream / data model ----------------------------------------------------

class DuplicateName(StagecoachError):
    pass


class InvalidShape(StagecoachError):
    pass


class StepAlreadyOpen(StagecoachError):
    pass


class StepNotOpen(StagecoachError):
    pass


class SizeMismatch(StagecoachError):
    pass


class SelectionOutOfBounds(StagecoachError):
    pass


class NotOwner(StagecoachError):
    """Scalar put attempted from a rank other than the designated writer."""


class DuplicatePut(StagecoachError):
    """Same variable put twice within one step."""


# -- container / on-disk format ---------------------------------------------

class IoFailure(StagecoachError):
    pass


class BadMagic(StagecoachError):
    pass


class ChecksumMismatch(StagecoachError):
    pass


class IncompleteStep(StagecoachError):
    pass


# -- compression ------------------------------------------------------------

class CodecError(StagecoachError):
    pass


class SizeNotMultiple(StagecoachError):
    pass


# -- aggregation / transport ------------------------------------------------

class InvalidAggregatorCount(StagecoachError):
    pass


class TransportFailure(StagecoachError):
    pass


# -- staging ----------------------------------------------------------------

class BindFailure(StagecoachError):
    pass


class ConnectFailure(StagecoachError):
    pass


class ProtocolError(StagecoachError):
    pass


class QueueOverflow(StagecoachError):
    pass


class EndOfStream(StagecoachError):
    """Producer finished; no further steps will arrive."""


# -- burst buffer -----------------------------------------------------------

class DrainVerifyFailure(StagecoachError):
    pass


# -- reader -----------------------------------------------------------------

class RankMismatch(StagecoachError):
    pass


class VariableNotFound(StagecoachError):
    pass


class StepNotFound(StagecoachError):
    pass


# -- bench ------------------------------------------------------------------

class ConfigError(StagecoachError):
    pass


class ConsumerLaunchFailure(StagecoachError):
    pass
