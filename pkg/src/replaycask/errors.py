"""Exception hierarchy shared by every replaycask module."""


class ReplayCaskError(Exception):
    """Base class for all errors raised by replaycask."""


class SchemaInvalid(ReplayCaskError):
    pass


class SchemaMismatch(ReplayCaskError):
    pass


class AmbiguousMatch(ReplayCaskError):
    """More than one vanished UID lies within the match radius of a new entity."""


class CorruptIndex(ReplayCaskError):
    pass


class NonZeroPadding(ReplayCaskError):
    pass


class IoFailure(ReplayCaskError, OSError):
    pass


class BadMagic(ReplayCaskError):
    pass


class UnfinalizedContainer(ReplayCaskError):
    pass


class ChecksumMismatch(ReplayCaskError):
    pass


class VersionUnsupported(ReplayCaskError):
    pass


class EntryOutOfRange(ReplayCaskError, IndexError):
    pass


class UnknownField(ReplayCaskError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown field"


class SpecInvalid(ReplayCaskError, ValueError):
    pass
