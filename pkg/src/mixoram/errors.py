"""Exception types shared across the package."""


class MixOramError(Exception):
    """Base class for all protocol and configuration errors."""


class UnsupportedKappa(MixOramError):
    """Security parameter is not one of the supported key lengths."""


class IdentityElement(MixOramError):
    """A group identity element appeared where a proper element is required."""


class SizeMismatch(MixOramError):
    """A record, cell or batch does not have the configured size."""


class CounterOutOfRange(MixOramError):
    """A counter-mode slot counter is outside the database range."""


class OutOfRange(MixOramError):
    """A slot index is outside the array bounds."""


class Indivisible(MixOramError):
    """The mix count does not divide the database size."""


class NotAProbabilityVector(MixOramError):
    """A weight vector does not sum to one."""


class BadInstruction(MixOramError):
    """A mix instruction is malformed or missing design-required fields."""


class MissingBatch(MixOramError):
    """A peer's record batch never arrived for a synchronised round."""


class PhaseOrderViolation(MixOramError):
    """A rebuild phase message arrived outside the unwrap/ED/wrap order."""


class CacheFull(MixOramError):
    """The client cache has no free slot; an eviction is required."""


class ConfigMismatch(MixOramError):
    """Scenario or deployment parameters are inconsistent."""


class StaleState(MixOramError):
    """Client state does not cover the requested lookup epoch."""


class ExhaustedHistory(MixOramError):
    """Trial-and-error decryption ran out of epochs without a label match."""
