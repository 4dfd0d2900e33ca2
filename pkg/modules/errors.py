class ECTLError(Exception):
    """Base class of every error raised by the ectl modules."""


# crypto
class CryptoError(ECTLError):
    pass


class PrimeSearchExhausted(CryptoError):
    pass


class MessageOutOfRange(CryptoError):
    pass


class CiphertextOutOfRange(CryptoError):
    pass


class ScalarOutOfRange(CryptoError):
    pass


class LengthMismatch(ECTLError):
    pass


class NotDivisible(CryptoError):
    pass


class EncodeOutOfBand(CryptoError):
    pass


class OverflowDetected(CryptoError):
    pass


# design
class DesignError(ECTLError):
    pass


class NotSchur(DesignError):
    pass


class NoConvergence(DesignError):
    pass


class DegenerateB(DesignError):
    pass


class QSatTooSmall(DesignError):
    pass


class NotControllable(DesignError):
    pass


class DegreeExhausted(DesignError):
    pass


class SaturationInDomain(DesignError):
    pass


# protocol
class ProtocolError(ECTLError):
    pass


class NoGainEpoch(ProtocolError):
    pass


class EpochMismatch(ProtocolError):
    pass


class BadMagic(ProtocolError):
    pass


class BadVersion(ProtocolError):
    pass


class Truncated(ProtocolError):
    pass


class UnknownType(ProtocolError):
    pass


class MalformedPayload(ProtocolError):
    pass


# simulation
class CaptureFailed(ECTLError):
    pass


class ContainmentViolated(ECTLError):
    pass


class ConfigError(ECTLError):
    pass
