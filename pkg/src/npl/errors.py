"""Exception types shared across the package."""


class NplError(Exception):
    """Base class for all package-specific errors."""


class Malformed(NplError):
    """Raised when wire bytes cannot be decoded.

    Carries the byte offset at which decoding failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class MtuTooSmall(NplError):
    """MTU below the IPv4 legal minimum of 68 bytes."""


class CannotFragment(NplError):
    """Packet has the DF flag set."""


class IncompleteHole(NplError):
    """Fragment set leaves a gap (or lacks a terminal fragment)."""


class ConflictingLength(NplError):
    """Terminal fragment implies a total length another fragment already exceeds."""


class SlackInsufficient(NplError):
    """No 16-bit adjustment at the slack offset can equalize the sums."""


# The fragment forger propagates checksum failures under this name.
ChecksumUnfixable = SlackInsufficient


class SpoofingForbidden(NplError):
    """Host without spoofing capability tried to forge a source address."""


class NonLinearIpid(NplError):
    """IPID samples do not fit a linear counter within tolerance."""


class DiscoveryUnavailable(NplError):
    """No upstream-discovery strategy applies to this target."""


class InsufficientPool(NplError):
    """Sample size exceeds the generated pool."""


class BootNoServers(NplError):
    """DNS resolution produced no usable server addresses at boot."""


class ParseError(NplError):
    """Scenario file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(NplError):
    """Scenario config parsed but violates a constraint."""

    def __init__(self, message, key=None, line=None):
        if key is not None:
            message = f"{message} (key: {key})"
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.key = key
        self.line = line
