"""Exception hierarchy shared by every layer of the simulator."""


class AttestSimError(Exception):
    """Base class for all simulator errors."""


class ProvisioningError(AttestSimError):
    pass


class LifecycleError(AttestSimError):
    pass


class ChannelError(AttestSimError):
    pass


class CodecError(AttestSimError):
    pass


class RegistryError(AttestSimError):
    pass


class NotFound(RegistryError):
    """No registry record for the requested (serial, fsbl digest) pair."""


class DeviceRevoked(RegistryError):
    """The registry record exists but has been revoked."""


class HarnessError(AttestSimError):
    pass


class AccessDenied(AttestSimError):
    """Raised by memory helpers when the world-partition check refuses an access."""
