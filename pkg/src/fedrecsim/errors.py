"""Exception types shared across the simulator."""


class FedRecSimError(Exception):
    """Base class for all simulator errors."""


class ConfigError(FedRecSimError):
    """Invalid configuration value or combination."""


class DataFormatError(FedRecSimError):
    """Malformed interaction file or record."""


class ContractError(FedRecSimError):
    """A caller violated an operation precondition (e.g. dimension mismatch)."""


class NumericalError(FedRecSimError):
    """Non-finite value reached a place where it must abort the run."""
