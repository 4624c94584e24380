"""Exception types shared across the package."""


class FedImpresError(Exception):
    """Base class for all package errors."""


class ContractError(FedImpresError):
    """A caller violated an operation's contract (shape/spec mismatch)."""


class NumericError(FedImpresError):
    """A computation produced non-finite values or diverged."""


class InputError(FedImpresError):
    """Invalid argument value (bad label, exhausted pool, ...)."""


class FormatError(FedImpresError):
    """A binary file did not parse (bad magic, truncation, ...)."""


class ConfigError(FedImpresError):
    """Invalid or inconsistent experiment configuration."""


class ProtocolError(FedImpresError):
    """A federated round broke protocol (incongruent client update, ...)."""
