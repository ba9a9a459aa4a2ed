"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PowerSMCError(Exception):
    exit_code = 3


class InputError(PowerSMCError, ValueError):
    exit_code = 1


class StateError(InputError):
    """Decode state is invalid for the model it was queried against."""


class ModelSpecError(InputError):
    """Model specification is malformed or leaves mass unterminated."""


class DomainError(InputError):
    """Argument outside the mathematical domain of the quantity."""


class CapacityError(PowerSMCError):
    exit_code = 2


class NumericalError(PowerSMCError):
    exit_code = 3


class SupportError(NumericalError):
    """A proposal failed to cover a token that was sampled or must be scored."""
