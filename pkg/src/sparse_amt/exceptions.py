"""Error types shared across the package."""


class InputError(ValueError):
    """Invalid user-supplied input (bad file, out-of-range value, shape mismatch)."""


class ContractViolation(RuntimeError):
    """An internal invariant was broken (fully masked row, non-finite activations, ...)."""
