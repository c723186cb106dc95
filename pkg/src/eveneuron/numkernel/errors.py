class NonFiniteError(FloatingPointError):
    """A NaN or infinity surfaced in a value or gradient."""
