class PreconditionError(ValueError):
    """Raised when an operation is called with inputs outside its contract."""
