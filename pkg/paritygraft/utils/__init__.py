__all__ = ("reports", "units")
