__version__ = "0.3.0"

__all__ = ("config", "datasets", "services", "utils", "commands")
