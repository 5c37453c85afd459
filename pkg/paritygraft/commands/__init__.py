__all__ = (
    "core",
    "inject",
    "train",
    "evaluate",
    "badnets",
    "stdsearch",
    "metrics",
    "defense",
)
