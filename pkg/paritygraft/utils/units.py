from decimal import Decimal, InvalidOperation, ROUND_HALF_UP
from typing import Union

STD_TICKS = 10000


def parse_std_to_ticks(value: Union[str, float]) -> int:
    """Exact k for a std given on the 0.0001 grid, e.g. "0.5" -> 5000."""
    try:
        amount = Decimal(str(value)).quantize(Decimal("0.0001"), rounding=ROUND_HALF_UP)
    except InvalidOperation:
        raise ValueError(f"std {value!r} is not a number.") from None
    ticks = int((amount * STD_TICKS).to_integral_value(rounding=ROUND_HALF_UP))
    if not 1 <= ticks <= STD_TICKS:
        raise ValueError("std must lie in (0, 1] on the 0.0001 grid.")
    return ticks


def ticks_to_std(ticks: int) -> float:
    return ticks / STD_TICKS


def format_ticks(ticks: int) -> str:
    return f"{(Decimal(ticks) / Decimal(STD_TICKS)):.4f}"
