import pytest

from paritygraft.utils.units import format_ticks, parse_std_to_ticks, ticks_to_std


@pytest.mark.parametrize(
    "text, ticks",
    [("0.5", 5000), ("0.2470", 2470), ("1", 10000), ("0.0001", 1), ("0.00005", 1), (0.25, 2500)],
)
def test_parse_std_to_ticks(text, ticks):
    assert parse_std_to_ticks(text) == ticks


@pytest.mark.parametrize("text", ["0", "0.00004", "1.5", "-0.5", "half"])
def test_parse_std_rejects_values_off_the_grid(text):
    with pytest.raises(ValueError):
        parse_std_to_ticks(text)


def test_tick_formatting():
    assert ticks_to_std(5000) == 0.5
    assert format_ticks(5000) == "0.5000"
    assert format_ticks(2470) == "0.2470"
