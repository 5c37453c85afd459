import pytest

from paritygraft.config import Settings


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for name in ("PARITYGRAFT_REPORT_DIR", "PARITYGRAFT_SEED", "PARITYGRAFT_LOG_LEVEL", "PARITYGRAFT_CIFAR_DIR"):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setattr("paritygraft.config.load_dotenv", lambda: None)


def test_defaults():
    settings = Settings.from_env()
    assert settings.report_dir == "./reports"
    assert settings.seed == 0
    assert settings.log_level == "INFO"
    assert settings.cifar_dir is None


def test_values_from_env(monkeypatch):
    monkeypatch.setenv("PARITYGRAFT_REPORT_DIR", "/tmp/out")
    monkeypatch.setenv("PARITYGRAFT_SEED", " 42 ")
    monkeypatch.setenv("PARITYGRAFT_LOG_LEVEL", "debug")
    monkeypatch.setenv("PARITYGRAFT_CIFAR_DIR", "/data/cifar")
    settings = Settings.from_env()
    assert settings == Settings("/tmp/out", 42, "DEBUG", "/data/cifar")


@pytest.mark.parametrize(
    "name, value",
    [("PARITYGRAFT_SEED", "abc"), ("PARITYGRAFT_SEED", "-1"), ("PARITYGRAFT_LOG_LEVEL", "LOUD")],
)
def test_invalid_values(monkeypatch, name, value):
    monkeypatch.setenv(name, value)
    with pytest.raises(ValueError):
        Settings.from_env()
