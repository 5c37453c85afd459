import logging
import os
from dataclasses import dataclass
from typing import Optional

from dotenv import load_dotenv


@dataclass(frozen=True)
class Settings:
    report_dir: str
    seed: int
    log_level: str
    cifar_dir: Optional[str]

    @classmethod
    def from_env(cls) -> "Settings":
        load_dotenv()
        report_dir = os.getenv("PARITYGRAFT_REPORT_DIR", "./reports").strip() or "./reports"

        raw_seed = os.getenv("PARITYGRAFT_SEED", "0").strip()
        try:
            seed = int(raw_seed)
        except ValueError:
            raise ValueError(f"PARITYGRAFT_SEED must be an integer, got {raw_seed!r}.") from None
        if seed < 0:
            raise ValueError("PARITYGRAFT_SEED must be non-negative.")

        log_level = os.getenv("PARITYGRAFT_LOG_LEVEL", "INFO").strip().upper()
        if not isinstance(logging.getLevelName(log_level), int):
            raise ValueError(f"PARITYGRAFT_LOG_LEVEL {log_level!r} is not a logging level.")

        cifar_dir = os.getenv("PARITYGRAFT_CIFAR_DIR", "").strip() or None
        return cls(
            report_dir=report_dir,
            seed=seed,
            log_level=log_level,
            cifar_dir=cifar_dir,
        )
