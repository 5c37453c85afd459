import logging
import sys
from typing import Optional, Sequence

from paritygraft.app import GraftApp
from paritygraft.config import Settings


def main(argv: Optional[Sequence[str]] = None) -> int:
    settings = Settings.from_env()
    logging.basicConfig(
        level=settings.log_level,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    )
    return GraftApp(settings).run(argv)


if __name__ == "__main__":
    sys.exit(main())
