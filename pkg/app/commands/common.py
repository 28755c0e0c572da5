"""Exit codes and the error boundary shared by every subcommand."""

import functools
import logging
from typing import Callable

from pydantic import ValidationError

from app.exceptions import ConfigError, Fp8FlError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


def exit_code_boundary(command: Callable[..., int]) -> Callable[..., int]:
    """Turn the errors a command can raise into exit codes, logging each one."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs) -> int:
        try:
            return command(*args, **kwargs)
        except ConfigError as e:
            logger.error(f"Configuration error: {e}")
            return EXIT_CONFIG
        except ValidationError as e:
            logger.error(f"Invalid arguments: {e}")
            return EXIT_CONFIG
        except Fp8FlError as e:
            logger.error(f"{command.__name__} failed: {e}")
            return EXIT_FAILED
        except (OSError, ValueError) as e:
            logger.error(f"{command.__name__} failed: {e}")
            return EXIT_FAILED

    return wrapper
