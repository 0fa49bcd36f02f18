import os
import sys
import logging

from adacare import load_settings
from adacare.utils.environment import get_log_level

# Fix Unicode encoding issues on Windows
if sys.platform == 'win32':
    # Change stdout encoding to UTF-8
    sys.stdout.reconfigure(encoding='utf-8')
    sys.stderr.reconfigure(encoding='utf-8')


# Configure logging
def setup_logging(settings):
    # Create logs directory if it doesn't exist
    if not os.path.exists(settings.LOG_DIR):
        os.makedirs(settings.LOG_DIR)

    level = getattr(logging, get_log_level(settings.LOG_LEVEL))
    formatter = logging.Formatter(settings.LOG_FORMAT, settings.LOG_DATE_FORMAT)

    # Configure file logging with UTF-8 encoding
    file_handler = logging.FileHandler(os.path.join(settings.LOG_DIR, settings.LOG_FILE), encoding='utf-8')
    file_handler.setFormatter(formatter)
    file_handler.setLevel(level)

    # Console logging goes to stderr so command output stays clean
    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    console_handler.setLevel(level)

    # Set up root logger
    logging.basicConfig(
        level=level,
        handlers=[file_handler, console_handler]
    )

    return logging.getLogger('adacare')


if __name__ == '__main__':
    settings = load_settings()
    logger = setup_logging(settings)
    logger.info(f"Starting adacare {' '.join(sys.argv[1:])}")

    from adacare.cli import cli
    cli()
