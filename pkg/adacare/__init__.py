# adacare/__init__.py
import logging

from config import config
from adacare.utils.environment import env_setting

__version__ = "0.1.0"

# Create logger
logger = logging.getLogger(__name__)


def load_settings(config_name=None):
    """Return the settings class for ``config_name`` (default: $ADACARE_ENV, then 'default')."""
    config_name = config_name or env_setting('ENV', 'default')
    if config_name not in config:
        logger.warning(f"Unknown settings '{config_name}', using defaults")
        config_name = 'default'
    return config[config_name]
