# adacare/utils/environment.py
import os
import zlib
import logging

import numpy as np

from adacare.errors import ConfigError

logger = logging.getLogger(__name__)

ENV_PREFIX = 'ADACARE_'

# Named consumers of the root seed
SEED_CONSUMERS = ('split', 'init', 'shuffle', 'dropout', 'bootstrap', 'synth', 'gradcheck')


def env_setting(name, default=None, cast=str):
    """
    Read an ``ADACARE_<NAME>`` environment variable.

    Args:
        name (str): Setting name without the prefix, e.g. 'LOG_LEVEL'
        default: Returned when the variable is unset or blank
        cast: Converter applied to the stripped value

    Raises:
        ConfigError: If ``cast`` rejects the value (the key names the variable)
    """
    key = f"{ENV_PREFIX}{name}"
    raw = os.environ.get(key, '').strip()
    if not raw:
        return default
    try:
        return cast(raw)
    except ValueError as e:
        raise ConfigError(f"cannot parse '{raw}' ({e})", key=key)


def get_log_level(default='INFO'):
    """
    ADACARE_LOG_LEVEL when set, else ``default``; unknown names fall back to INFO.

    Returns:
        str: One of DEBUG, INFO, WARNING, ERROR, CRITICAL
    """
    level = str(env_setting('LOG_LEVEL', default)).upper()
    valid_levels = ['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL']

    if level not in valid_levels:
        logger.warning(f"Invalid log level '{level}', defaulting to INFO")
        return 'INFO'

    return level


def derive_seed(root_seed, consumer, *path):
    """
    Derive an independent seed for one consumer of the root seed.

    Args:
        root_seed (int): The run's root seed
        consumer (str): Consumer name, e.g. 'split' or 'dropout'
        *path (int): Extra integers (epoch, batch, patient) for finer streams

    Returns:
        int: A 63-bit seed, stable across platforms and Python versions

    Raises:
        ValueError: If the consumer is not one of SEED_CONSUMERS
    """
    if consumer not in SEED_CONSUMERS:
        raise ValueError(f"Unknown seed consumer '{consumer}'")
    entropy = [int(root_seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(consumer.encode('utf-8'))]
    entropy.extend(int(p) for p in path)
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return (int(state[0]) << 31) ^ int(state[1])


def rng_for(root_seed, consumer, *path):
    """Return a numpy Generator seeded for the given consumer."""
    return np.random.default_rng(derive_seed(root_seed, consumer, *path))
