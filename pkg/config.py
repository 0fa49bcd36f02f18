# config.py
import os

from dotenv import load_dotenv

# Pick up a local .env file if one exists
load_dotenv()


class Config:
    # Logging configuration
    LOG_LEVEL = os.environ.get('ADACARE_LOG_LEVEL', 'INFO')
    LOG_DIR = os.environ.get('ADACARE_LOG_DIR') or 'logs'
    LOG_FILE = os.environ.get('ADACARE_LOG_FILE') or 'system.log'
    LOG_FORMAT = '[%(asctime)s] [%(levelname)s] %(message)s'
    LOG_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

    # Run settings
    DEFAULT_OUT_DIR = os.environ.get('ADACARE_OUT_DIR') or 'runs/default'
    DEFAULT_THREADS = int(os.environ.get('ADACARE_THREADS', 1))

    # Gradient check verdict threshold (max relative error)
    GRADCHECK_TOLERANCE = float(os.environ.get('ADACARE_GRADCHECK_TOLERANCE', 1e-4))

    # Preprocessing defaults
    MAX_SEQUENCE_LENGTH = 400
    SPLIT_FRACTIONS = (0.7225, 0.1275, 0.15)  # 15% test, then 85/15 train/valid
    BOOTSTRAP_RESAMPLES = 1000


class DevelopmentConfig(Config):
    LOG_LEVEL = os.environ.get('ADACARE_LOG_LEVEL', 'DEBUG')


class ProductionConfig(Config):
    LOG_LEVEL = os.environ.get('ADACARE_LOG_LEVEL', 'WARNING')


class TestingConfig(Config):
    LOG_LEVEL = 'DEBUG'
    DEFAULT_OUT_DIR = 'runs/test'
    DEFAULT_THREADS = 1


config = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
    'default': Config
}


# Architecture presets. "esrd" and "mimic" are the published settings for the
# two cohorts; "tiny" is the gradient-check network; "desk" keeps synthetic
# experiments laptop-sized.
MODEL_PRESETS = {
    'esrd': {
        'hidden_units': 64,
        'conv_filters': 64,
        'kernel_size': 2,
        'dilation_rates': [1, 2, 3],
        'compress_ratio': 2,
        'dropout': 0.5,
    },
    'mimic': {
        'hidden_units': 128,
        'conv_filters': 64,
        'kernel_size': 2,
        'dilation_rates': [1, 3, 5],
        'compress_ratio': 4,
        'dropout': 0.5,
    },
    'tiny': {
        'n_features': 3,
        'hidden_units': 4,
        'conv_filters': 2,
        'kernel_size': 2,
        'dilation_rates': [1, 2, 3],
        'compress_ratio': 2,
        'dropout': 0.0,
    },
    'desk': {
        'hidden_units': 32,
        'conv_filters': 16,
        'kernel_size': 2,
        'dilation_rates': [1, 3, 5],
        'compress_ratio': 2,
        'dropout': 0.5,
    },
}
