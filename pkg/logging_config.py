import logging
import logging.handlers
import os
from typing import Optional

from dotenv import load_dotenv

load_dotenv()

LOG_DIR = os.getenv('SFVLAB_LOG_DIR', 'logs')
LOG_LEVEL = os.getenv('SFVLAB_LOG_LEVEL', 'INFO')
MAX_LOG_BYTES = 10485760  # 10MB


# Configure logging
def setup_logging(log_dir: Optional[str] = None, level: Optional[str] = None) -> logging.Logger:
    """Attach rotating file and console handlers once per process."""
    log_dir = log_dir or LOG_DIR
    level = getattr(logging, (level or LOG_LEVEL).upper(), logging.INFO)
    os.makedirs(log_dir, exist_ok=True)

    root = logging.getLogger()
    if getattr(root, '_sfvlab_configured', False):
        return logging.getLogger('sfvlab')

    # Create formatters
    file_formatter = logging.Formatter(
        '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    console_formatter = logging.Formatter(
        '%(asctime)s - %(levelname)s - %(message)s'
    )

    # File handler for all logs
    all_handler = logging.handlers.RotatingFileHandler(
        os.path.join(log_dir, 'all.log'),
        maxBytes=MAX_LOG_BYTES,
        backupCount=5
    )
    all_handler.setFormatter(file_formatter)
    all_handler.setLevel(level)

    # File handler for errors
    error_handler = logging.handlers.RotatingFileHandler(
        os.path.join(log_dir, 'error.log'),
        maxBytes=MAX_LOG_BYTES,
        backupCount=5
    )
    error_handler.setFormatter(file_formatter)
    error_handler.setLevel(logging.ERROR)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(console_formatter)
    console_handler.setLevel(level)

    # Module loggers propagate here
    root.setLevel(level)
    root.addHandler(all_handler)
    root.addHandler(error_handler)
    root.addHandler(console_handler)
    root._sfvlab_configured = True

    return logging.getLogger('sfvlab')


# Create performance monitoring logger
def setup_performance_logging(log_dir: Optional[str] = None) -> logging.Logger:
    perf_logger = logging.getLogger('performance')
    if perf_logger.handlers:
        return perf_logger
    log_dir = log_dir or LOG_DIR
    os.makedirs(log_dir, exist_ok=True)
    perf_logger.setLevel(logging.INFO)
    perf_logger.propagate = False

    perf_handler = logging.handlers.RotatingFileHandler(
        os.path.join(log_dir, 'performance.log'),
        maxBytes=MAX_LOG_BYTES,
        backupCount=5
    )
    perf_handler.setFormatter(logging.Formatter(
        '%(asctime)s - %(message)s'
    ))
    perf_logger.addHandler(perf_handler)

    return perf_logger
