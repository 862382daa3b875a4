import logging
import os
import sys

LOG_ENV_VAR = 'VOXFLOW_LOG'
LOG_LEVELS = {
    'error': logging.ERROR,
    'info': logging.INFO,
    'debug': logging.DEBUG,
}


def configure_logging(level=None):
    """Configure the root logger from `level` or the VOXFLOW_LOG env var; safe to call repeatedly"""
    name = (level or os.environ.get(LOG_ENV_VAR) or 'info').lower()
    if name not in LOG_LEVELS:
        raise ValueError(f"Unknown log level '{name}', expected one of {sorted(LOG_LEVELS)}")

    root = logging.getLogger()
    handler = next((h for h in root.handlers if getattr(h, '_voxflow', False)), None)
    if handler is None:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter('[%(levelname)s %(name)s] %(message)s'))
        handler._voxflow = True
        root.addHandler(handler)
    else:
        # stderr may have been swapped since the first call (e.g. by a CLI test runner)
        handler.setStream(sys.stderr)
    root.setLevel(LOG_LEVELS[name])
    return LOG_LEVELS[name]
