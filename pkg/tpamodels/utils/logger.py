"""
Logging setup for the command-line entry points.

Library modules only create module loggers via
logging.getLogger(__name__); handlers are attached here.
"""

import logging

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


def configure_logging(verbosity=0, quiet=False):
    """
    Attach a single stream handler to the package logger.

    Parameters:
    -----------

    verbosity: int
        0 -> WARNING, 1 -> INFO, 2 or more -> DEBUG.

    quiet: bool
        If True, only errors are reported regardless
        of verbosity.

    Returns:
    --------

    logger: logging.Logger
        The configured 'tpamodels' logger.
    """
    if quiet:
        level = logging.ERROR
    elif verbosity >= 2:
        level = logging.DEBUG
    elif verbosity == 1:
        level = logging.INFO
    else:
        level = logging.WARNING

    logger = logging.getLogger('tpamodels')
    logger.setLevel(level)
    if not any(getattr(h, '_tpamodels', False) for h in logger.handlers):
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        handler._tpamodels = True
        logger.addHandler(handler)
    return logger
