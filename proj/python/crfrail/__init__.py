"""Cause-specific frailty models for clustered competing risks with missing
event types: dataset I/O, the event-type classifier, weighted/imputed fits
and the Monte Carlo harness, backed by the C++ core."""

try:
    from ._crfrail import *  # noqa: F401,F403  (installed layout)
except ImportError:  # build-tree layout: extension next to the package dir
    from _crfrail import *  # noqa: F401,F403

from ._version import __version__  # noqa: F401
