"""dosewise: sensitivity-aware dose planning under partial observability.

Forward sensitivity propagation, Fisher-information stage costs, online
parameter updates, particle belief filtering over irregular measurement
calendars, and belief-space dose optimization, instantiated on an
8-compartment myelosuppression model.
"""

import logging
import os

__version__ = "0.1.0"

_level = os.environ.get("DOSEWISE_LOG", "WARNING").upper()
logging.getLogger("dosewise").setLevel(getattr(logging, _level, logging.WARNING))

from ._kernels import BACKEND as KERNEL_BACKEND  # noqa: E402,F401
