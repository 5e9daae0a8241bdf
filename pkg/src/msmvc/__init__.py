"""Multi-scale style modeling voice conversion, desk scale."""

from .config import VERSION

__version__ = VERSION.split("-", 1)[1]
