"""Parallel relighting and person re-identification for night-time images."""
from .config import Config, load_config
from .errors import NightReIDError
from .model import CENet

__all__ = ["CENet", "Config", "NightReIDError", "load_config"]
__version__ = "1.0.0"
