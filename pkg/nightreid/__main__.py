"""Allow ``python -m nightreid``."""
import sys

from .cli import main

sys.exit(main())
