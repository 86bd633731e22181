"""``python -m abccnn``."""

import sys

from .cli import main

sys.exit(main())
