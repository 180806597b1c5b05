"""Run the command-line interface with `python -m ct_counterfactuals`."""

import sys

from .cli import main

sys.exit(main())
