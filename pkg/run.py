#!/usr/bin/env python3
"""Point d'entree d'OmbreNet."""

import sys

from ombrenet.cli import main

if __name__ == "__main__":
    sys.exit(main())
