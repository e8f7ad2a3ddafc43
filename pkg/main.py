"""Main entry point for the application."""

import sys

from silentwear.cli import main

if __name__ == "__main__":
    sys.exit(main())
