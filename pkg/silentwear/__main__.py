"""Allow running the package as a script."""

import sys

from silentwear.cli import main

if __name__ == "__main__":
    sys.exit(main())
