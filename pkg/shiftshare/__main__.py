# -----------------------------------------------------------------------------
# Copyright © 2024- The shiftshare Contributors
#
# Released under the terms of the MIT License
# (see LICENSE.txt for details)
# -----------------------------------------------------------------------------

"""CLI entry point for shiftshare, shift-share regressions with valid inference."""

import sys

import shiftshare.cli


def main():
    return shiftshare.cli.main()


if __name__ == "__main__":
    sys.exit(main())
