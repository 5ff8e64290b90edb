"""Whole stack on ephemeral ports: upload a sequence, calibrate, read out."""

import sys

from qctrl.cli import main

if __name__ == "__main__":
    sys.exit(main(["demo", *sys.argv[1:]]))
