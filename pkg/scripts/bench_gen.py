"""Waveform generation timing per kind against the reference table."""

import sys

from qctrl.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench-gen", *sys.argv[1:]]))
