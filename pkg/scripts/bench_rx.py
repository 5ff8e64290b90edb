"""Digitizer ingest: throughput, real-time acquisition, and frame-loss profiles."""

import sys

from qctrl.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench-rx", *sys.argv[1:]]))
