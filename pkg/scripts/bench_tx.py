"""Push 25.6 MB to 1, 2, 4 and 8 emulated AWGs and report T(N)/T(1)."""

import sys

from qctrl.cli import main

if __name__ == "__main__":
    sys.exit(main(["bench-tx", *sys.argv[1:]]))
