"""
BitSwitcher launcher.

Usage: python BitSwitcher.py [--config FILE] [--verbose] <command> [options]
"""
import sys

from bitswitcher.cli import main as run

VERSION_NUMBER = "1.0.0"


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == '__main__':
    main()
