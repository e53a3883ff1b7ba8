"""
Entry point for the pathprof command-line interface.

Usage: python run.py <subcommand> [options]; ``python run.py --help``
lists the subcommands.
"""

from pathprof.cli import main

if __name__ == '__main__':
    main()
