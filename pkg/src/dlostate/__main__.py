# Copyright 2026 The dlostate authors
"""dlostate entrypoint"""

from dlostate import cli


if __name__ == "__main__":
    cli.main()
