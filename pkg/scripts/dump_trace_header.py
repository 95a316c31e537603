#!/usr/bin/env python3
"""Print the JSON header of one or more GKVT trace files."""

import sys

from kvsim.trace import dump_header_json

if __name__ == "__main__":
    if len(sys.argv) < 2:
        print("usage: dump_trace_header.py TRACE [TRACE ...]", file=sys.stderr)
        sys.exit(1)
    for path in sys.argv[1:]:
        print(dump_header_json(path))
