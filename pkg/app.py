#!/usr/bin/env python3
"""
negrank command-line entry point.

    python app.py synth --seed 0
    python app.py train --corpus runs/synth-<fingerprint>/corpus
    python app.py ablate --corpus <dir> --grid coarse,fine --seeds 0,1,2,3,4
"""

import sys

from negrank.cli import run

if __name__ == '__main__':
    sys.exit(run(sys.argv[1:]))
