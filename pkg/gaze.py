#!/usr/bin/env python
# -----------------------------------------------------------------------------
# File Name : gaze.py
#
# Entry point: dataset generation, training, correction, animation and
# evaluation. Run ``python3 gaze.py --help`` for the command list.
#
# Licence : Apache License, Version 2.0
# -----------------------------------------------------------------------------

from eyeshift.cli import main

if __name__ == '__main__':
    main()
