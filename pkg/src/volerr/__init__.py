"""Volumetric error decomposition for tilted-rotary five-axis machine tools.

The package splits the deviation measured at the tool center point into
contouring, link-geometry, axis-motion, thermal and dynamic contributions,
and ships a virtual machine that generates synthetic test campaigns with
exact per-sample ground truth.
"""

__version__ = "0.1.0"
