"""Offline report figures from asff-lab run artifacts.

Consumes only the documented file formats (metrics/compare/conflict CSVs
and binary P5 weight-map PGMs); never touches checkpoints and never
writes into the run directory it reads.
"""

__version__ = "0.1.0"
