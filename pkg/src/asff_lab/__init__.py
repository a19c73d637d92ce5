"""Adaptively spatial feature fusion for pyramid features.

A small, self-contained stack: a 4-D tensor autograd core, the
cross-level rescaling rules, per-position softmax-weighted fusion with
sum/concat baselines, a gradient-consistency analyzer, a synthetic
multi-scale detection task, and a deterministic training engine, all
exposed through the ``asff-lab`` command line tool.
"""

__version__ = "0.1.0"
