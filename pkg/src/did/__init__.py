"""Dialect identification toolkit.

Fbank front-end with frame stacking/downsampling, a from-scratch
transformer encoder classifier and CNN baseline on a tape-based autodiff
tensor core, SGD-with-momentum training, score-level fusion and
duration-bucketed evaluation, plus a synthetic long-range corpus generator
for desk-scale verification.
"""

__version__ = "0.1.0"
