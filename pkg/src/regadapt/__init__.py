"""Test-time adaptation engine for 3D deformable image registration.

A frozen (pluggable) backbone provides an initial displacement field, a
gated contrast-normalization step bridges modality gaps, and a cascade of
multi-scale residual refiners is optimized per image pair.
"""

from . import _tuning

_tuning.tune_allocator()

__version__ = "0.1.0"
