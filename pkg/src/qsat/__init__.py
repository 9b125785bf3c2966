"""Quantization-aware training toolkit: scale-adjusted weight quantization,
calibrated clipping-level gradients, gradient-flow diagnostics, and
batch-norm-folded integer inference on a minimal autodiff engine.

Submodules are imported explicitly (``qsat.tensor``, ``qsat.quant``, ...)
so the CLI can configure thread limits before numpy loads.
"""

__version__ = "0.1.0"
