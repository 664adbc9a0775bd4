"""Backend selection for the fused kernels.

The compiled extension is used when it imports; ``OFFSITE_KERNELS=python``
forces the numpy fallback. ``BACKEND`` names the active one.
"""
import os

from . import _kernels_py

_forced = os.environ.get("OFFSITE_KERNELS", "").lower()

if _forced == "python":
    _impl = _kernels_py
    BACKEND = "python"
else:
    try:
        from . import _ckernels as _impl
        BACKEND = "cython"
    except ImportError:
        if _forced == "cython":
            raise
        _impl = _kernels_py
        BACKEND = "python"

layer_norm_fwd = _impl.layer_norm_fwd
layer_norm_bwd = _impl.layer_norm_bwd
# numpy's SIMD tanh beats the scalar libm loop, so GELU is shared by both backends
gelu_fwd = _kernels_py.gelu_fwd
gelu_bwd = _kernels_py.gelu_bwd
causal_softmax_fwd = _impl.causal_softmax_fwd
causal_softmax_bwd = _impl.causal_softmax_bwd
xent_fwd = _impl.xent_fwd
xent_bwd = _impl.xent_bwd
adamw_update = _impl.adamw_update

__all__ = [
    "BACKEND",
    "layer_norm_fwd",
    "layer_norm_bwd",
    "gelu_fwd",
    "gelu_bwd",
    "causal_softmax_fwd",
    "causal_softmax_bwd",
    "xent_fwd",
    "xent_bwd",
    "adamw_update",
]
