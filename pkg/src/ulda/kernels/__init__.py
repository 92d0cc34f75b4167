"""Hot kernels for the convolutional backbone.

The compiled extension is used when it was built and imports cleanly;
otherwise the numpy reference is used. Setting ``ULDA_PURE_PYTHON=1``
forces the reference path.
"""
import os

from . import _reference

BACKEND = "python"
if os.environ.get("ULDA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _fast as _impl
        BACKEND = "compiled"
    except ImportError:  # extension not built
        _impl = _reference
else:
    _impl = _reference

im2col3x3 = _impl.im2col3x3
col2im3x3 = _impl.col2im3x3
maxpool2x2 = _impl.maxpool2x2
maxpool2x2_backward = _impl.maxpool2x2_backward
channel_stats = _impl.channel_stats
bn_apply = _impl.bn_apply
bn_backward = _impl.bn_backward

__all__ = [
    "BACKEND", "bn_apply", "bn_backward", "channel_stats", "col2im3x3",
    "im2col3x3", "maxpool2x2", "maxpool2x2_backward",
]
