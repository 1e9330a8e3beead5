"""Backend selection for the batched loss/gradient kernel.

The compiled extension is used when it imports; otherwise the numpy
implementation. ``SPARSEMOD_KERNEL=python`` forces the fallback.
"""
import os

import numpy as np

from . import _kernel_py

BACKEND = "python"
_impl = _kernel_py.loss_and_grad

if os.environ.get("SPARSEMOD_KERNEL", "").lower() != "python":
    try:
        from . import _kernel as _compiled
    except ImportError:
        pass
    else:
        BACKEND = "compiled"
        _impl = _compiled.loss_and_grad

BACKENDS = {"python": _kernel_py.loss_and_grad}
if BACKEND == "compiled":
    BACKENDS["compiled"] = _impl


def loss_and_grad(params, xs, ys, smoothed=False, want_grad=True, backend=None):
    """Batch sums of loss, correct predictions, ``1 - mu_y`` and loss gradients."""
    fn = _impl if backend is None else BACKENDS[backend]
    return fn(
        params.E, params.P, params.q, params.V, params.W, params.U,
        np.ascontiguousarray(xs, dtype=np.int64), np.ascontiguousarray(ys, dtype=np.int64),
        bool(smoothed), bool(want_grad),
    )
