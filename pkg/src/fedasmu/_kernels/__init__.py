"""Backend selection for the hot task-model kernels.

The compiled extension is used when it imported successfully; setting
``ASMU_FORCE_PY=1`` (or a failed/absent build) selects the numpy reference
backend. Both expose the same functions; the active backend name is recorded
in run manifests.
"""

import os

from . import reference

if os.environ.get("ASMU_FORCE_PY") == "1":
    _impl = reference
else:
    try:
        from . import _fastkern as _impl  # type: ignore[no-redef]
    except ImportError:
        _impl = reference

linear_loss_grad = _impl.linear_loss_grad
mlp_loss_grad = _impl.mlp_loss_grad
linear_sgd_epoch = _impl.linear_sgd_epoch
mlp_sgd_epoch = _impl.mlp_sgd_epoch


def backend_name() -> str:
    return _impl.BACKEND
