"""Hot loops with a compiled implementation and a numpy fallback.

The compiled extension is used when it was built; set ``BFLSIM_KERNELS=python``
to force the fallback. ``BACKEND`` names the active implementation.
"""

import os

from bflsim._kernels import _pykernels

_impl = _pykernels
BACKEND = "python"
if os.environ.get("BFLSIM_KERNELS", "").lower() != "python":
    try:
        from bflsim._kernels import _ckernels as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        pass

offload_rates = _impl.offload_rates
pairwise_max_ratio = _impl.pairwise_max_ratio

__all__ = ["BACKEND", "offload_rates", "pairwise_max_ratio"]
