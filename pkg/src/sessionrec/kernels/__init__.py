"""Kernel backend selection.

The loss/gradient and alias-sampling inner loops exist twice: a Cython
extension (``_cykernels``) and a pure-numpy reference (``reference``).  The
compiled one is used when it imports cleanly; set ``SESSIONREC_BACKEND`` to
``python`` or ``compiled`` to force a choice (``compiled`` raises if the
extension is unavailable).  Both expose the same functions; see
``reference`` for the contract.
"""

import os

from . import reference

_forced = os.environ.get("SESSIONREC_BACKEND", "").strip().lower()

if _forced == "python":
    _impl = reference
elif _forced == "compiled":
    from . import _cykernels as _impl
elif _forced in ("", "auto"):
    try:
        from . import _cykernels as _impl
    except ImportError:
        _impl = reference
else:
    raise RuntimeError(
        f"SESSIONREC_BACKEND={_forced!r} not understood (use 'python', 'compiled' or 'auto')"
    )

BACKEND = "compiled" if _impl is not reference else "python"

xe_batch = _impl.xe_batch
top1_batch = _impl.top1_batch
bpr_batch = _impl.bpr_batch
top1_max_batch = _impl.top1_max_batch
bpr_max_batch = _impl.bpr_max_batch
alias_draw = _impl.alias_draw


def get_backend(name=None):
    """Return a kernel module by name: None/'auto' for the active one."""
    if name in (None, "auto"):
        return _impl
    if name == "python":
        return reference
    if name == "compiled":
        from . import _cykernels

        return _cykernels
    raise ValueError(f"unknown backend {name!r}")
