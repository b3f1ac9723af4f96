"""Central-difference validation of tape gradients.

Used by the test suite of every module; kept in the library so demo scripts
can call it too.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, backward


@dataclass
class FiniteDiffResult:
    max_rel_error: float
    per_param: dict
    unreliable: list

    def __repr__(self):
        return (f"FiniteDiffResult(max_rel_error={self.max_rel_error:.3e}, "
                f"unreliable={len(self.unreliable)} coords)")


def finite_diff_check(fn, params: list[Tensor], step: float = 1e-6,
                      kink_tol: float = 0.1) -> FiniteDiffResult:
    """Compare tape gradients of ``fn()`` against central differences.

    ``fn`` must be a zero-argument callable returning a scalar Tensor built
    from ``params`` (it is re-invoked per probe, so the tape is rebuilt each
    time). Error per coordinate is |g_tape - g_fd| / max(1, |g_fd|).

    Coordinates sitting on a non-differentiable point (clamp boundaries and
    the like) are detected by forward/backward one-sided disagreement above
    ``kink_tol`` and reported in ``unreliable`` instead of contributing to
    ``max_rel_error``.
    """
    for p in params:
        if not p.requires_grad:
            raise ValueError("finite_diff_check params must require grad")
        p.grad = None

    out = fn()
    f0 = float(out.data)
    tape_grads = backward(out, params=params)
    if not np.isfinite(f0):
        return FiniteDiffResult(max_rel_error=float("nan"), per_param={},
                                unreliable=[])

    max_err = 0.0
    per_param = {}
    unreliable = []
    for pi, p in enumerate(params):
        g_tape = tape_grads[p]
        errs = np.zeros(p.data.size)
        for i in range(p.data.size):
            orig = p.data.flat[i]
            p.data.flat[i] = orig + step
            f_plus = float(fn().data)
            p.data.flat[i] = orig - step
            f_minus = float(fn().data)
            p.data.flat[i] = orig
            g_fd = (f_plus - f_minus) / (2.0 * step)
            g_fwd = (f_plus - f0) / step
            g_bwd = (f0 - f_minus) / step
            if not np.isfinite(g_fd):
                errs[i] = np.nan
                max_err = float("nan") if max_err == max_err else max_err
                continue
            if abs(g_fwd - g_bwd) / max(abs(g_fwd), abs(g_bwd), 1.0) > kink_tol:
                unreliable.append((pi, i))
                errs[i] = np.nan
                continue
            errs[i] = abs(g_tape.flat[i] - g_fd) / max(1.0, abs(g_fd))
        per_param[pi] = errs
        valid = errs[~np.isnan(errs)]
        if valid.size:
            max_err = max(max_err, float(valid.max()))
    return FiniteDiffResult(max_rel_error=max_err, per_param=per_param,
                            unreliable=unreliable)
