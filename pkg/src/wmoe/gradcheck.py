"""Central finite-difference check of autodiff gradients."""

from __future__ import annotations

from collections.abc import Callable, Iterable

import numpy as np

from .errors import ContractError, InputError
from .params import NamedParamSet
from .tensor import Tensor, working_precision


def grad_check(
    f: Callable[[NamedParamSet], Tensor],
    params: NamedParamSet,
    eps: float = 1e-6,
    n_samples: int = 20,
    rng: np.random.Generator | None = None,
    paths: Iterable[str] | None = None,
    return_details: bool = False,
    precision=None,
):
    """Compare autodiff against ``(f(t+eps) - f(t-eps)) / 2eps`` on sampled coordinates.

    Up to ``n_samples`` coordinates are drawn from every parameter in ``paths``
    (all parameters by default). Returns the max relative error, where the
    denominator is ``max(|analytic|, |numeric|, 1e-8)``.

    ``precision`` (e.g. ``np.longdouble``) evaluates the finite-difference side
    in a wider float type, which lowers its rounding floor of about
    ``ulp(f) / eps``; the autodiff side always runs in float64.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise InputError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    paths = list(paths) if paths is not None else list(params)

    params.zero_grad()
    loss = f(params)
    f0 = float(loss.data)
    if float(f(params).data) != f0:
        raise ContractError("grad_check: f is not deterministic (repeated evaluation differs)")
    loss.backward()
    analytic = {k: (params[k].grad.copy() if params[k].grad is not None
                    else np.zeros_like(params[k].data)) for k in paths}
    params.zero_grad()

    saved = {k: params[k].data for k in params}
    wide = np.dtype(precision if precision is not None else np.float64).type
    for k in params:
        params[k].data = np.array(saved[k], dtype=wide)
    step = wide(eps)

    def evaluate():
        with working_precision(wide):
            return f(params).data

    worst = 0.0
    details = []
    try:
        for k in paths:
            flat = params[k].data.reshape(-1)
            n = min(n_samples, flat.size)
            coords = rng.choice(flat.size, size=n, replace=False)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + step
                fp = evaluate()
                flat[c] = orig - step
                fm = evaluate()
                flat[c] = orig
                num = float((fp - fm) / (2 * step))
                ana = float(analytic[k].reshape(-1)[c])
                denom = max(abs(ana), abs(num), 1e-8)
                err = abs(ana - num) / denom
                worst = max(worst, err)
                details.append((k, int(c), ana, num, err))
    finally:
        for k in params:
            params[k].data = saved[k]
        params.zero_grad()
    if return_details:
        return worst, details
    return worst
