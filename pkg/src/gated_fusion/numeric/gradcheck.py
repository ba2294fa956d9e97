"""Central finite-difference gradient checking."""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import DomainError, NumericError


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst: tuple = None
    per_parameter: dict = field(default_factory=dict)
    n_checked: int = 0

    def passed(self, tol):
        return self.max_rel_error < tol


def relative_error(analytic, numeric, floor=1e-12):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(objective, parameters, eps=1e-5, max_per_param=None, rng=None, floor=1e-12):
    """Compare analytic gradients with central differences.

    Parameters
    ----------
    objective : callable
        ``objective(need_grad)`` evaluates the scalar loss; when ``need_grad``
        is true it must also accumulate gradients into ``Parameter.grad``.
    parameters : mapping of name -> Parameter
    eps : float
        Finite-difference step.
    max_per_param : int, optional
        Check a random subset of components per parameter instead of all.
    floor : float
        Lower bound of the relative-error denominator. Central differences
        carry an absolute roundoff of roughly ``ulp(loss) / eps``, so
        components far below the gradient scale need a larger floor than
        the default to be judged meaningfully.

    Returns
    -------
    GradCheckResult
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    for p in parameters.values():
        p.grad[...] = 0
    base = objective(True)
    if not np.isfinite(base):
        raise NumericError("non-finite loss at the unperturbed point")
    analytic = {name: p.grad.copy() for name, p in parameters.items()}

    result = GradCheckResult(max_rel_error=0.0)
    for name, p in parameters.items():
        flat = p.value.reshape(-1)
        indices = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            indices = np.sort(rng.choice(flat.size, max_per_param, replace=False))
        worst = 0.0
        for i in indices:
            orig = flat[i]
            flat[i] = orig + eps
            up = objective(False)
            flat[i] = orig - eps
            down = objective(False)
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"non-finite loss perturbing {name}[{i}]")
            numeric = (up - down) / (2 * eps)
            err = float(relative_error(analytic[name].reshape(-1)[i], numeric, floor))
            if err > worst:
                worst = err
            if err > result.max_rel_error:
                result.max_rel_error = err
                result.worst = (name, int(i))
        result.per_parameter[name] = worst
        result.n_checked += len(indices)
    return result
