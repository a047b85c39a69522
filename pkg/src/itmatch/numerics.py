"""Dense float64 kernels with hand-derived gradients and a gradient checker.

Every differentiable piece of the pipeline is assembled from the functions
here.  Matrices are plain numpy ``float64`` arrays; the computation graph
of this project is small and fixed, so each forward function has a matching
``*_backward`` that applies the chain rule by hand instead of relying on an
autodiff tape.  ``finite_diff_check`` is the shared reference every module
uses to verify its analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

GRADCHECK_EPS_MIN = 1e-6
GRADCHECK_EPS_MAX = 1e-4
REL_ERROR_FLOOR = 1e-8


def ensure_finite(arr: np.ndarray, name: str = "array") -> np.ndarray:
    """Raise if ``arr`` contains NaN or Inf; return it unchanged otherwise."""
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")
    return arr


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    return a


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with an explicit shape check."""
    a = as_matrix(a, "left operand")
    b = as_matrix(b, "right operand")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(d_out: np.ndarray, a: np.ndarray, b: np.ndarray):
    """Gradients of a scalar loss through ``c = a @ b``.

    Given ``d_out = dL/dc``, returns ``(dL/da, dL/db)``.
    """
    return d_out @ b.T, a.T @ d_out


def softmax_scaled(scores: np.ndarray, lam: float) -> np.ndarray:
    """Softmax of ``lam * scores``, computed with max-subtraction.

    Output entries lie in (0, 1) and sum to 1.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ValueError("softmax of an empty score vector")
    if lam <= 0:
        raise ValueError(f"softmax scale must be positive, got {lam}")
    z = lam * s
    e = np.exp(z - z.max())
    return e / e.sum()


def softmax_scaled_backward(weights: np.ndarray, d_weights: np.ndarray, lam: float) -> np.ndarray:
    """d(scores) for ``weights = softmax_scaled(scores, lam)``."""
    inner = float(np.dot(weights, d_weights))
    return lam * weights * (d_weights - inner)


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Scale a vector to unit L2 norm.  A zero vector is an error, not an
    epsilon fallback: degenerate embeddings indicate an initialization bug
    upstream and must not be silently papered over."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ValueError("cannot L2-normalize a zero vector")
    return v / n


def l2_normalize_backward(unit: np.ndarray, norm: float, d_out: np.ndarray) -> np.ndarray:
    """d(input) for ``unit = input / norm``: projects out the radial component."""
    return (d_out - unit * float(np.dot(unit, d_out))) / norm


def l2_normalize_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalize each row of ``m``; returns (normalized, per-row norms)."""
    m = as_matrix(m)
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"cannot L2-normalize zero row {bad}")
    return m / norms[:, None], norms


def l2_normalize_rows_backward(unit_rows: np.ndarray, norms: np.ndarray, d_out: np.ndarray) -> np.ndarray:
    radial = np.sum(unit_rows * d_out, axis=1, keepdims=True)
    return (d_out - unit_rows * radial) / norms[:, None]


def cosine_sim(u: np.ndarray, v: np.ndarray) -> float:
    """Inner product of two (unit-norm) vectors."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"cosine_sim shape mismatch: {u.shape} vs {v.shape}")
    return float(np.dot(u, v))


def sigmoid(x: float) -> float:
    # Split on sign to avoid overflow in exp.
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)


@dataclass
class GradCheckReport:
    """Outcome of comparing an analytic gradient against central differences.

    ``per_parameter_errors`` holds ``(flat_index, analytic, numeric, rel_error)``
    with ``rel_error = |a - n| / max(|a|, |n|, 1e-8)``.
    """

    op_name: str
    max_rel_error: float
    per_parameter_errors: list[tuple[int, float, float, float]]


def finite_diff_check(
    f: Callable[[np.ndarray], float],
    params: np.ndarray,
    analytic_grad: np.ndarray,
    eps: float = 1e-5,
    op_name: str = "op",
) -> GradCheckReport:
    """Compare ``analytic_grad`` with central finite differences of ``f``.

    ``f`` is a scalar function of a parameter array; each entry is perturbed
    by +/- eps in turn.  64-bit arithmetic throughout.
    """
    params = np.array(params, dtype=np.float64)
    grad = np.asarray(analytic_grad, dtype=np.float64)
    if params.shape != grad.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match parameters {params.shape}")
    if not (GRADCHECK_EPS_MIN <= eps <= GRADCHECK_EPS_MAX):
        raise ValueError(f"eps {eps} outside [{GRADCHECK_EPS_MIN}, {GRADCHECK_EPS_MAX}]")

    flat = params.reshape(-1)
    grad_flat = grad.reshape(-1)
    errors: list[tuple[int, float, float, float]] = []
    max_rel = 0.0
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        f_plus = float(f(params))
        flat[i] = saved - eps
        f_minus = float(f(params))
        flat[i] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"{op_name}: non-finite value when perturbing index {i}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = float(grad_flat[i])
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_ERROR_FLOOR)
        errors.append((i, analytic, numeric, rel))
        max_rel = max(max_rel, rel)
    return GradCheckReport(op_name=op_name, max_rel_error=max_rel, per_parameter_errors=errors)
