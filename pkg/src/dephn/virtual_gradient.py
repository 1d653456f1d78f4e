"""Virtual gradient coefficients for task gates.

A coefficient ``gamma(x, y)`` in [0, 2] is computed per pair of tasks from the
in-batch label similarity ``x`` and the gate difference ``y``; the product over
the other tasks rescales the gradient a gate receives while leaving its forward
value untouched. Everything except :func:`apply_gradient_scaling` is plain
numpy and never touches the tape.
"""

from __future__ import annotations

import csv
import io
from collections.abc import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SIMILARITIES = ("abs-cosine", "abs-pearson")


def _mul_cos(x, y):
    return np.cos(2 * np.pi * x * y) + 1


def _mul_abs(x, y):
    return 2 * np.abs(2 * x * y - 1)


def _mul_square(x, y):
    return 2 * (2 * x * y - 1) ** 2


def _mul_sqrt(x, y):
    return 2 * np.sqrt(np.abs(2 * x * y - 1))


def _add_cos(x, y):
    return np.cos(np.pi * x + np.pi * y) + 1


def _add_abs(x, y):
    return 2 * np.abs(x + y - 1)


def _add_square(x, y):
    return 2 * (x + y - 1) ** 2


def _add_sqrt(x, y):
    return 2 * np.sqrt(np.abs(x + y - 1))


COEFFICIENTS: dict[str, Callable] = {
    "mul-cos": _mul_cos,
    "mul-abs": _mul_abs,
    "mul-square": _mul_square,
    "mul-sqrt": _mul_sqrt,
    "add-cos": _add_cos,
    "add-abs": _add_abs,
    "add-square": _add_square,
    "add-sqrt": _add_sqrt,
}


def _check_kind(kind: str, table) -> None:
    if kind not in table:
        raise ValueError(f"unknown kind {kind!r}; expected one of {sorted(table)}")


def batch_label_similarity(a, b, measure: str = "abs-pearson") -> float:
    """|cosine| or |Pearson| of two label vectors; degenerate inputs give 0."""
    _check_kind(measure, SIMILARITIES)
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("similarity needs at least 2 samples")
    if measure == "abs-pearson":
        a = a - a.mean()
        b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(min(1.0, abs(a @ b) / (na * nb)))


def gate_difference(g_t, g_j):
    """min(1, |g_t - g_j|); elementwise on arrays."""
    return np.minimum(1.0, np.abs(np.asarray(g_t, dtype=np.float64) - np.asarray(g_j, dtype=np.float64)))


def gamma(x, y, function: str = "add-sqrt"):
    _check_kind(function, COEFFICIENTS)
    return COEFFICIENTS[function](np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64))


def aggregate_gamma(
    labels: np.ndarray,
    gates: np.ndarray,
    measure: str = "abs-pearson",
    function: str = "add-sqrt",
) -> np.ndarray:
    """Per-(task, expert, mapping) product of pairwise coefficients over the other tasks.

    ``labels`` is [B, T]; ``gates`` is the [T, K, P] snapshot of effective gate
    values. With a single task the result is all ones.
    """
    labels = np.asarray(labels, dtype=np.float64)
    gates = np.asarray(gates, dtype=np.float64)
    T = gates.shape[0]
    if labels.ndim != 2 or labels.shape[1] != T:
        raise ValueError(f"labels shape {labels.shape} does not match {T} tasks")
    out = np.ones_like(gates)
    for t in range(T):
        for j in range(T):
            if j == t:
                continue
            x = batch_label_similarity(labels[:, j], labels[:, t], measure)
            out[t] *= gamma(x, gate_difference(gates[t], gates[j]), function)
    return out


def make_modulation(labels: np.ndarray, measure: str = "abs-pearson", function: str = "add-sqrt"):
    """Bind batch labels; the returned callable maps a gate snapshot to its coefficients."""
    _check_kind(measure, SIMILARITIES)
    _check_kind(function, COEFFICIENTS)
    return lambda gates: aggregate_gamma(labels, gates, measure, function)


def apply_gradient_scaling(gate: Tensor, scale) -> Tensor:
    """Identity in the forward pass; multiplies the incoming adjoint by ``scale``.

    Built as ``sg(g) + (s*g - sg(s*g))``: the bracket is exactly zero in
    floating point, so the output is bit-equal to ``g`` while its only
    differentiable path carries the factor ``s``.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if not np.all(np.isfinite(scale)):
        raise ValueError("gradient scale must be finite")
    if np.any(scale < 0):
        raise ValueError("gradient scale must be non-negative")
    scaled = ad.constant(scale) * gate
    return ad.stop_gradient(gate) + (scaled - ad.stop_gradient(scaled))


def coefficient_grid(function: str, resolution: int = 101) -> np.ndarray:
    """gamma on the uniform grid; entry [i, j] is at x=i/(n-1), y=j/(n-1)."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    axis = np.linspace(0.0, 1.0, resolution)
    return gamma(axis[:, None], axis[None, :], function)


def write_grid_csv(function: str, resolution: int, fh) -> int:
    """Write ``x,y,gamma`` rows (x-major, 6 decimals); returns the row count."""
    grid = coefficient_grid(function, resolution)
    grid = np.where(np.abs(grid) < 5e-7, 0.0, grid)  # no "-0.000000"
    axis = np.linspace(0.0, 1.0, resolution)
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["x", "y", "gamma"])
    for i, x in enumerate(axis):
        for j, y in enumerate(axis):
            writer.writerow([f"{x:.6f}", f"{y:.6f}", f"{grid[i, j]:.6f}"])
    return resolution * resolution


def grid_csv_text(function: str, resolution: int) -> str:
    buf = io.StringIO()
    write_grid_csv(function, resolution, buf)
    return buf.getvalue()
