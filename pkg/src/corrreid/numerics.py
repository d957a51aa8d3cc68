"""Dense linear-algebra substrate: counted matmul, masked softmax, top-k and a
finite-difference gradient checker.

Matrices are plain 2-D numpy arrays (float64 in all computation).
"""
from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from corrreid import kernels
from corrreid.errors import DegenerateRowError, ShapeError


class MulCounter:
    """Per-call tally of scalar multiplications, bucketed by name.

    Pass an instance explicitly to the kernels you want counted; there is no
    global counter.
    """

    def __init__(self):
        self.counts = defaultdict(int)

    def add(self, key, n):
        self.counts[key] += int(n)

    def __getitem__(self, key):
        return self.counts.get(key, 0)

    @property
    def total(self):
        return sum(self.counts.values())

    def as_dict(self):
        return dict(sorted(self.counts.items()))


def matmul(a, b, tally=None, key="matmul"):
    """Matrix product ``a @ b`` with shape validation.

    When ``tally`` is given, ``rows(a) * cols(a) * cols(b)`` multiplications
    are added to it under ``key``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    if tally is not None:
        tally.add(key, a.shape[0] * a.shape[1] * b.shape[1])
    return a @ b


def stable_softmax_row(scores, mask=None):
    """Softmax of one row over the entries where ``mask`` is true.

    Masked-out entries are exactly zero.  Raises ``DegenerateRowError`` if the
    mask is all false.
    """
    scores = np.asarray(scores, dtype=np.float64).reshape(1, -1)
    if mask is None:
        mask = np.ones_like(scores, dtype=bool)
    mask = np.asarray(mask, dtype=bool).reshape(1, -1)
    if mask.shape != scores.shape:
        raise ShapeError(f"scores/mask length mismatch: {scores.shape[1]} vs {mask.shape[1]}")
    out, bad = kernels.masked_softmax(scores, mask, 1.0)
    if bad >= 0:
        raise DegenerateRowError(0)
    return out[0]


def masked_softmax_rows(scores, mask, sign=1.0):
    """Row-wise softmax of ``sign * scores`` restricted to ``mask``."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if scores.shape != mask.shape or scores.ndim != 2:
        raise ShapeError(f"scores {scores.shape} and mask {mask.shape} must be equal 2-D shapes")
    out, bad = kernels.masked_softmax(scores, mask, sign)
    if bad >= 0:
        raise DegenerateRowError(bad)
    return out


def softmax_backward(weights, grad_weights):
    """Gradient w.r.t. the softmax logits given the gradient w.r.t. its output.

    Works for masked rows too: entries with zero weight receive zero gradient.
    """
    inner = (grad_weights * weights).sum(axis=-1, keepdims=True)
    return weights * (grad_weights - inner)


def topk_indices(scores, k):
    """Indices of the ``k`` largest values, descending, ties by lower index."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ShapeError("topk_indices on an empty sequence")
    if k < 1:
        raise ShapeError(f"k must be >= 1, got {k}")
    return kernels.topk_rows(scores[None, :], int(k))[0]


def l2_normalize(x, axis=-1):
    """Unit-normalize along ``axis``; returns ``(y, norms)``."""
    norms = np.linalg.norm(x, axis=axis, keepdims=True)
    return x / norms, norms


def l2_normalize_backward(y, norms, grad_y, axis=-1):
    return (grad_y - y * (grad_y * y).sum(axis=axis, keepdims=True)) / norms


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    probe_count: int
    passed: bool
    tolerance: float
    bad_index: tuple | None = None
    message: str = ""


def grad_check(f, point, analytic, eps=1e-6, tolerance=1e-4, probes=64, rng=None):
    """Compare an analytic gradient with central differences.

    ``f`` maps an array shaped like ``point`` to a scalar.  Blocks with at
    most ``probes`` entries are checked exhaustively, larger ones on ``probes``
    random coordinates.  The relative error of a coordinate is
    ``|analytic - numeric| / max(1, |analytic|)``.

    ``point`` is perturbed in place and restored, so ``f`` may close over it.
    """
    point = np.asarray(point)
    analytic = np.asarray(analytic, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != point shape {point.shape}")
    size = point.size
    if size <= probes:
        coords = np.arange(size)
    else:
        rng = np.random.default_rng(0) if rng is None else rng
        coords = rng.choice(size, size=probes, replace=False)
    flat = point.reshape(-1)
    if not np.shares_memory(flat, point):
        raise ShapeError("grad_check needs a contiguous point array (perturbed in place)")
    worst = None
    ana = analytic.reshape(-1)
    max_abs = max_rel = 0.0
    for c in coords:
        c = int(c)
        orig = flat[c]
        flat[c] = orig + eps
        fp = f(point)
        flat[c] = orig - eps
        fm = f(point)
        flat[c] = orig
        idx = tuple(int(i) for i in np.unravel_index(c, point.shape))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            return GradCheckReport(max_abs, np.inf, len(coords), False, tolerance, idx,
                                   f"non-finite objective at probe {idx}")
        numeric = (fp - fm) / (2 * eps)
        err = abs(ana[c] - numeric)
        max_abs = max(max_abs, err)
        rel = err / max(1.0, abs(ana[c]))
        if rel > max_rel:
            max_rel = rel
            worst = idx
    passed = max_rel <= tolerance
    return GradCheckReport(float(max_abs), float(max_rel), len(coords), passed, tolerance,
                           None if passed else worst)
