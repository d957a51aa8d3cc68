"""Pure numpy implementations of the hot kernels.

Used when the compiled ``_ckernels`` extension is unavailable, and as the
reference the compiled versions are tested against.  Signatures and outputs
are identical between the two backends.
"""
import numpy as np


def topk_rows(scores, k):
    """Indices of the ``k`` largest entries of each row.

    Ordered by descending score, ties broken by ascending index.
    """
    scores = np.ascontiguousarray(scores, dtype=np.float64)
    k = min(int(k), scores.shape[1])
    # stable sort on the negated scores keeps equal values in index order
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def reciprocal_mask(affinity, k):
    affinity = np.ascontiguousarray(affinity, dtype=np.float64)
    n = affinity.shape[0]
    k = min(int(k), n)
    rows = np.zeros((n, n), dtype=bool)
    cols = np.zeros((n, n), dtype=bool)
    row_top = topk_rows(affinity, k)
    col_top = topk_rows(affinity.T, k)
    rows[np.arange(n)[:, None], row_top] = True
    # col_top[j] lists the rows i that rank in the top-k of column j
    cols[col_top, np.arange(n)[:, None]] = True
    mask = rows & cols
    np.fill_diagonal(mask, True)
    return mask


def masked_softmax(scores, mask, sign=1.0):
    """Row softmax of ``sign * scores`` restricted to ``mask``.

    Returns ``(weights, bad_row)`` where ``bad_row`` is the first row with an
    empty mask, or -1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    empty = ~mask.any(axis=1)
    if empty.any():
        return np.zeros_like(scores), int(np.argmax(empty))
    z = np.where(mask, sign * scores, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True), -1


def ranked_matches_stats(matches):
    """Per-query retrieval statistics from a ranked relevance table.

    ``matches[q, r]`` is 1 when the gallery item at rank ``r`` is relevant to
    query ``q``.  Returns ``(ap, first, num_rel)``: average precision, 0-based
    position of the first relevant item (-1 if none) and relevant count.
    """
    matches = np.asarray(matches, dtype=np.int64)
    nq, ng = matches.shape
    hits = np.cumsum(matches, axis=1)
    num_rel = hits[:, -1] if ng else np.zeros(nq, dtype=np.int64)
    positions = np.arange(1, ng + 1)
    precision = hits / positions
    ap = np.zeros(nq, dtype=np.float64)
    has = num_rel > 0
    ap[has] = (precision * matches).sum(axis=1)[has] / num_rel[has]
    first = np.where(has, np.argmax(matches > 0, axis=1), -1).astype(np.int64)
    return ap, first, num_rel.astype(np.int64)
