"""Local correlation: per-part momentum memory banks, top-k positive mining,
the contrastive clustering loss, and reduction of the part features into one
local representation ``v``.
"""
from dataclasses import dataclass

import numpy as np

from corrreid import kernels
from corrreid.errors import ConfigError, ShapeError, StateError, ZeroNormError
from corrreid.numerics import l2_normalize, l2_normalize_backward


@dataclass
class MemoryBank:
    """``banks[i, n]`` is the stored feature of training item ``n`` for part ``i``."""

    banks: np.ndarray
    momentum: float
    epoch: int = 0

    @property
    def num_parts(self):
        return self.banks.shape[0]

    @property
    def size(self):
        return self.banks.shape[1]

    @classmethod
    def empty(cls, num_parts, size, dim, momentum):
        if not 0.0 <= momentum <= 1.0:
            raise ConfigError(f"momentum must be in [0, 1], got {momentum}", "lcm.momentum")
        return cls(np.zeros((num_parts, size, dim)), float(momentum), 0)


def bank_update(bank, l, t):
    """Blend local features ``l`` (N, P, d) into the bank for epoch ``t``.

    ``t == 0`` copies ``l``; later epochs use ``(1 - m) w + m l``.  Rows are
    re-normalized after the blend and the bank epoch becomes ``t + 1``.
    """
    l = np.asarray(l, dtype=np.float64)
    expected = (bank.size, bank.num_parts, bank.banks.shape[2])
    if l.shape != expected:
        raise ShapeError(f"local features {l.shape} do not match bank layout {expected}")
    if t < bank.epoch:
        raise StateError(f"bank already at epoch {bank.epoch}; refusing update for epoch {t}")
    if t > 0 and bank.epoch == 0:
        raise StateError(f"bank was never initialized; first update must use t=0, got t={t}")
    feats = l.transpose(1, 0, 2)
    if t == 0:
        blended = feats.copy()
    else:
        m = bank.momentum
        blended = (1.0 - m) * bank.banks + m * feats
    norms = np.linalg.norm(blended, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("bank row collapsed to zero norm during momentum blend")
    # rows already at unit norm are kept bit-exact so t=0 is a true copy
    off = np.abs(norms - 1.0) > 1e-12
    return MemoryBank(np.where(off, blended / norms, blended), bank.momentum, t + 1)


@dataclass
class PositiveSet:
    anchor: tuple
    members: np.ndarray
    similarities: np.ndarray


def mine_positives(feature, bank_part, k, anchor=(0, 0)):
    """The ``k`` bank slots most similar (inner product) to ``feature``."""
    bank_part = np.asarray(bank_part, dtype=np.float64)
    if bank_part.shape[0] == 0:
        raise ShapeError("cannot mine positives from an empty bank")
    sims = bank_part @ np.asarray(feature, dtype=np.float64)
    members = kernels.topk_rows(sims[None], int(k))[0]
    return PositiveSet(anchor, members, sims[members])


def mine_all_positives(l, bank, k, include_anchor=True):
    """Positive indices for every (item, part) anchor: ``(N, P, min(k, D))``.

    When ``include_anchor`` is false the anchor's own slot (item ``n`` of an
    N == D training set) is excluded from its positives.
    """
    l = np.asarray(l, dtype=np.float64)
    n, p, _ = l.shape
    size = bank.size
    kk = min(int(k), size if include_anchor else size - 1)
    if kk < 1:
        raise ConfigError("positive set would be empty", "lcm.k")
    out = np.empty((n, p, kk), dtype=np.int64)
    for i in range(p):
        sims = l[:, i] @ bank.banks[i].T
        if not include_anchor:
            if n != size:
                raise ShapeError("anchor exclusion needs one bank slot per anchor item")
            sims = sims.copy()
            np.fill_diagonal(sims, -np.inf)
        out[:, i] = kernels.topk_rows(sims, kk)
    return out


def _logsumexp(z, axis=-1):
    top = z.max(axis=axis, keepdims=True)
    return (top + np.log(np.exp(z - top).sum(axis=axis, keepdims=True))).squeeze(axis)


def clustering_loss(l, bank, positives, tau):
    """Mean over anchors of ``-log(sum_pos exp(l.w/tau) / sum_all exp(l.w/tau))``.

    Returns ``(loss, grad)`` with ``grad`` shaped like ``l``.  The bank is a
    constant.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}", "lcm.tau")
    l = np.asarray(l, dtype=np.float64)
    n, p, _ = l.shape
    positives = np.asarray(positives)
    if positives.shape[:2] != (n, p) or positives.shape[2] < 1:
        raise ShapeError(f"positive index table {positives.shape} does not match anchors {(n, p)}")
    total = 0.0
    grad = np.zeros_like(l)
    rows = np.arange(n)[:, None]
    for i in range(p):
        w = bank.banks[i]
        z = l[:, i] @ w.T / tau
        zp = z[rows, positives[:, i]]
        lse_all = _logsumexp(z)
        lse_pos = _logsumexp(zp)
        total += (lse_all - lse_pos).sum()
        dz = np.exp(z - lse_all[:, None])
        # subtract the positive-restricted softmax (duplicates accumulate)
        np.add.at(dz, (np.broadcast_to(rows, zp.shape), positives[:, i]),
                  -np.exp(zp - lse_pos[:, None]))
        grad[:, i] = dz @ w / tau
    count = n * p
    return total / count, grad / count


def anchor_positive_similarity(l, bank, positives):
    """Mean inner product between each anchor and its positive bank slots."""
    l = np.asarray(l, dtype=np.float64)
    vals = []
    for i in range(l.shape[1]):
        w = bank.banks[i][positives[:, i]]
        vals.append(np.einsum("nd,nkd->nk", l[:, i], w).mean())
    return float(np.mean(vals))


@dataclass
class LcmParams:
    reduce: np.ndarray
    adapters: np.ndarray
    k: int = 5
    tau: float = 0.05
    momentum: float = 0.2

    def arrays(self):
        return {"reduce": self.reduce, "adapters": self.adapters}


def init_lcm(num_parts, dim, k=5, tau=0.05, momentum=0.2):
    """Adapters start at identity and ``reduce`` at the part average."""
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}", "lcm.tau")
    reduce = np.vstack([np.eye(dim) / num_parts] * num_parts)
    adapters = np.stack([np.eye(dim)] * num_parts)
    return LcmParams(reduce, adapters, k, tau, momentum)


def adapt_parts(l, adapters):
    """Per-part linear adapters followed by re-normalization; ``(out, state)``."""
    raw = np.einsum("npd,pde->npe", l, adapters)
    out, norms = l2_normalize(raw)
    return out, (l, out, norms)


def adapt_parts_backward(state, adapters, grad_out):
    l, out, norms = state
    draw = l2_normalize_backward(out, norms, grad_out)
    return {
        "adapters": np.einsum("npd,npe->pde", l, draw),
        "l": np.einsum("npe,pde->npd", draw, adapters),
    }


def fuse_local(l, reduce):
    """``v = normalize(concat(l_1..l_P) @ reduce)``."""
    l = np.asarray(l, dtype=np.float64)
    n, p, d = l.shape
    if reduce.shape[0] != p * d:
        raise ShapeError(f"reduce map {reduce.shape} does not accept {p}x{d} concatenated parts")
    raw = l.reshape(n, p * d) @ reduce
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ZeroNormError("reduced local feature has zero norm")
    return raw / norms


def fuse_local_with_grad(l, reduce):
    l = np.asarray(l, dtype=np.float64)
    n, p, d = l.shape
    flat = l.reshape(n, p * d)
    v = fuse_local(l, reduce)
    state = (flat, v, np.linalg.norm(flat @ reduce, axis=1, keepdims=True), (n, p, d))
    return v, state


def fuse_local_backward(state, reduce, grad_v):
    flat, v, norms, shape = state
    draw = l2_normalize_backward(v, norms, grad_v)
    return {"reduce": flat.T @ draw, "l": (draw @ reduce.T).reshape(shape)}
