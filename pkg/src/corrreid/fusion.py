"""Multi-scale channel attention (MCA) fusion of global ``u`` and local ``v``.

Tensors are ``(B, C, H, W)``.  The gate ``m(x)`` has a per-cell branch
``C2(relu(C1 x))`` and a pooled branch ``sigmoid(C2(relu(C1 gap(x))))``
sharing the two 1x1 maps; ``z = m * u + (1 - m) * v`` with ``x = u + v``.

``sigmoid_scope="pooled_branch_only"`` squashes only the pooled branch (gate
is unbounded); ``"whole_sum"`` squashes the sum so the gate lies in (0, 1).
"""
from dataclasses import dataclass

import numpy as np

from corrreid.errors import ConfigError, ShapeError

SCOPES = ("whole_sum", "pooled_branch_only")


@dataclass
class McaParams:
    c1: np.ndarray  # (C/r, C)
    c2: np.ndarray  # (C, C/r)
    r: int = 4
    sigmoid_scope: str = "whole_sum"

    def arrays(self):
        return {"c1": self.c1, "c2": self.c2}


def init_mca(channels, r=4, sigmoid_scope="whole_sum", seed=0, scale=None):
    if r < 1 or channels % r:
        raise ConfigError(f"reduction ratio {r} must divide {channels} channels", "fusion.r")
    if sigmoid_scope not in SCOPES:
        raise ConfigError(f"sigmoid_scope must be one of {SCOPES}", "fusion.sigmoid_scope")
    rng = np.random.default_rng(seed)
    hidden = channels // r
    s1 = channels ** -0.5 if scale is None else scale
    s2 = hidden ** -0.5 if scale is None else scale
    return McaParams(rng.normal(0, s1, (hidden, channels)),
                     rng.normal(0, s2, (channels, hidden)), r, sigmoid_scope)


def as_channels(x):
    """Feature rows ``(N, C)`` -> channel tensors ``(N, C, 1, 1)``."""
    x = np.asarray(x, dtype=np.float64)
    return x[:, :, None, None] if x.ndim == 2 else x


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gap(x):
    """Per-channel spatial mean: ``(B, C, H, W)`` -> ``(B, C)``."""
    x = np.asarray(x, dtype=np.float64)
    return x.mean(axis=(-2, -1))


def _branch(x, params):
    # 1x1 convs on (..., C) vectors
    h = np.einsum("oc,...c->...o", params.c1, x)
    r = np.maximum(h, 0.0)
    return np.einsum("oc,...c->...o", params.c2, r), h, r


def _gate_parts(x, params):
    cells = np.moveaxis(x, 1, -1)  # (B, H, W, C)
    a_loc, h_loc, r_loc = _branch(cells, params)
    pooled = gap(x)
    a_pool, h_pool, r_pool = _branch(pooled, params)
    return cells, (a_loc, h_loc, r_loc), pooled, (a_pool, h_pool, r_pool)


def channel_gate(x, params):
    """Gate tensor ``m(x)`` with the shape of ``x``."""
    x = as_channels(x)
    _, (a_loc, _, _), _, (a_pool, _, _) = _gate_parts(x, params)
    pool = a_pool[:, None, None, :]
    if params.sigmoid_scope == "whole_sum":
        m = _sigmoid(a_loc + pool)
    elif params.sigmoid_scope == "pooled_branch_only":
        m = a_loc + _sigmoid(pool)
    else:
        raise ConfigError(f"unknown sigmoid_scope {params.sigmoid_scope!r}", "fusion.sigmoid_scope")
    return np.moveaxis(m, -1, 1)


def fuse(u, v, params):
    """``z = m(u + v) * u + (1 - m(u + v)) * v``."""
    u = as_channels(u)
    v = as_channels(v)
    if u.shape != v.shape:
        raise ShapeError(f"cannot fuse {u.shape} with {v.shape}")
    m = channel_gate(u + v, params)
    # same blend, written so equal inputs come back bit-exact
    return v + m * (u - v)


def fuse_backward(u, v, params, grad_z):
    """Gradients of ``sum(grad_z * fuse(u, v))`` w.r.t. c1, c2, u, v."""
    u = as_channels(u)
    v = as_channels(v)
    grad_z = as_channels(grad_z)
    x = u + v
    cells, (a_loc, h_loc, r_loc), pooled, (a_pool, h_pool, r_pool) = _gate_parts(x, params)
    pool = a_pool[:, None, None, :]
    m = channel_gate(x, params)
    dm = np.moveaxis(grad_z * (u - v), 1, -1)  # (B, H, W, C)
    if params.sigmoid_scope == "whole_sum":
        sg = _sigmoid(a_loc + pool)
        d_loc = dm * sg * (1.0 - sg)
        d_pool = d_loc.sum(axis=(1, 2))
    else:
        sp = _sigmoid(a_pool)
        d_loc = dm
        d_pool = dm.sum(axis=(1, 2)) * sp * (1.0 - sp)
    dc1 = np.zeros_like(params.c1)
    dc2 = np.zeros_like(params.c2)
    dcells = np.zeros_like(cells)
    dpooled = np.zeros_like(pooled)
    for da, h, r, inp, dinp in ((d_loc, h_loc, r_loc, cells, dcells),
                                (d_pool, h_pool, r_pool, pooled, dpooled)):
        dc2 += da.reshape(-1, da.shape[-1]).T @ r.reshape(-1, r.shape[-1])
        dh = np.einsum("oc,...o->...c", params.c2, da) * (h > 0)
        dc1 += dh.reshape(-1, dh.shape[-1]).T @ inp.reshape(-1, inp.shape[-1])
        dinp += np.einsum("oc,...o->...c", params.c1, dh)
    hw = x.shape[2] * x.shape[3]
    dx = np.moveaxis(dcells, -1, 1) + dpooled[:, :, None, None] / hw
    return {
        "c1": dc1,
        "c2": dc2,
        "u": grad_z * m + dx,
        "v": grad_z * (1.0 - m) + dx,
    }


def fuse_vectors(u, v, mode, params=None):
    """Fuse feature rows ``(N, C)`` by ``mode`` in {"mca", "add", "concat"}.

    ``add`` averages, ``concat`` stacks channels (output has 2C columns).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ShapeError(f"cannot fuse {u.shape} with {v.shape}")
    if mode == "add":
        return 0.5 * (u + v)
    if mode == "concat":
        return np.concatenate([u, v], axis=1)
    if mode == "mca":
        if params is None:
            raise ConfigError("mca fusion needs McaParams", "fusion")
        return fuse(u, v, params)[:, :, 0, 0]
    raise ConfigError(f"unknown fusion mode {mode!r}", "ablation.fusion")
