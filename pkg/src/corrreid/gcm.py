"""Global correlation: set-wide affinity over global features, reduced with
randomly sampled landmark rows, sparsified by a reciprocal top-k mask and used
to aggregate projected features into correlated representations ``u``.
"""
from dataclasses import dataclass, field

import numpy as np

from corrreid import kernels
from corrreid.errors import ConfigError, ShapeError
from corrreid.numerics import MulCounter, masked_softmax_rows, matmul, softmax_backward

AFFINITY_SIGNS = {"negative": -1.0, "positive": 1.0}


@dataclass
class GcmParams:
    phi_q: np.ndarray
    phi_k: np.ndarray
    phi_v: np.ndarray
    landmarks: int = 5
    mask_k: int = 10
    affinity_sign: str = "negative"
    seed: int = 0

    @property
    def dim(self):
        return self.phi_q.shape[0]

    @property
    def sign(self):
        try:
            return AFFINITY_SIGNS[self.affinity_sign]
        except KeyError:
            raise ConfigError(f"unknown affinity_sign {self.affinity_sign!r}",
                              "gcm.affinity_sign") from None

    def arrays(self):
        return {"phi_q": self.phi_q, "phi_k": self.phi_k, "phi_v": self.phi_v}


def init_gcm(dim, landmarks=5, mask_k=10, affinity_sign="negative", seed=0, noise=0.0):
    """Identity projections, optionally jittered by ``noise``-scale Gaussians."""
    rng = np.random.default_rng(seed)
    eye = np.eye(dim)
    mats = [eye + noise * rng.normal(size=(dim, dim)) for _ in range(3)]
    params = GcmParams(*mats, landmarks=landmarks, mask_k=mask_k,
                       affinity_sign=affinity_sign, seed=seed)
    params.sign  # validates
    return params


@dataclass
class AffinityMatrix:
    scores: np.ndarray
    scaled: bool = True

    @property
    def n(self):
        return self.scores.shape[0]


@dataclass
class ReciprocalMask:
    bits: np.ndarray
    k: int

    @property
    def n(self):
        return self.bits.shape[0]

    @property
    def density(self):
        return float(self.bits.mean()) if self.bits.size else 0.0


def _check_features(g, params):
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2 or g.shape[1] != params.phi_q.shape[0]:
        raise ShapeError(f"features {g.shape} do not match projections {params.phi_q.shape}")
    return g


def affinity_dense(g, params, tally=None):
    """``A = (g phi_q)(g phi_k)^T / sqrt(d)``."""
    g = _check_features(g, params)
    q = matmul(g, params.phi_q, tally, "projection")
    k = matmul(g, params.phi_k, tally, "projection")
    a = matmul(q, k.T, tally, "affinity")
    return AffinityMatrix(a / np.sqrt(g.shape[1]))


def sample_landmark_indices(n, count, seed):
    if count < 1:
        raise ConfigError(f"landmark count must be >= 1, got {count}", "gcm.landmarks")
    if count > n:
        raise ConfigError(f"cannot sample {count} landmarks from {n} rows", "gcm.landmarks")
    return np.random.default_rng(seed).choice(n, size=count, replace=False)


def sample_landmarks(g, count, seed):
    """``count`` distinct rows of ``g``, uniformly without replacement."""
    g = np.asarray(g, dtype=np.float64)
    return g[sample_landmark_indices(g.shape[0], count, seed)]


def _landmark_parts(g, q, k, g_l, params, tally):
    q_l = matmul(g_l, params.phi_q, tally, "projection")
    k_l = matmul(g_l, params.phi_k, tally, "projection")
    q_red = matmul(q, k_l.T, tally, "affinity")
    k_red = matmul(k, q_l.T, tally, "affinity")
    a = matmul(q_red, k_red.T, tally, "affinity") / np.sqrt(g.shape[1])
    return q_l, k_l, q_red, k_red, a


def affinity_landmark(g, g_l, params, tally=None):
    """Landmark-reduced affinity ``A' = q' k'^T / sqrt(d)``.

    ``q' = (g phi_q)(g_l phi_k)^T`` and ``k' = (g phi_k)(g_l phi_q)^T`` are
    ``N x l``; the ``"affinity"`` bucket of ``tally`` receives
    ``N^2 l + 2 N d l`` multiplications.
    """
    g = _check_features(g, params)
    g_l = _check_features(g_l, params)
    q = matmul(g, params.phi_q, tally, "projection")
    k = matmul(g, params.phi_k, tally, "projection")
    return AffinityMatrix(_landmark_parts(g, q, k, g_l, params, tally)[-1])


def landmark_multiplies(n, d, landmarks):
    """Closed-form multiply count of the landmark affinity path."""
    return n * n * landmarks + 2 * n * d * landmarks


def dense_multiplies(n, d):
    return n * n * d


def reciprocal_mask(affinity, mask_k):
    """Keep ``(i, j)`` when ``j`` is in row ``i``'s top-k and ``i`` in column
    ``j``'s top-k; the diagonal is always kept."""
    a = affinity.scores if isinstance(affinity, AffinityMatrix) else np.asarray(affinity, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"affinity must be square, got {a.shape}")
    if mask_k < 1:
        raise ConfigError(f"mask_k must be >= 1, got {mask_k}", "gcm.mask_k")
    return ReciprocalMask(kernels.reciprocal_mask(a, int(mask_k)), int(mask_k))


def sparse_softmax(affinity, mask, sign=-1.0):
    """Row softmax of ``sign * A'`` over the mask support."""
    a = affinity.scores if isinstance(affinity, AffinityMatrix) else affinity
    bits = mask.bits if isinstance(mask, ReciprocalMask) else mask
    return masked_softmax_rows(a, bits, sign)


def aggregate(weights, g, phi_v, tally=None):
    """``u = S (g phi_v)``: each row a convex combination of projected rows."""
    weights = np.asarray(weights, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if weights.shape != (g.shape[0], g.shape[0]):
        raise ShapeError(f"weights {weights.shape} do not match {g.shape[0]} items")
    return matmul(weights, matmul(g, phi_v, tally, "projection"), tally, "aggregate")


@dataclass
class GcmResult:
    u: np.ndarray
    weights: np.ndarray
    mask: ReciprocalMask
    diagnostics: dict
    cache: dict = field(default=None, repr=False)


def gcm_forward(g, params, landmark_idx=None, mask=None):
    """Landmarks -> reduced affinity -> reciprocal mask -> sparse softmax -> aggregate.

    ``landmark_idx`` and ``mask`` may be supplied to hold them fixed (they are
    treated as constants by ``gcm_backward``).
    """
    g = _check_features(g, params)
    n, d = g.shape
    if not 1 <= params.landmarks <= d:
        raise ConfigError(f"landmarks={params.landmarks} must lie in [1, d={d}]", "gcm.landmarks")
    count = min(params.landmarks, n)
    tally = MulCounter()
    if landmark_idx is None:
        landmark_idx = sample_landmark_indices(n, count, params.seed)
    landmark_idx = np.asarray(landmark_idx)
    g_l = g[landmark_idx]
    q = matmul(g, params.phi_q, tally, "projection")
    k = matmul(g, params.phi_k, tally, "projection")
    v = matmul(g, params.phi_v, tally, "projection")
    q_l, k_l, q_red, k_red, a = _landmark_parts(g, q, k, g_l, params, tally)
    if mask is None:
        mask = reciprocal_mask(a, min(params.mask_k, n))
    s = sparse_softmax(a, mask, params.sign)
    u = matmul(s, v, tally, "aggregate")
    diagnostics = {
        "n": n,
        "d": d,
        "landmarks": int(count),
        "mask_k": int(mask.k),
        "mask_density": mask.density,
        "multiplies": tally.as_dict(),
        "landmark_indices": [int(i) for i in landmark_idx],
    }
    cache = {"g": g, "g_l": g_l, "idx": landmark_idx, "q": q, "k": k, "v": v,
             "q_l": q_l, "k_l": k_l, "q_red": q_red, "k_red": k_red, "s": s}
    return GcmResult(u, s, mask, diagnostics, cache)


def gcm_backward(result, params, grad_u):
    """Gradients w.r.t. ``phi_q``, ``phi_k``, ``phi_v`` and ``g``.

    Landmark choice and mask are constants; gradient reaches ``A'`` only on
    the mask support.
    """
    c = result.cache
    g, s, v = c["g"], c["s"], c["v"]
    d = g.shape[1]
    ds = grad_u @ v.T
    dv = s.T @ grad_u
    da = params.sign * softmax_backward(s, ds) / np.sqrt(d)
    dq_red = da @ c["k_red"]
    dk_red = da.T @ c["q_red"]
    dq = dq_red @ c["k_l"]
    dk = dk_red @ c["q_l"]
    dk_l = dq_red.T @ c["q"]
    dq_l = dk_red.T @ c["k"]
    g_l = c["g_l"]
    grads = {
        "phi_q": g.T @ dq + g_l.T @ dq_l,
        "phi_k": g.T @ dk + g_l.T @ dk_l,
        "phi_v": g.T @ dv,
    }
    dg = dq @ params.phi_q.T + dk @ params.phi_k.T + dv @ params.phi_v.T
    np.add.at(dg, c["idx"], dq_l @ params.phi_q.T + dk_l @ params.phi_k.T)
    grads["g"] = dg
    return grads
