"""Toy single-head transformer encoder with a class token and part tokens.

The class token and the patch tokens attend to each other; each part token
attends only to itself and the patches of its horizontal stripe.  Blocks are
pre-norm residual: ``x + attn(ln(x))`` then ``x + ffn(ln(x))``.  All arrays are
float64 and gradients are written out by hand (``encoder_backward``).
"""
from dataclasses import dataclass, field

import numpy as np

from corrreid.errors import ConfigError, DegenerateRowError, ShapeError
from corrreid.numerics import l2_normalize, l2_normalize_backward, softmax_backward

LN_EPS = 1e-6
_GELU_C = np.sqrt(2.0 / np.pi)


@dataclass
class LayerParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    NAMES = ("wq", "wk", "wv", "w1", "b1", "w2", "b2")


@dataclass
class EncoderParams:
    patch_w: np.ndarray
    patch_b: np.ndarray
    cls_token: np.ndarray
    part_tokens: np.ndarray
    pos: np.ndarray
    layers: list
    image_shape: tuple
    patch_size: int
    seed: int = 0

    @property
    def embed_dim(self):
        return self.patch_b.shape[0]

    @property
    def num_parts(self):
        return self.part_tokens.shape[0]

    @property
    def grid(self):
        h, w, _ = self.image_shape
        return h // self.patch_size, w // self.patch_size

    @property
    def num_patches(self):
        rows, cols = self.grid
        return rows * cols

    def arrays(self):
        """Flat name -> array view of every trainable tensor."""
        out = {
            "patch_w": self.patch_w,
            "patch_b": self.patch_b,
            "cls_token": self.cls_token,
            "part_tokens": self.part_tokens,
            "pos": self.pos,
        }
        for i, layer in enumerate(self.layers):
            for name in LayerParams.NAMES:
                out[f"layers.{i}.{name}"] = getattr(layer, name)
        return out

    def metadata(self):
        return {
            "image_shape": list(self.image_shape),
            "patch_size": self.patch_size,
            "num_parts": self.num_parts,
            "embed_dim": self.embed_dim,
            "num_layers": len(self.layers),
            "seed": self.seed,
        }

    @classmethod
    def from_arrays(cls, arrays, meta):
        layers = [
            LayerParams(**{n: np.array(arrays[f"layers.{i}.{n}"]) for n in LayerParams.NAMES})
            for i in range(meta["num_layers"])
        ]
        return cls(
            patch_w=np.array(arrays["patch_w"]),
            patch_b=np.array(arrays["patch_b"]),
            cls_token=np.array(arrays["cls_token"]),
            part_tokens=np.array(arrays["part_tokens"]),
            pos=np.array(arrays["pos"]),
            layers=layers,
            image_shape=tuple(meta["image_shape"]),
            patch_size=int(meta["patch_size"]),
            seed=int(meta["seed"]),
        )


def init_encoder(image_shape=(16, 32, 1), embed_dim=64, num_layers=2, patch_size=4,
                 num_parts=3, seed=0, pos_std=1.0):
    """Random parameters; positional embeddings start at ``pos_std`` so token
    positions are distinguishable before any training."""
    h, w, c = image_shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {patch_size}",
                          "encoder.patch_size")
    if num_layers < 1:
        raise ConfigError("need at least one layer", "encoder.layers")
    if num_parts < 1 or num_parts > h // patch_size:
        raise ConfigError(f"num_parts={num_parts} must be in [1, {h // patch_size}]",
                          "encoder.num_parts")
    rng = np.random.default_rng(seed)
    d = embed_dim
    hidden = 2 * d
    flat = patch_size * patch_size * c
    num_tokens = 1 + num_parts + (h // patch_size) * (w // patch_size)
    layers = []
    for _ in range(num_layers):
        layers.append(LayerParams(
            wq=rng.normal(0, d ** -0.5, (d, d)),
            wk=rng.normal(0, d ** -0.5, (d, d)),
            wv=rng.normal(0, d ** -0.5, (d, d)),
            w1=rng.normal(0, d ** -0.5, (d, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0, 0.5 * hidden ** -0.5, (hidden, d)),
            b2=np.zeros(d),
        ))
    return EncoderParams(
        patch_w=rng.normal(0, flat ** -0.5, (flat, d)),
        patch_b=np.zeros(d),
        cls_token=rng.normal(0, 0.02, d),
        part_tokens=rng.normal(0, 0.02, (num_parts, d)),
        pos=rng.normal(0, pos_std, (num_tokens, d)),
        layers=layers,
        image_shape=(h, w, c),
        patch_size=patch_size,
        seed=seed,
    )


# ---------------------------------------------------------------- sequence


@dataclass
class TokenSequence:
    """Assembled encoder input ``[cls, part_1..part_P, patch_1..patch_N] + pos``."""

    tokens: np.ndarray
    num_parts: int

    @property
    def cls(self):
        return self.tokens[0]

    @property
    def parts(self):
        return self.tokens[1:1 + self.num_parts]

    @property
    def patches(self):
        return self.tokens[1 + self.num_parts:]


@dataclass
class RegionMap:
    """Contiguous patch-index range ``[start, stop)`` for each part."""

    ranges: list = field(default_factory=list)

    def indices(self, part):
        start, stop = self.ranges[part]
        return np.arange(start, stop)

    def __len__(self):
        return len(self.ranges)


def patchify(images, patch_size):
    """``(B, H, W, C)`` -> ``(B, N_p, p*p*C)``, patches in row-major order."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise ShapeError(f"expected (B, H, W, C) images, got shape {images.shape}")
    b, h, w, c = images.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    x = images.reshape(b, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def embed_patches(image, params):
    """Linear patch embedding of one ``(H, W, C)`` image (or a batch)."""
    image = np.asarray(image, dtype=np.float64)
    single = image.ndim == 3
    batch = image[None] if single else image
    out = patchify(batch, params.patch_size) @ params.patch_w + params.patch_b
    return out[0] if single else out


def build_sequence(patches, params):
    patches = np.asarray(patches, dtype=np.float64)
    if patches.ndim != 2 or patches.shape[0] == 0:
        raise ShapeError("build_sequence needs a non-empty (N_p, d) patch array")
    head = np.vstack([params.cls_token[None], params.part_tokens])
    tokens = np.vstack([head, patches])
    if tokens.shape != params.pos.shape:
        raise ShapeError(f"sequence {tokens.shape} does not match positional table {params.pos.shape}")
    return TokenSequence(tokens + params.pos, params.num_parts)


def region_partition(num_patches, grid_rows, num_parts):
    """Split the patch grid into ``num_parts`` horizontal stripes.

    Stripes get ``rows // P`` rows each; the remainder goes one extra row per
    stripe starting from the top.
    """
    if num_parts < 1 or num_parts > grid_rows:
        raise ConfigError(f"cannot split {grid_rows} patch rows into {num_parts} parts",
                          "encoder.num_parts")
    if num_patches % grid_rows:
        raise ShapeError(f"{num_patches} patches do not fill {grid_rows} grid rows")
    cols = num_patches // grid_rows
    base, extra = divmod(grid_rows, num_parts)
    ranges = []
    row = 0
    for i in range(num_parts):
        n = base + (1 if i < extra else 0)
        ranges.append((row * cols, (row + n) * cols))
        row += n
    return RegionMap(ranges)


def row_partition(grid_rows, num_parts):
    """Patch-row stripes as ``(first_row, stop_row)`` pairs (same rule as above)."""
    base, extra = divmod(grid_rows, num_parts)
    out, row = [], 0
    for i in range(num_parts):
        n = base + (1 if i < extra else 0)
        out.append((row, row + n))
        row += n
    return out


def attention_mask(num_parts, region_map, num_patches):
    """Structural ``(T, T)`` mask: who may attend to whom inside one block.

    Rows of the class token and the patches see ``[cls, patches]``; the row of
    part ``i`` sees ``[part_i, region_i]``.
    """
    t = 1 + num_parts + num_patches
    mask = np.zeros((t, t), dtype=bool)
    glob = np.r_[0, np.arange(1 + num_parts, t)]
    mask[np.ix_(glob, glob)] = True
    for i in range(num_parts):
        row = 1 + i
        mask[row, row] = True
        mask[row, 1 + num_parts + region_map.indices(i)] = True
    return mask


def _attend(x_query, x_keys, layer):
    d = x_query.shape[-1]
    q = x_query @ layer.wq
    k = x_keys @ layer.wk
    v = x_keys @ layer.wv
    s = q @ k.T / np.sqrt(d)
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    return a @ v


def global_attention_layer(seq, layer):
    """Self-attention over ``[cls, patches]``; returns their updated rows.

    Part tokens neither query nor serve as keys here.
    """
    x = np.vstack([seq.cls[None], seq.patches])
    if layer.wq.shape != (x.shape[1], x.shape[1]):
        raise ShapeError(f"projection {layer.wq.shape} does not match d={x.shape[1]}")
    return _attend(x, x, layer)


def part_attention_layer(seq, region_map, layer):
    """Updated part tokens: part ``i`` attends to ``[part_i, region_i]`` only."""
    if len(region_map) != seq.num_parts:
        raise ShapeError(f"region map has {len(region_map)} parts, sequence has {seq.num_parts}")
    out = np.empty_like(seq.parts)
    for i in range(seq.num_parts):
        idx = region_map.indices(i)
        if idx.size == 0:
            raise DegenerateRowError(i, f"part {i} has an empty region")
        keys = np.vstack([seq.parts[i][None], seq.patches[idx]])
        out[i] = _attend(seq.parts[i][None], keys, layer)[0]
    return out


# ------------------------------------------------------------ vectorized path


def _layer_norm(x):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    return xc * inv, inv


def _layer_norm_backward(xhat, inv, dy):
    return inv * (dy - dy.mean(axis=-1, keepdims=True)
                  - xhat * (dy * xhat).mean(axis=-1, keepdims=True))


def layer_norm(x):
    return _layer_norm(np.asarray(x, dtype=np.float64))[0]


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * x * x)


def feed_forward(x, layer):
    return _gelu(x @ layer.w1 + layer.b1)[0] @ layer.w2 + layer.b2


def encoder_regions(params):
    rows, _ = params.grid
    return region_partition(params.num_patches, rows, params.num_parts)


def encoder_forward(images, params, cache=False):
    """Raw (un-normalized) class and part outputs for a batch of images.

    Returns ``(g_raw, l_raw, state)``; ``state`` is needed by
    ``encoder_backward`` and is ``None`` unless ``cache`` is set.
    """
    images = np.asarray(images, dtype=np.float64)
    if tuple(images.shape[1:]) != tuple(params.image_shape):
        raise ShapeError(f"images {images.shape[1:]} do not match encoder input {params.image_shape}")
    b = images.shape[0]
    d = params.embed_dim
    p_count = params.num_parts
    patches = patchify(images, params.patch_size)
    emb = patches @ params.patch_w + params.patch_b
    head = np.broadcast_to(np.vstack([params.cls_token[None], params.part_tokens]),
                           (b, 1 + p_count, d))
    x = np.concatenate([head, emb], axis=1) + params.pos
    mask = attention_mask(p_count, encoder_regions(params), params.num_patches)
    scale = 1.0 / np.sqrt(d)
    steps = []
    for layer in params.layers:
        h, inv1 = _layer_norm(x)
        q, k, v = h @ layer.wq, h @ layer.wk, h @ layer.wv
        s = np.where(mask, q @ k.transpose(0, 2, 1) * scale, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        x1 = x + a @ v
        h2, inv2 = _layer_norm(x1)
        z = h2 @ layer.w1 + layer.b1
        gz, t = _gelu(z)
        x_next = x1 + gz @ layer.w2 + layer.b2
        if cache:
            steps.append((h, inv1, q, k, v, a, h2, inv2, z, gz, t))
        x = x_next
    g_raw = x[:, 0]
    l_raw = x[:, 1:1 + p_count]
    state = {"patches": patches, "steps": steps, "batch": b} if cache else None
    return g_raw, l_raw, state


def encoder_backward(state, params, grad_g_raw=None, grad_l_raw=None):
    """Gradients of every encoder tensor given gradients on the raw outputs."""
    b = state["batch"]
    d = params.embed_dim
    p_count = params.num_parts
    t_count = 1 + p_count + params.num_patches
    dx = np.zeros((b, t_count, d))
    if grad_g_raw is not None:
        dx[:, 0] += grad_g_raw
    if grad_l_raw is not None:
        dx[:, 1:1 + p_count] += grad_l_raw
    scale = 1.0 / np.sqrt(d)
    grads = {}
    for i in reversed(range(len(params.layers))):
        layer = params.layers[i]
        h, inv1, q, k, v, a, h2, inv2, z, gz, t = state["steps"][i]
        # feed-forward residual
        dgz = dx @ layer.w2.T
        grads[f"layers.{i}.w2"] = np.einsum("btj,btk->jk", gz, dx)
        grads[f"layers.{i}.b2"] = dx.sum(axis=(0, 1))
        dz = dgz * _gelu_grad(z, t)
        grads[f"layers.{i}.w1"] = np.einsum("btj,btk->jk", h2, dz)
        grads[f"layers.{i}.b1"] = dz.sum(axis=(0, 1))
        dx1 = dx + _layer_norm_backward(h2, inv2, dz @ layer.w1.T)
        # attention residual
        da = dx1 @ v.transpose(0, 2, 1)
        dv = a.transpose(0, 2, 1) @ dx1
        ds = softmax_backward(a, da) * scale
        dq = ds @ k
        dk = ds.transpose(0, 2, 1) @ q
        grads[f"layers.{i}.wq"] = np.einsum("btj,btk->jk", h, dq)
        grads[f"layers.{i}.wk"] = np.einsum("btj,btk->jk", h, dk)
        grads[f"layers.{i}.wv"] = np.einsum("btj,btk->jk", h, dv)
        dh = dq @ layer.wq.T + dk @ layer.wk.T + dv @ layer.wv.T
        dx = dx1 + _layer_norm_backward(h, inv1, dh)
    grads["pos"] = dx.sum(axis=0)
    grads["cls_token"] = dx[:, 0].sum(axis=0)
    grads["part_tokens"] = dx[:, 1:1 + p_count].sum(axis=0)
    demb = dx[:, 1 + p_count:]
    grads["patch_w"] = np.einsum("bnj,bnk->jk", state["patches"], demb)
    grads["patch_b"] = demb.sum(axis=(0, 1))
    return grads


def encode(images, params, batch_size=256):
    """Unit-norm global features ``g`` (N, d) and part features ``l`` (N, P, d)."""
    images = np.asarray(images, dtype=np.float64)
    gs, ls = [], []
    for start in range(0, images.shape[0], batch_size):
        g_raw, l_raw, _ = encoder_forward(images[start:start + batch_size], params)
        gs.append(l2_normalize(g_raw)[0])
        ls.append(l2_normalize(l_raw)[0])
    d = params.embed_dim
    if not gs:
        return np.zeros((0, d)), np.zeros((0, params.num_parts, d))
    return np.concatenate(gs), np.concatenate(ls)


def encode_with_grad(images, params):
    """Forward pass keeping what ``encode_backward`` needs."""
    g_raw, l_raw, state = encoder_forward(images, params, cache=True)
    g, g_norm = l2_normalize(g_raw)
    l, l_norm = l2_normalize(l_raw)
    state["norms"] = (g, g_norm, l, l_norm)
    return g, l, state


def encode_backward(state, params, grad_g=None, grad_l=None):
    g, g_norm, l, l_norm = state["norms"]
    dg = None if grad_g is None else l2_normalize_backward(g, g_norm, grad_g)
    dl = None if grad_l is None else l2_normalize_backward(l, l_norm, grad_l)
    return encoder_backward(state, params, dg, dl)
