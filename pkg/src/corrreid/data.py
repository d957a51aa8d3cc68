"""Synthetic re-identification data, JSONL manifests and the binary feature store.

Feature store layout (little-endian)::

    magic   4 bytes  b"MCFR"
    version u32      1
    n       u64      rows
    d       u64      columns
    dtype   u32      1 = float32, 2 = float64
    payload n*d values, row-major

with a ``<store>.labels.json`` sidecar holding ``item_ids`` and ``labels``.
"""
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from corrreid.errors import (
    ConfigError,
    DataError,
    DuplicateItemError,
    EmptyManifestError,
    MagicMismatchError,
    ManifestError,
    MissingGalleryLabelError,
    StoreError,
    TruncatedPayloadError,
    UnknownSplitError,
    UnsupportedVersionError,
)
from corrreid.encoder import row_partition

SPLITS = ("train", "query", "gallery")

STORE_MAGIC = b"MCFR"
STORE_VERSION = 1
_HEADER = struct.Struct("<4sIQQI")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}

IMAGE_MAGIC = b"MCIM"


@dataclass
class SyntheticSpec:
    num_ids: int = 8
    per_id: int = 16
    image_shape: tuple = (16, 32, 1)
    viewpoint_noise: float = 0.5
    part_dropout: float = 0.0
    seed: int = 0
    patch_size: int = 4
    num_parts: int = 3
    shift_scale: float = 2.0

    def validate(self):
        if self.num_ids < 2:
            raise ConfigError("need at least 2 identities", "data.num_ids")
        if self.per_id < 2:
            raise ConfigError("need at least 2 samples per identity to form query and gallery",
                              "data.per_id")
        if self.viewpoint_noise < 0:
            raise ConfigError("viewpoint_noise must be >= 0", "data.viewpoint_noise")
        if not 0.0 <= self.part_dropout < 1.0:
            raise ConfigError("part_dropout must be in [0, 1)", "data.part_dropout")
        h, w, _ = self.image_shape
        if h % self.patch_size or w % self.patch_size:
            raise ConfigError("image shape not divisible by patch_size", "data.patch_size")
        if self.num_parts > h // self.patch_size:
            raise ConfigError("more parts than patch rows", "data.num_parts")


@dataclass
class Record:
    item_id: str
    label: int
    split: str
    camera: int | None = None
    path: str | None = None
    index: int | None = None
    image: list | None = None

    def to_json(self):
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass
class Manifest:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def indices(self, name):
        return np.array([i for i, r in enumerate(self.records) if r.split == name], dtype=np.int64)

    @property
    def labels(self):
        return np.array([r.label for r in self.records])

    @property
    def item_ids(self):
        return [r.item_id for r in self.records]


def identity_templates(num_ids, image_shape, rng):
    """Orthonormal low-frequency patterns, scaled to unit per-pixel RMS."""
    h, w, c = image_shape
    freqs = max(4, math.ceil(math.sqrt(num_ids / c)) + 1)
    ys = np.cos(np.pi * np.outer(np.arange(freqs), (np.arange(h) + 0.5) / h))
    xs = np.cos(np.pi * np.outer(np.arange(freqs), (np.arange(w) + 0.5) / w))
    basis = np.einsum("ay,bx->abyx", ys, xs).reshape(freqs * freqs, h * w)
    coeffs = rng.normal(size=(num_ids, c, freqs * freqs))
    raw = np.einsum("ick,kp->ipc", coeffs, basis).reshape(num_ids, h * w * c)
    q, _ = np.linalg.qr(raw.T)
    return (q.T * math.sqrt(h * w * c)).reshape(num_ids, h, w, c)


def synth_dataset(spec):
    """Images ``(N, H, W, C)`` and a manifest.

    Sample 0 of every identity is the query, the next ``(per_id - 1) // 2``
    are training items and the rest are gallery items.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    h, w, c = spec.image_shape
    templates = identity_templates(spec.num_ids, spec.image_shape, rng)
    stripes = [(a * spec.patch_size, b * spec.patch_size)
               for a, b in row_partition(h // spec.patch_size, spec.num_parts)]
    n_train = (spec.per_id - 1) // 2
    images = np.empty((spec.num_ids * spec.per_id, h, w, c))
    records = []
    for ident in range(spec.num_ids):
        for s in range(spec.per_id):
            img = templates[ident]
            if spec.viewpoint_noise > 0:
                shift = int(round(spec.viewpoint_noise * spec.shift_scale * rng.normal()))
                img = np.roll(img, shift, axis=1)
                img = img + spec.viewpoint_noise * rng.normal(size=img.shape)
            else:
                img = img.copy()
            if spec.part_dropout > 0 and rng.random() < spec.part_dropout:
                top, bottom = stripes[rng.integers(len(stripes))]
                img[top:bottom] = 0.0
            idx = ident * spec.per_id + s
            images[idx] = img
            split = "query" if s == 0 else ("train" if s <= n_train else "gallery")
            records.append(Record(f"id{ident:03d}_s{s:03d}", ident, split, index=idx))
    return images, Manifest(records)


# ------------------------------------------------------------------ manifest


def write_manifest(manifest, path, image_path=None):
    lines = []
    for rec in manifest.records:
        data = rec.to_json()
        if image_path is not None and rec.image is None:
            data["path"] = str(image_path)
        lines.append(json.dumps(data, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_manifest(path):
    path = Path(path)
    text = path.read_text()
    records = []
    seen = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"invalid JSON: {exc.msg}", lineno) from exc
        if not isinstance(raw, dict):
            raise ManifestError("record must be a JSON object", lineno)
        for key in ("item_id", "label", "split"):
            if key not in raw:
                raise ManifestError(f"missing field {key!r}", lineno)
        unknown = set(raw) - {"item_id", "label", "split", "camera", "path", "index", "image"}
        if unknown:
            raise ManifestError(f"unknown fields {sorted(unknown)}", lineno)
        if raw["split"] not in SPLITS:
            raise UnknownSplitError(f"unknown split {raw['split']!r}", lineno)
        item_id = str(raw["item_id"])
        if item_id in seen:
            raise DuplicateItemError(item_id, seen[item_id], lineno)
        seen[item_id] = lineno
        records.append((lineno, Record(item_id, raw["label"], raw["split"], raw.get("camera"),
                                       raw.get("path"), raw.get("index"), raw.get("image"))))
    if not records:
        raise EmptyManifestError(f"{path}: manifest has no records")
    gallery_labels = {r.label for _, r in records if r.split == "gallery"}
    for lineno, r in records:
        if r.split == "query" and r.label not in gallery_labels:
            raise MissingGalleryLabelError(f"query label {r.label!r} has no gallery record", lineno)
    return Manifest([r for _, r in records])


def write_images(images, path, dtype="<f4"):
    images = np.ascontiguousarray(images, dtype=np.dtype(dtype))
    header = json.dumps({"shape": list(images.shape), "dtype": np.dtype(dtype).str},
                        sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(IMAGE_MAGIC + struct.pack("<I", len(header)) + header)
        fh.write(images.tobytes())


def read_images(path):
    blob = Path(path).read_bytes()
    if blob[:4] != IMAGE_MAGIC:
        raise DataError(f"{path}: not an image block file")
    (hlen,) = struct.unpack_from("<I", blob, 4)
    header = json.loads(blob[8:8 + hlen])
    dtype = np.dtype(header["dtype"])
    shape = tuple(header["shape"])
    data = np.frombuffer(blob, dtype=dtype, offset=8 + hlen)
    if data.size != math.prod(shape):
        raise DataError(f"{path}: image payload has {data.size} values, header says {shape}")
    return data.reshape(shape).astype(np.float64)


def load_images(manifest, base_dir=None):
    """Images for every record, in manifest order."""
    cache = {}
    out = []
    for rec in manifest.records:
        if rec.image is not None:
            out.append(np.asarray(rec.image, dtype=np.float64))
            continue
        if rec.path is None or rec.index is None:
            raise DataError(f"record {rec.item_id!r} has neither inline image nor path/index")
        p = Path(rec.path)
        if base_dir is not None and not p.is_absolute():
            p = Path(base_dir) / p
        if p not in cache:
            cache[p] = read_images(p)
        out.append(cache[p][rec.index])
    shapes = {x.shape for x in out}
    if len(shapes) > 1:
        raise DataError(f"images have differing shapes: {sorted(shapes)}")
    return np.stack(out)


# ------------------------------------------------------------- feature store


def _sidecar(path):
    return Path(str(path) + ".labels.json")


def store_write(features, labels, path, item_ids=None, dtype="<f4"):
    features = np.asarray(features)
    if features.ndim != 2:
        raise StoreError(f"feature store holds 2-D matrices, got shape {features.shape}")
    n, d = features.shape
    labels = [int(x) if isinstance(x, (int, np.integer)) else x for x in labels]
    if len(labels) != n:
        raise StoreError(f"{len(labels)} labels for {n} rows")
    if item_ids is None:
        item_ids = [str(i) for i in range(n)]
    dt = np.dtype(dtype)
    payload = np.ascontiguousarray(features, dtype=dt).tobytes()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(STORE_MAGIC, STORE_VERSION, n, d, _DTYPE_TAGS[dt]))
        fh.write(payload)
    _sidecar(path).write_text(json.dumps({"item_ids": list(item_ids), "labels": labels},
                                         sort_keys=True) + "\n")
    return path


@dataclass
class FeatureStore:
    features: np.ndarray
    labels: list
    item_ids: list
    dtype: np.dtype
    version: int = STORE_VERSION


def store_read(path):
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, n, d, tag = _HEADER.unpack_from(blob)
    if magic != STORE_MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {magic!r}")
    if version != STORE_VERSION:
        raise UnsupportedVersionError(f"{path}: store version {version} unsupported")
    if tag not in _DTYPES:
        raise StoreError(f"{path}: unknown dtype tag {tag}")
    dt = _DTYPES[tag]
    expected = n * d * dt.itemsize
    got = len(blob) - _HEADER.size
    if got < expected:
        raise TruncatedPayloadError(f"{path}: payload has {got} bytes, header needs {expected}")
    if got > expected:
        raise StoreError(f"{path}: {got - expected} trailing bytes after payload")
    feats = np.frombuffer(blob, dtype=dt, offset=_HEADER.size).reshape(n, d)
    side = _sidecar(path)
    if not side.exists():
        raise StoreError(f"{path}: missing label sidecar {side.name}")
    meta = json.loads(side.read_text())
    if len(meta["labels"]) != n or len(meta["item_ids"]) != n:
        raise StoreError(f"{path}: header says {n} rows but sidecar lists "
                         f"{len(meta['labels'])} labels / {len(meta['item_ids'])} ids")
    return FeatureStore(feats.astype(np.float64), meta["labels"], meta["item_ids"], dt, version)
