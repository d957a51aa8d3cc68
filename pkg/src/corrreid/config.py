"""Pipeline configuration: strict JSON loading with field-path errors."""
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from corrreid.errors import ConfigError


@dataclass
class EncoderConfig:
    embed_dim: int = 64
    layers: int = 2
    patch_size: int = 4
    num_parts: int = 3
    pos_std: float = 1.0
    seed: int | None = None


@dataclass
class GcmConfig:
    landmarks: int = 5
    mask_k: int = 10
    affinity_sign: str = "negative"
    seed: int | None = None


@dataclass
class LcmConfig:
    k: int = 5
    tau: float = 0.05
    momentum: float = 0.2
    include_anchor: bool = True
    clustering_weight: float = 1.0


@dataclass
class FusionConfig:
    r: int = 4
    sigmoid_scope: str = "whole_sum"
    seed: int | None = None


@dataclass
class TrainingConfig:
    epochs_per_stage: int = 30
    base_lr: float = 1e-3
    warmup_epochs: int = 10
    weight_decay: float = 1e-4
    min_lr: float = 1e-5
    sgd_momentum: float = 0.9
    batch_size_stage1: int = 128
    batch_size_stage3: int = 128
    unfreeze_encoder: bool = False
    shared_head: bool = True
    stage_epochs: list | None = None
    stage_lr_scale: list = field(default_factory=lambda: [1.0, 1.0, 1.0])
    logit_scale: float = 1.0


@dataclass
class AblationConfig:
    use_gcm: bool = True
    use_lcm: bool = True
    fusion: str = "mca"


@dataclass
class SyntheticConfig:
    num_ids: int = 8
    per_id: int = 16
    image_shape: list = field(default_factory=lambda: [16, 32, 1])
    viewpoint_noise: float = 1.5
    part_dropout: float = 0.3
    shift_scale: float = 2.0
    seed: int | None = None


@dataclass
class DataConfig:
    manifest: str | None = None
    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)


@dataclass
class EvalConfig:
    ranks: list = field(default_factory=lambda: [1, 5, 10])
    same_camera_exclusion: bool = False
    table_top: int = 10


@dataclass
class PipelineConfig:
    seed: int = 0
    store_dtype: str = "float32"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    gcm: GcmConfig = field(default_factory=GcmConfig)
    lcm: LcmConfig = field(default_factory=LcmConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        _positive(self.encoder.embed_dim, "encoder.embed_dim")
        _positive(self.encoder.layers, "encoder.layers")
        _positive(self.encoder.patch_size, "encoder.patch_size")
        _positive(self.encoder.num_parts, "encoder.num_parts")
        if not self.encoder.pos_std >= 0:
            raise ConfigError("must be >= 0", "encoder.pos_std")
        _positive(self.gcm.landmarks, "gcm.landmarks")
        _positive(self.gcm.mask_k, "gcm.mask_k")
        if self.gcm.landmarks > self.encoder.embed_dim:
            raise ConfigError("must not exceed encoder.embed_dim", "gcm.landmarks")
        _choice(self.gcm.affinity_sign, ("negative", "positive"), "gcm.affinity_sign")
        _positive(self.lcm.k, "lcm.k")
        if not self.lcm.tau > 0:
            raise ConfigError("must be > 0", "lcm.tau")
        if not 0.0 <= self.lcm.momentum <= 1.0:
            raise ConfigError("must be in [0, 1]", "lcm.momentum")
        if self.lcm.clustering_weight < 0:
            raise ConfigError("must be >= 0", "lcm.clustering_weight")
        _positive(self.fusion.r, "fusion.r")
        if self.encoder.embed_dim % self.fusion.r:
            raise ConfigError("must divide encoder.embed_dim", "fusion.r")
        _choice(self.fusion.sigmoid_scope, ("whole_sum", "pooled_branch_only"), "fusion.sigmoid_scope")
        t = self.training
        _positive(t.epochs_per_stage, "training.epochs_per_stage")
        if t.warmup_epochs < 0:
            raise ConfigError("must be >= 0", "training.warmup_epochs")
        for name in ("base_lr", "min_lr", "weight_decay"):
            if getattr(t, name) < 0:
                raise ConfigError("must be >= 0", f"training.{name}")
        if not t.logit_scale > 0:
            raise ConfigError("must be > 0", "training.logit_scale")
        if not 0.0 <= t.sgd_momentum < 1.0:
            raise ConfigError("must be in [0, 1)", "training.sgd_momentum")
        if t.stage_epochs is not None:
            if len(t.stage_epochs) != 3:
                raise ConfigError("must list 3 epoch counts", "training.stage_epochs")
            for i, e in enumerate(t.stage_epochs):
                _positive(e, f"training.stage_epochs[{i}]")
        if len(t.stage_lr_scale) != 3 or any(
                isinstance(x, bool) or not isinstance(x, (int, float)) or x <= 0 for x in t.stage_lr_scale):
            raise ConfigError("must list 3 positive numbers", "training.stage_lr_scale")
        _positive(t.batch_size_stage1, "training.batch_size_stage1")
        _positive(t.batch_size_stage3, "training.batch_size_stage3")
        _choice(self.ablation.fusion, ("add", "concat", "mca"), "ablation.fusion")
        _choice(self.store_dtype, ("float32", "float64"), "store_dtype")
        if self.data.manifest is None and self.data.synthetic is None:
            raise ConfigError("either manifest or synthetic must be given", "data")
        if self.data.synthetic is not None:
            s = self.data.synthetic
            if len(s.image_shape) != 3:
                raise ConfigError("must be [H, W, C]", "data.synthetic.image_shape")
        if not self.eval.ranks or any(r < 1 for r in self.eval.ranks):
            raise ConfigError("ranks must be positive integers", "eval.ranks")
        return self

    # seeds left as null derive from the master seed
    def seed_for(self, section):
        offsets = {"encoder": 11, "gcm": 23, "fusion": 37, "data": 41, "training": 53, "lcm": 67}
        explicit = getattr(getattr(self, section, None), "seed", None)
        return explicit if explicit is not None else self.seed * 1000 + offsets[section]

    def seeds(self):
        return {s: self.seed_for(s) for s in ("data", "encoder", "fusion", "gcm", "lcm", "training")}

    def to_dict(self):
        return dataclasses.asdict(self)


def _positive(value, path):
    if not isinstance(value, int) or value < 1:
        raise ConfigError(f"must be a positive integer, got {value!r}", path)


def _choice(value, options, path):
    if value not in options:
        raise ConfigError(f"must be one of {list(options)}, got {value!r}", path)


def _check_type(value, annotation, path):
    text = str(annotation)
    if value is None:
        if "None" in text:
            return value
        raise ConfigError("must not be null", path)
    if annotation is bool or text.startswith("bool"):
        ok = isinstance(value, bool)
    elif annotation is int or text.startswith("int"):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif annotation is float or text.startswith("float"):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif annotation is str or text.startswith("str"):
        ok = isinstance(value, str)
    elif annotation is list or text.startswith("list"):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"wrong type {type(value).__name__} (expected {text})", path)
    return value


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError("must be an object", path or "<root>")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError("unknown key", where)
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        ftype = fields[name].type
        nested = _nested_type(ftype)
        if nested is not None and value is not None:
            kwargs[name] = _build(nested, value, sub)
        else:
            kwargs[name] = _check_type(value, ftype, sub)
    return cls(**kwargs)


_NESTED = {}


def _nested_type(ftype):
    if not _NESTED:
        for c in (EncoderConfig, GcmConfig, LcmConfig, FusionConfig, TrainingConfig,
                  AblationConfig, SyntheticConfig, DataConfig, EvalConfig):
            _NESTED[c.__name__] = c
    name = ftype if isinstance(ftype, str) else getattr(ftype, "__name__", str(ftype))
    for key, cls in _NESTED.items():
        if key in str(name):
            return cls
    return None


def config_from_dict(raw):
    return _build(PipelineConfig, raw, "").validate()


def load_config(path):
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})", str(path)) from exc
    return config_from_dict(raw)
