"""Run configuration: nested dataclasses, strict JSON loading, stable hashing.

Every knob carries a default so a run is fully specified by an empty file.
Unknown keys are rejected instead of silently ignored; ablation variants are
expressed as small config deltas on top of the defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidInputError

VERSION = "msmvc-0.1.0"


@dataclass
class SignalConfig:
    sample_rate: int = 16000
    win_length: int = 800          # 50 ms
    hop_length: int = 200          # 12.5 ms
    n_fft: int = 1024
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = 1e-5
    f0_min: float = 50.0
    f0_max: float = 500.0
    voicing_threshold: float = 0.45
    gl_iters: int = 60             # default Griffin-Lim iteration count


@dataclass
class ExtractorSlotConfig:
    kind: str = "toy_bn"           # toy_bn | toy_ssl | external
    external_dir: str = ""         # per-utterance feature files when kind == external


@dataclass
class ExtractorConfig:
    content: ExtractorSlotConfig = field(
        default_factory=lambda: ExtractorSlotConfig(kind="toy_bn"))
    ssl: ExtractorSlotConfig = field(
        default_factory=lambda: ExtractorSlotConfig(kind="toy_ssl"))
    bn_dim: int = 256
    context_frames: int = 2        # +-2 mel frames stacked for the content net
    content_hidden: int = 256
    content_epochs: int = 6
    content_lr: float = 1e-3
    content_batch: int = 256
    ssl_groups: int = 2
    codebook_size: int = 64
    kmeans_max_frames: int = 20000


@dataclass
class StylenetConfig:
    gamma: int = 16
    d_global: int = 4
    d_local: int = 4
    d_e: int = 8                   # per-track prosody embedding width
    d_spk: int = 32
    ssl_embed_dim: int = 32        # per SSL group
    enable_global: bool = True
    enable_local: bool = True
    enable_frame: bool = True
    global_filters: tuple = (32, 32, 64, 64, 128, 128)
    local_filters: tuple = (32, 32, 64, 64, 128, 128)
    global_post_tanh: bool = True
    min_global_frames: int = 64    # shorter inputs are zero-padded with a warning


@dataclass
class ConvnetConfig:
    blocks: int = 1
    heads: int = 8
    conv_kernel: int = 31
    ff_expansion: int = 1
    d_enc: int = 128
    prenet_dim: int = 128
    prenet_dropout: float = 0.5
    decoder_rnn_dim: int = 256
    postnet_channels: int = 128
    postnet_layers: int = 5
    postnet_kernel: int = 5


@dataclass
class ConstraintsConfig:
    conv_channels: tuple = (32, 32, 64, 64)
    gru_dim: int = 128
    fc_dims: tuple = (64, 64)
    use_style_descriptor: bool = True   # ablation: w/o style-matching constraint
    use_speaker_classifier: bool = True  # ablation: w/o speaker classifier
    descriptor_epochs: int = 60
    descriptor_lr: float = 5e-4
    descriptor_batch: int = 8
    accuracy_floor: float = 0.8     # warn (not fail) below this held-out accuracy


@dataclass
class StageConfig:
    stage: str = "reconstruction"   # reconstruction | finetune
    epochs: int = 60
    batch_size: int = 16
    lr0: float = 1e-3
    decay_rate: float = 0.7
    decay_every: int = 10
    trainable_scope: str = "all"    # all | decoder_only
    mode_schedule: str = "reconstruction"  # reconstruction | alternating

    def validate(self) -> None:
        if self.stage not in ("reconstruction", "finetune"):
            raise InvalidInputError(f"unknown stage {self.stage!r}")
        if self.stage == "finetune" and self.trainable_scope != "decoder_only":
            raise InvalidInputError("finetune stage requires trainable_scope=decoder_only")
        if self.stage == "reconstruction" and self.trainable_scope != "all":
            raise InvalidInputError("reconstruction stage requires trainable_scope=all")


@dataclass
class TrainkitConfig:
    recon: StageConfig = field(default_factory=lambda: StageConfig(
        stage="reconstruction", epochs=60, batch_size=16, lr0=1e-3,
        decay_rate=0.7, decay_every=10, trainable_scope="all",
        mode_schedule="reconstruction"))
    finetune: StageConfig = field(default_factory=lambda: StageConfig(
        stage="finetune", epochs=18, batch_size=16, lr0=1e-4,
        decay_rate=0.5, decay_every=6, trainable_scope="decoder_only",
        mode_schedule="alternating"))
    crop_frames: int = 128
    checkpoint_every: int = 10
    convergence_rel_tol: float = 1e-3   # mean-loss improvement over the window
    convergence_window: int = 10
    exclude_source_speaker: bool = True  # simulation sampling rule


@dataclass
class EvalkitConfig:
    target_speaker: str = "spk00"
    gl_iters: int = 32              # round-trip inversion for f0 measurement
    per_utterance_csv: bool = False


@dataclass
class RunConfig:
    seed: int = 1234
    signal: SignalConfig = field(default_factory=SignalConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    stylenet: StylenetConfig = field(default_factory=StylenetConfig)
    convnet: ConvnetConfig = field(default_factory=ConvnetConfig)
    constraints: ConstraintsConfig = field(default_factory=ConstraintsConfig)
    trainkit: TrainkitConfig = field(default_factory=TrainkitConfig)
    evalkit: EvalkitConfig = field(default_factory=EvalkitConfig)

    def to_dict(self) -> dict:
        return _asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def validate(self) -> None:
        self.trainkit.recon.validate()
        self.trainkit.finetune.validate()
        for slot, allowed in ((self.extractor.content, ("toy_bn", "external")),
                              (self.extractor.ssl, ("toy_ssl", "external"))):
            if slot.kind not in allowed:
                raise InvalidInputError(
                    f"extractor kind {slot.kind!r} not in {allowed}")


def _asdict(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_asdict(v) for v in obj]
    return obj


def _merge(obj, data: dict, path: str):
    for key, value in data.items():
        names = {f.name: f for f in dataclasses.fields(obj)}
        if key not in names:
            raise InvalidInputError(f"unknown config key {path + key!r}")
        current = getattr(obj, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise InvalidInputError(f"config key {path + key!r} expects an object")
            _merge(current, value, path + key + ".")
        else:
            setattr(obj, key, _coerce(current, value, path + key))
    return obj


def _coerce(current, value, path: str):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise InvalidInputError(f"config key {path!r} expects a boolean")
        return value
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise InvalidInputError(f"config key {path!r} expects an integer")
        return int(value)
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise InvalidInputError(f"config key {path!r} expects a number")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise InvalidInputError(f"config key {path!r} expects a string")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise InvalidInputError(f"config key {path!r} expects a list")
        return tuple(value)
    raise InvalidInputError(f"config key {path!r} has unsupported type")


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from defaults, an optional JSON file, and a dict delta."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise InvalidInputError(f"config file {path} must contain a JSON object")
        _merge(cfg, data, "")
    if overrides:
        _merge(cfg, overrides, "")
    cfg.validate()
    return cfg


def apply_paper_schedule(cfg: RunConfig) -> RunConfig:
    """Replace the desk-scale schedule with the published full-scale one."""
    cfg.trainkit.recon.epochs = 240
    cfg.trainkit.recon.batch_size = 32
    cfg.trainkit.recon.lr0 = 1e-3
    cfg.trainkit.recon.decay_rate = 0.7
    cfg.trainkit.recon.decay_every = 20
    cfg.trainkit.finetune.epochs = 70
    cfg.trainkit.finetune.batch_size = 32
    cfg.trainkit.finetune.lr0 = 1e-6
    cfg.trainkit.finetune.decay_rate = 0.5
    cfg.trainkit.finetune.decay_every = 20
    return cfg


ABLATION_VARIANTS = ("full", "no_global", "no_local", "no_frame",
                     "no_speaker_classifier", "no_ser", "no_simulation")


def apply_variant(cfg: RunConfig, variant: str) -> RunConfig:
    """Apply one ablation variant as a pure config delta."""
    if variant not in ABLATION_VARIANTS:
        raise InvalidInputError(
            f"unknown variant {variant!r}; expected one of {ABLATION_VARIANTS}")
    if variant == "no_global":
        cfg.stylenet.enable_global = False
    elif variant == "no_local":
        cfg.stylenet.enable_local = False
    elif variant == "no_frame":
        cfg.stylenet.enable_frame = False
    elif variant == "no_speaker_classifier":
        cfg.constraints.use_speaker_classifier = False
    elif variant == "no_ser":
        cfg.constraints.use_style_descriptor = False
    elif variant == "no_simulation":
        cfg.trainkit.finetune.mode_schedule = "reconstruction"
    return cfg


def canonical_json(data) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(data: dict) -> str:
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()[:16]
