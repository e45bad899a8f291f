"""Training loops, model selection, checkpointing, and ablation variants.

A run is fully deterministic given (config, seed, data): the global torch
RNG is re-seeded at entry, clip shuffling uses a dedicated numpy generator,
and no worker-based data loading is involved. Validation loss is computed
on whole pieces (no clipping) in eval mode; the checkpoint with the lowest
validation loss is retained, and training stops early after ``patience``
epochs without improvement. Epoch 0 is the initialized model's validation
loss, so histories always include the untrained baseline.
"""

from __future__ import annotations

import copy
import json
import math
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio_features import MelConfig
from .bf_model import BfBranchConfig, BfNet, build_bf_network, ce_loss
from .dataset_io import (AlignedSample, NormalizationStats, compute_norm_stats,
                         normalize_sample)
from .errors import (ConfigError, DivergenceError, EmptySplit, InvalidVariant,
                     MalformedFile)
from .labels import BF_OFFSETS, BF_WIDTH, CLASS_COUNTS, concat_bf
from .motion_model import (MotionBranchConfig, MotionNet, SkeletonSchema,
                           build_motion_network, default_skeleton, total_loss)

BF_TARGETS = ("bf_bow", "bf_str", "bf_fing", "bf_pos")
TARGETS = BF_TARGETS + ("motion",)
ABLATIONS = ("none", "no_bow", "no_str", "no_fing", "no_pos",
             "single_branch", "no_dis")
#: Ablations that drop one label stream's columns from the bf input.
_FEATURE_DROPS = {"no_bow": "bow", "no_str": "str", "no_fing": "fing",
                  "no_pos": "pos"}

BF_CKPT_VERSION = 1
MOTION_CKPT_VERSION = 1


@dataclass
class TrainConfig:
    target: str
    batch_size: int | None = None    # None -> 8 for bf targets, 32 for motion
    lr: float = 0.001
    betas: tuple[float, float] = (0.9, 0.999)
    max_epochs: int = 30
    patience: int = 10
    clip_length: int = 300
    clip_hop: int | None = None      # None -> clip_length (no overlap)
    seed: int = 0
    lam: float = 0.3                 # displacement-loss weight (motion)
    ablation: str = "none"
    grad_clip: float | None = 5.0    # global-norm clip; None disables
    bf_source: str = "gt"            # motion input: gt | predicted labels

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ConfigError(f"target must be one of {TARGETS}, got {self.target}")
        if self.ablation not in ABLATIONS:
            raise InvalidVariant(
                f"ablation must be one of {ABLATIONS}, got {self.ablation}")
        if self.ablation != "none" and self.target != "motion":
            raise InvalidVariant(
                f"ablation '{self.ablation}' applies to the motion target only")
        if self.batch_size is None:
            self.batch_size = 32 if self.target == "motion" else 8
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("need max_epochs >= 0 and patience >= 1")
        if 0 < self.max_epochs < self.patience:
            raise ConfigError(
                f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.clip_length < 2:
            raise ConfigError(f"clip_length must be >= 2, got {self.clip_length}")
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.bf_source not in ("gt", "predicted"):
            raise ConfigError("bf_source must be 'gt' or 'predicted'")

    @property
    def stream(self) -> str | None:
        """Label stream a bf target classifies, or None for motion."""
        return self.target[3:] if self.target in BF_TARGETS else None


def ablation_keep_columns(variant: str) -> np.ndarray:
    """Indices of the bf columns a variant keeps (all 27 unless dropping)."""
    if variant not in ABLATIONS:
        raise InvalidVariant(f"unknown ablation variant '{variant}'")
    keep = np.ones(BF_WIDTH, dtype=bool)
    if variant in _FEATURE_DROPS:
        stream = _FEATURE_DROPS[variant]
        start = BF_OFFSETS[stream]
        keep[start:start + CLASS_COUNTS[stream]] = False
    return np.flatnonzero(keep)


@dataclass
class Clip:
    piece_id: str
    mel: np.ndarray            # L×F
    streams: dict[str, np.ndarray]
    bf: np.ndarray             # L×27 (pre-ablation)
    motion: np.ndarray         # L×N×3


def _full_clip(sample: AlignedSample, bf: np.ndarray) -> Clip:
    return Clip(piece_id=sample.piece_id,
                mel=sample.mel.data.astype(np.float32),
                streams={k: sample.labels.stream(k) for k in CLASS_COUNTS},
                bf=bf.astype(np.float32),
                motion=sample.motion.data.astype(np.float32))


def make_clips(samples: list[AlignedSample], clip_length: int,
               hop: int | None = None,
               bf_override: dict[str, np.ndarray] | None = None) -> list[Clip]:
    """Sliding fixed-length windows per piece; short tails are dropped."""
    if clip_length < 2:
        raise ConfigError(f"clip_length must be >= 2, got {clip_length}")
    hop = hop or clip_length
    if hop < 1:
        raise ConfigError(f"hop must be >= 1, got {hop}")
    clips = []
    for sample in samples:
        full = _full_clip(sample, _bf_input(sample, bf_override))
        t = sample.n_frames
        for start in range(0, t - clip_length + 1, hop):
            end = start + clip_length
            clips.append(Clip(
                piece_id=sample.piece_id,
                mel=full.mel[start:end],
                streams={k: v[start:end] for k, v in full.streams.items()},
                bf=full.bf[start:end],
                motion=full.motion[start:end]))
    return clips


def _bf_input(sample: AlignedSample,
              bf_override: dict[str, np.ndarray] | None) -> np.ndarray:
    if bf_override is None:
        return concat_bf(sample.labels).data
    try:
        bf = np.asarray(bf_override[sample.piece_id])
    except KeyError as exc:
        raise ConfigError(
            f"bf_source=predicted but no predicted labels supplied for "
            f"piece {sample.piece_id}") from exc
    if bf.shape != (sample.n_frames, BF_WIDTH):
        raise ConfigError(
            f"predicted labels for {sample.piece_id} have shape {bf.shape}, "
            f"expected {(sample.n_frames, BF_WIDTH)}")
    return bf


def _batch_loss(net, kind: str, mel: torch.Tensor, bf: torch.Tensor,
                streams: dict[str, torch.Tensor], motion: torch.Tensor,
                stream: str | None, lam: float) -> torch.Tensor:
    if kind == "bf":
        return ce_loss(net(mel), streams[stream])
    return total_loss(net(bf, mel), motion, lam)


def _clips_to_tensors(clips: list[Clip], keep_cols: np.ndarray):
    mel = torch.from_numpy(np.stack([c.mel for c in clips]))
    bf = torch.from_numpy(np.stack([c.bf[:, keep_cols] for c in clips]))
    streams = {k: torch.from_numpy(np.stack([c.streams[k] for c in clips]))
               for k in CLASS_COUNTS}
    motion = torch.from_numpy(np.stack([c.motion for c in clips]))
    return mel, bf, streams, motion


@torch.no_grad()
def compute_validation_loss(net, kind: str, samples: list[AlignedSample],
                            *, stream: str | None = None, lam: float = 0.3,
                            keep_cols: np.ndarray | None = None,
                            bf_override: dict[str, np.ndarray] | None = None
                            ) -> float:
    """Unweighted mean of per-piece full-sequence losses, in eval mode."""
    keep_cols = keep_cols if keep_cols is not None else np.arange(BF_WIDTH)
    was_training = net.training
    net.eval()
    try:
        losses = []
        for sample in samples:
            mel, bf, streams, motion = _clips_to_tensors(
                [_full_clip(sample, _bf_input(sample, bf_override))], keep_cols)
            losses.append(float(_batch_loss(net, kind, mel, bf, streams,
                                            motion, stream, lam)))
    finally:
        net.train(was_training)
    return float(np.mean(losses))


@dataclass
class TrainResult:
    network: object
    kind: str
    config: TrainConfig
    model_config: object
    schema: SkeletonSchema | None
    stats: NormalizationStats
    mel_config: MelConfig
    best_epoch: int
    best_val_loss: float
    history: list[dict] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)

    def save(self, path: str | Path, stats_file: str | None = None) -> Path:
        """Write the single-file checkpoint; stats JSON goes beside it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if stats_file is None:
            stats_file = path.stem + ".stats.json"
        self.stats.to_json(path.parent / stats_file)
        payload = {
            "kind": self.kind,
            "state_dict": self.network.state_dict(),
            "model_config": asdict(self.model_config),
            "train_config": asdict(self.config),
            "mel_config": asdict(self.mel_config),
            "mel_config_hash": self.mel_config.config_hash(),
            "stats_file": stats_file,
            "stats_digest": self.stats.digest(),
            "epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "history": self.history,
            "rng_state": self.rng_state,
        }
        if self.kind == "bf":
            payload["bf_ckpt_version"] = BF_CKPT_VERSION
        else:
            payload["motion_ckpt_version"] = MOTION_CKPT_VERSION
            payload["schema"] = {
                "n_joints": self.schema.n_joints,
                "groups": self.schema.groups,
                "eval_groups": self.schema.eval_groups,
            }
        torch.save(payload, path)
        return path


def load_checkpoint(path: str | Path):
    """Rebuild (network, payload) from a checkpoint file.

    The referenced stats JSON must sit beside the checkpoint; inference
    without normalization stats is an error, not a silent pass-through.
    """
    path = Path(path)
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if "bf_ckpt_version" in payload:
        if payload["bf_ckpt_version"] != BF_CKPT_VERSION:
            raise MalformedFile(
                f"{path}: unsupported bf_ckpt_version "
                f"{payload['bf_ckpt_version']}")
        net = build_bf_network(BfBranchConfig(**_detuple(
            payload["model_config"], ("conv_channels", "pool_freq"),
            ("conv_kernels",))))
    elif "motion_ckpt_version" in payload:
        if payload["motion_ckpt_version"] != MOTION_CKPT_VERSION:
            raise MalformedFile(
                f"{path}: unsupported motion_ckpt_version "
                f"{payload['motion_ckpt_version']}")
        raw = dict(payload["model_config"])
        raw["branches"] = {k: tuple(v) for k, v in raw["branches"].items()}
        if raw.get("single_branch") is not None:
            raw["single_branch"] = tuple(raw["single_branch"])
        schema = SkeletonSchema(**payload["schema"])
        net = build_motion_network(MotionBranchConfig(**raw), schema)
    else:
        raise MalformedFile(f"{path}: not a recognized checkpoint file")
    net.load_state_dict(payload["state_dict"])
    net.eval()
    stats_path = path.parent / payload["stats_file"]
    if not stats_path.exists():
        raise MalformedFile(
            f"{path}: referenced stats file {payload['stats_file']} is "
            f"missing; cannot run without normalization stats")
    stats = NormalizationStats.from_json(stats_path)
    if stats.digest() != payload["stats_digest"]:
        raise MalformedFile(
            f"{stats_path}: stats digest does not match the checkpoint")
    payload["stats"] = stats
    return net, payload


def _detuple(config_dict: dict, tuple_keys: tuple, nested_keys: tuple = ()):
    out = dict(config_dict)
    for key in tuple_keys:
        out[key] = tuple(out[key])
    for key in nested_keys:
        out[key] = tuple(tuple(v) for v in out[key])
    return out


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.manual_seed(seed)


def train(config: TrainConfig,
          train_samples: list[AlignedSample],
          val_samples: list[AlignedSample],
          *,
          bf_config: BfBranchConfig | None = None,
          motion_config: MotionBranchConfig | None = None,
          schema: SkeletonSchema | None = None,
          stats: NormalizationStats | None = None,
          bf_override: dict[str, np.ndarray] | None = None,
          log_path: str | Path | None = None) -> TrainResult:
    """Optimize one model; returns the lowest-validation-loss checkpoint."""
    if not train_samples or not val_samples:
        raise EmptySplit("train and validation splits must both be non-empty")
    if config.bf_source == "predicted" and bf_override is None \
            and config.target == "motion":
        raise ConfigError(
            "bf_source='predicted' requires predicted label streams")

    _seed_everything(config.seed)
    stats = stats or compute_norm_stats(train_samples)
    norm_train = [normalize_sample(s, stats) for s in train_samples]
    norm_val = [normalize_sample(s, stats) for s in val_samples]
    n_mels = norm_train[0].mel.data.shape[1]
    mel_config = norm_train[0].mel.config
    keep_cols = ablation_keep_columns(config.ablation)

    kind = "motion" if config.target == "motion" else "bf"
    if kind == "bf":
        model_config = bf_config or BfBranchConfig(
            n_classes=CLASS_COUNTS[config.stream], n_mels=n_mels)
        if model_config.n_mels != n_mels:
            raise ConfigError(
                f"model expects {model_config.n_mels} feature channels, "
                f"data has {n_mels}")
        net: BfNet | MotionNet = build_bf_network(model_config)
        schema = None
    else:
        schema = schema or default_skeleton()
        model_config = motion_config or MotionBranchConfig(n_mels=n_mels)
        if model_config.n_mels != n_mels:
            raise ConfigError(
                f"model expects {model_config.n_mels} feature channels, "
                f"data has {n_mels}")
        expected_bf = len(keep_cols)
        if model_config.bf_dim != expected_bf:
            raise ConfigError(
                f"motion config bf_dim={model_config.bf_dim} but ablation "
                f"'{config.ablation}' keeps {expected_bf} columns")
        if config.ablation == "no_dis" and config.lam != 0:
            raise ConfigError("no_dis requires lam=0 (use run_ablation)")
        net = build_motion_network(model_config, schema)

    clips = make_clips(norm_train, config.clip_length, config.clip_hop,
                       bf_override=bf_override)
    if not clips:
        raise EmptySplit(
            f"no training clips: every piece is shorter than "
            f"clip_length={config.clip_length}")
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr,
                                 betas=config.betas)
    shuffle_rng = np.random.default_rng(config.seed)

    def val_loss() -> float:
        return compute_validation_loss(
            net, kind, norm_val, stream=config.stream, lam=config.lam,
            keep_cols=keep_cols, bf_override=bf_override)

    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None

    def log(epoch: int, train_loss: float | None, v: float) -> None:
        row = {"epoch": epoch, "train_loss": train_loss, "val_loss": v}
        history.append(row)
        if log_fh:
            log_fh.write(json.dumps(row) + "\n")
            log_fh.flush()

    try:
        best_val = val_loss()
        if not math.isfinite(best_val):
            raise DivergenceError(
                f"validation loss is non-finite at initialization: {best_val}")
        best_state = copy.deepcopy(net.state_dict())
        best_epoch = 0
        log(0, None, best_val)
        since_best = 0
        for epoch in range(1, config.max_epochs + 1):
            net.train()
            order = shuffle_rng.permutation(len(clips))
            total, seen = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                batch = [clips[i] for i in order[start:start + config.batch_size]]
                mel, bf, streams, motion = _clips_to_tensors(batch, keep_cols)
                optimizer.zero_grad()
                loss = _batch_loss(net, kind, mel, bf, streams, motion,
                                   config.stream, config.lam)
                loss.backward()
                if config.grad_clip:
                    torch.nn.utils.clip_grad_norm_(net.parameters(),
                                                   config.grad_clip)
                optimizer.step()
                total += loss.item() * len(batch)
                seen += len(batch)
            train_loss = total / seen
            v = val_loss()
            if not (math.isfinite(train_loss) and math.isfinite(v)):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}: "
                    f"train={train_loss}, val={v}")
            log(epoch, train_loss, v)
            if v < best_val:
                best_val = v
                best_state = copy.deepcopy(net.state_dict())
                best_epoch = epoch
                since_best = 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    break
    finally:
        if log_fh:
            log_fh.close()

    net.load_state_dict(best_state)
    net.eval()
    rng_state = {
        "torch": torch.get_rng_state(),
        "numpy": shuffle_rng.bit_generator.state,
    }
    return TrainResult(network=net, kind=kind, config=config,
                       model_config=model_config, schema=schema, stats=stats,
                       mel_config=mel_config, best_epoch=best_epoch,
                       best_val_loss=best_val, history=history,
                       rng_state=rng_state)


def run_ablation(base_config: TrainConfig, variant: str,
                 train_samples: list[AlignedSample],
                 val_samples: list[AlignedSample],
                 *, motion_config: MotionBranchConfig | None = None,
                 **train_kwargs) -> TrainResult:
    """Train one ablation variant of the motion model.

    ``no_*`` variants drop that stream's columns from the bf input,
    ``single_branch`` swaps the four branches for one (2, 512) BiLSTM, and
    ``no_dis`` zeroes the displacement-loss weight.
    """
    if variant not in ABLATIONS:
        raise InvalidVariant(f"unknown ablation variant '{variant}'")
    if base_config.target != "motion" and variant != "none":
        raise InvalidVariant(
            f"ablation '{variant}' applies to the motion target only")
    cfg = copy.deepcopy(base_config)
    cfg.ablation = variant
    if variant == "no_dis":
        cfg.lam = 0.0
    mc = copy.deepcopy(motion_config)
    if mc is None and base_config.target == "motion":
        mc = MotionBranchConfig(n_mels=train_samples[0].mel.data.shape[1])
    if variant in _FEATURE_DROPS:
        mc.bf_dim = len(ablation_keep_columns(variant))
    if variant == "single_branch" and mc.single_branch is None:
        mc.single_branch = (2, 512)
    return train(cfg, train_samples, val_samples, motion_config=mc,
                 **train_kwargs)


# -- experiment configuration file ---------------------------------------------

@dataclass
class ExperimentConfig:
    """Aggregated settings loaded from one JSON file (see README)."""

    mel: MelConfig
    frame_rate: float = 30.0
    bf_model: dict = field(default_factory=dict)       # BfBranchConfig kwargs
    motion_model: dict = field(default_factory=dict)   # MotionBranchConfig kwargs
    train: dict = field(default_factory=dict)          # TrainConfig kwargs
    schema_path: str | None = None
    split_path: str | None = None

    def bf_config(self, n_classes: int) -> BfBranchConfig:
        kwargs = _detuple(self.bf_model, (), ()) if self.bf_model else {}
        for key in ("conv_channels", "pool_freq"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        if "conv_kernels" in kwargs:
            kwargs["conv_kernels"] = tuple(tuple(k) for k in kwargs["conv_kernels"])
        kwargs.setdefault("n_mels", self.mel.n_mels)
        return BfBranchConfig(n_classes=n_classes, **kwargs)

    def motion_config(self) -> MotionBranchConfig:
        kwargs = dict(self.motion_model)
        if "branches" in kwargs:
            kwargs["branches"] = {k: tuple(v)
                                  for k, v in kwargs["branches"].items()}
        if kwargs.get("single_branch") is not None:
            kwargs["single_branch"] = tuple(kwargs["single_branch"])
        kwargs.setdefault("n_mels", self.mel.n_mels)
        return MotionBranchConfig(**kwargs)

    def train_config(self, target: str, **overrides) -> TrainConfig:
        kwargs = dict(self.train)
        kwargs.update(overrides)
        if "betas" in kwargs:
            kwargs["betas"] = tuple(kwargs["betas"])
        return TrainConfig(target=target, **kwargs)

    def schema(self) -> SkeletonSchema:
        if self.schema_path:
            return SkeletonSchema.from_json(self.schema_path)
        return default_skeleton()


def load_experiment_config(path: str | Path) -> ExperimentConfig:
    try:
        payload = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedFile(f"{path}: invalid JSON: {exc}") from exc
    mel = MelConfig(**payload.get("mel", {}))
    return ExperimentConfig(
        mel=mel,
        frame_rate=payload.get("frame_rate", 30.0),
        bf_model=payload.get("bf_model", {}),
        motion_model=payload.get("motion_model", {}),
        train=payload.get("train", {}),
        schema_path=payload.get("schema_path"),
        split_path=payload.get("split_path"))
