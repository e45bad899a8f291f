"""Motion generation: four body-semantic BiLSTM branches over embedded inputs.

The network embeds the concatenated bowing/fingering one-hots (default 27 ->
16) and the log-Mel features (F -> 128), concatenates both embeddings per
frame, and feeds the result to one bidirectional LSTM branch per body group
(left hand, left arm, right hand & arm, others). Each branch ends in dropout
and a linear head emitting 3 coordinates per joint of its group; branch
outputs are scattered into the T×75×3 output by joint index.

Losses: per-frame L1 joint-position loss, an L1 displacement loss on
frame-to-frame differences (both averaged by 1/T; the displacement sum has
T-1 terms), and their weighted total.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DimensionMismatch, RangeError, TooShort

LEAKY_SLOPE = 0.01

BRANCH_NAMES = ("left_hand", "left_arm", "right_hand_arm", "others")

_FINGERS = ("thumb", "index", "middle", "ring", "pinky")
_HAND_SEGMENTS = ("knuckle", "proximal", "intermediate", "tip")

#: Documented default 75-joint layout. Body core, face, and legs form the
#: "others" group; arm and hand joints carry the bowing/fingering semantics.
JOINT_NAMES = (
    # others (29)
    "pelvis", "spine_1", "spine_2", "spine_3", "chest", "sternum", "neck",
    "head", "head_top", "nose", "jaw", "left_eye", "right_eye", "left_ear",
    "right_ear", "left_clavicle", "right_clavicle", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle", "left_heel",
    "right_heel", "left_foot_ball", "right_foot_ball", "left_toe", "right_toe",
    # left arm (3)
    "left_shoulder", "left_elbow", "left_wrist",
    # right arm + right hand (23)
    "right_shoulder", "right_elbow", "right_wrist",
    *[f"right_{f}_{s}" for f in _FINGERS for s in _HAND_SEGMENTS],
    # left hand (20)
    *[f"left_{f}_{s}" for f in _FINGERS for s in _HAND_SEGMENTS],
)


@dataclass
class SkeletonSchema:
    """Joint-count plus the four-way body partition and metric subsets."""

    n_joints: int
    groups: dict[str, list[int]]
    eval_groups: dict[str, list[int]]
    joint_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if set(self.groups) != set(BRANCH_NAMES):
            raise ConfigError(
                f"groups must be exactly {BRANCH_NAMES}, got {sorted(self.groups)}")
        seen = sorted(i for idx in self.groups.values() for i in idx)
        if seen != list(range(self.n_joints)):
            raise ConfigError(
                f"groups must partition 0..{self.n_joints - 1} exactly")
        for key, parent in (("RA", "right_hand_arm"), ("LA", "left_arm"),
                            ("LF", "left_hand")):
            if key not in self.eval_groups:
                raise ConfigError(f"eval_groups must define '{key}'")
            extra = set(self.eval_groups[key]) - set(self.groups[parent])
            if extra:
                raise ConfigError(
                    f"eval group '{key}' indices {sorted(extra)} fall outside "
                    f"the '{parent}' group")

    def group_indices(self, name: str) -> list[int]:
        if name in self.groups:
            return self.groups[name]
        if name in self.eval_groups:
            return self.eval_groups[name]
        raise RangeError(f"unknown joint group '{name}'")

    def all_joints(self) -> list[int]:
        return list(range(self.n_joints))

    def to_json(self, path: str | Path) -> None:
        payload = {
            "n_joints": self.n_joints,
            "groups": self.groups,
            "eval_groups": self.eval_groups,
            "joint_names": list(self.joint_names) if self.joint_names else None,
        }
        Path(path).write_text(json.dumps(payload, indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "SkeletonSchema":
        payload = json.loads(Path(path).read_text())
        names = payload.get("joint_names")
        return cls(n_joints=payload["n_joints"],
                   groups={k: list(v) for k, v in payload["groups"].items()},
                   eval_groups={k: list(v) for k, v in payload["eval_groups"].items()},
                   joint_names=tuple(names) if names else None)


def default_skeleton() -> SkeletonSchema:
    """75-joint layout: left_hand 20, left_arm 3, right_hand_arm 23, others 29."""
    groups = {
        "others": list(range(0, 29)),
        "left_arm": list(range(29, 32)),
        "right_hand_arm": list(range(32, 55)),
        "left_hand": list(range(55, 75)),
    }
    eval_groups = {
        "RA": [JOINT_NAMES.index("right_elbow"), JOINT_NAMES.index("right_wrist")],
        "LA": list(range(29, 32)),
        "LF": list(range(55, 75)),
    }
    return SkeletonSchema(n_joints=75, groups=groups, eval_groups=eval_groups,
                          joint_names=JOINT_NAMES)


@dataclass
class MotionSequence:
    """T×N×3 joint positions at a fixed frame rate."""

    data: np.ndarray
    frame_rate: float
    schema: SkeletonSchema | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise DimensionMismatch(
                f"motion must be T×N×3, got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise DimensionMismatch("motion contains non-finite values")
        if self.schema is not None and self.data.shape[1] != self.schema.n_joints:
            raise DimensionMismatch(
                f"motion has {self.data.shape[1]} joints, "
                f"schema expects {self.schema.n_joints}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_joints(self) -> int:
        return self.data.shape[1]


def _default_branches() -> dict[str, tuple[int, int]]:
    return {"left_hand": (2, 256), "left_arm": (2, 256),
            "right_hand_arm": (2, 512), "others": (3, 128)}


@dataclass
class MotionBranchConfig:
    """Per-branch (layers, hidden size) plus embedding widths.

    ``bf_dim`` shrinks below 27 when a feature stream is ablated away.
    ``single_branch`` replaces the four branches by one (layers, hidden)
    BiLSTM emitting every joint.
    """

    branches: dict[str, tuple[int, int]] = field(default_factory=_default_branches)
    dropout: float = 0.3
    bf_embed_dim: int = 16
    mel_embed_dim: int = 128
    bf_dim: int = 27
    n_mels: int = 128
    single_branch: tuple[int, int] | None = None

    def __post_init__(self):
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        for dim in (self.bf_embed_dim, self.mel_embed_dim, self.bf_dim, self.n_mels):
            if dim <= 0:
                raise ConfigError("all widths must be positive")


class MotionNet(nn.Module):
    """Embeddings -> concat -> parallel BiLSTM branches -> per-group heads."""

    def __init__(self, config: MotionBranchConfig, schema: SkeletonSchema):
        super().__init__()
        if config.single_branch is None and set(config.branches) != set(schema.groups):
            raise ConfigError(
                f"branch names {sorted(config.branches)} must match schema "
                f"groups {sorted(schema.groups)}")
        self.config = config
        self.schema = schema
        self.bf_embed = nn.Linear(config.bf_dim, config.bf_embed_dim)
        self.mel_embed = nn.Linear(config.n_mels, config.mel_embed_dim)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)
        feat_dim = config.bf_embed_dim + config.mel_embed_dim

        if config.single_branch is not None:
            layers, hidden = config.single_branch
            self.branch_groups = {"all": schema.all_joints()}
            specs = {"all": (layers, hidden)}
        else:
            self.branch_groups = {name: schema.groups[name]
                                  for name in sorted(config.branches)}
            specs = {name: config.branches[name] for name in self.branch_groups}

        self.rnns = nn.ModuleDict()
        self.heads = nn.ModuleDict()
        for name, (layers, hidden) in specs.items():
            self.rnns[name] = nn.LSTM(feat_dim, hidden, num_layers=layers,
                                      bidirectional=True, batch_first=True)
            self.heads[name] = nn.Linear(2 * hidden,
                                         3 * len(self.branch_groups[name]))
        self.drop = nn.Dropout(config.dropout)

    def forward(self, bf: torch.Tensor, mel: torch.Tensor) -> torch.Tensor:
        """(B,T,bf_dim), (B,T,F) -> (B,T,N,3); branch outputs scattered by index."""
        if bf.shape[-1] != self.config.bf_dim:
            raise DimensionMismatch(
                f"bf input width {bf.shape[-1]} != configured {self.config.bf_dim}")
        if mel.shape[-1] != self.config.n_mels:
            raise DimensionMismatch(
                f"mel input width {mel.shape[-1]} != configured {self.config.n_mels}")
        if bf.shape[:-1] != mel.shape[:-1]:
            raise DimensionMismatch(
                f"bf frames {tuple(bf.shape[:-1])} != mel frames "
                f"{tuple(mel.shape[:-1])}")
        feats = torch.cat([self.act(self.bf_embed(bf)),
                           self.act(self.mel_embed(mel))], dim=-1)
        b, t = feats.shape[0], feats.shape[1]
        out = feats.new_zeros((b, t, self.schema.n_joints, 3))
        for name, joints in self.branch_groups.items():
            seq, _ = self.rnns[name](feats)
            coords = self.heads[name](self.drop(seq)).view(b, t, len(joints), 3)
            out[:, :, joints, :] = coords
        return out


def build_motion_network(config: MotionBranchConfig,
                         schema: SkeletonSchema) -> MotionNet:
    return MotionNet(config, schema)


@torch.no_grad()
def motion_forward(network: MotionNet, bf: np.ndarray, mel: np.ndarray,
                   frame_rate: float = 30.0) -> MotionSequence:
    """Run the frozen network on one T-frame sequence (unbatched I/O)."""
    bf = np.asarray(bf, dtype=np.float32)
    mel = np.asarray(mel, dtype=np.float32)
    if bf.ndim != 2 or mel.ndim != 2 or bf.shape[0] != mel.shape[0]:
        raise DimensionMismatch(
            f"expected matching T×d inputs, got {bf.shape} and {mel.shape}")
    was_training = network.training
    network.eval()
    try:
        out = network(torch.from_numpy(bf)[None], torch.from_numpy(mel)[None])
    finally:
        network.train(was_training)
    return MotionSequence(data=out[0].double().numpy(), frame_rate=frame_rate,
                          schema=network.schema)


def _check_pair(j: torch.Tensor, j_hat: torch.Tensor) -> None:
    if j.shape != j_hat.shape:
        raise DimensionMismatch(f"shape mismatch: {tuple(j.shape)} vs "
                                f"{tuple(j_hat.shape)}")
    if j.dim() not in (3, 4) or j.shape[-1] != 3:
        raise DimensionMismatch(
            f"expected (T,N,3) or (B,T,N,3), got {tuple(j.shape)}")


def jp_loss(j: torch.Tensor, j_hat: torch.Tensor) -> torch.Tensor:
    """(1/T) sum_t sum_n ||j - j_hat||_1 (mean over batch when batched)."""
    _check_pair(j, j_hat)
    t = j.shape[-3]
    per_seq = (j - j_hat).abs().sum(dim=(-1, -2, -3)) / t
    return per_seq.mean()


def dis_loss(j: torch.Tensor, j_hat: torch.Tensor) -> torch.Tensor:
    """(1/T) sum over the T-1 frame-to-frame displacement differences, L1."""
    _check_pair(j, j_hat)
    t = j.shape[-3]
    if t < 2:
        raise TooShort(f"displacement loss needs T >= 2 frames, got {t}")
    d = j.diff(dim=-3) - j_hat.diff(dim=-3)
    per_seq = d.abs().sum(dim=(-1, -2, -3)) / t
    return per_seq.mean()


def total_loss(j: torch.Tensor, j_hat: torch.Tensor,
               lam: float = 0.3) -> torch.Tensor:
    """jp_loss + lam * dis_loss; lam == 0 reduces exactly to jp_loss."""
    if lam < 0:
        raise RangeError(f"displacement weight must be >= 0, got {lam}")
    if lam == 0:
        return jp_loss(j, j_hat)
    return jp_loss(j, j_hat) + lam * dis_loss(j, j_hat)
