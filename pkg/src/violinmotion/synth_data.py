"""Synthetic corpus with a known label->feature and label->motion mapping.

Every piece is built from a random non-overlapping note-event sequence:

* Features (T×F, same space as the log-Mel front-end). The frequency axis
  is split into eighths. The first four eighths are per-stream amplitude
  regions: a bow ramp (rising over the note for an up-bow, falling for a
  down-bow), a string region at amplitude string/2, a finger region at
  finger/2, and a position region at position/4. The upper half holds the
  distinct band-energy template of the active (string, finger) pair (one
  sub-band out of 20). Amplitude regions are deliberately wide so the
  classifier's frequency max-pooling preserves them; silence frames are
  all-zero. Gaussian noise of standard deviation ``snr`` is added
  everywhere. With the default 128 feature bins, region boundaries align
  exactly with the classifier's total 16x frequency pooling.
* Motion (T×75×3): a rest pose plus one additive offset per label stream,
  taken from a fixed sinusoid bank keyed on (class, joint, axis) and
  weighted per body group so each stream moves "its" body parts the most.
  Silence maps to the rest pose. Small positional noise is added, then a
  3-frame moving average keeps the ground truth smooth.

Everything is deterministic given the corpus seed (per-piece child seeds).
``min_tuple_separation`` reports the guaranteed per-frame L1 gap between
the motion poses of any two distinct class tuples, minimized over body
groups, which is what makes the motion task learnable by construction.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np
from scipy.spatial.distance import pdist

from .audio_features import MelConfig, MelSpectrogram
from .dataset_io import AlignedSample, SplitSpec
from .errors import ConfigError
from .labels import NoteEvent, events_to_frames
from .motion_model import MotionSequence, SkeletonSchema, default_skeleton

#: Standard deviation of the positional noise added before smoothing.
MOTION_NOISE = 0.01

#: Amplitude steps of the string / finger / position feature regions.
STRING_STEP = 0.5
FINGER_STEP = 0.5
POSITION_STEP = 0.25

_N_SF_BANDS = 20

#: How strongly each label stream displaces each body group.
_GROUP_GAIN = {
    "bow": {"left_hand": 0.10, "left_arm": 0.10, "right_hand_arm": 0.80,
            "others": 0.15},
    "str": {"left_hand": 0.50, "left_arm": 0.70, "right_hand_arm": 0.30,
            "others": 0.10},
    "fing": {"left_hand": 0.80, "left_arm": 0.20, "right_hand_arm": 0.10,
             "others": 0.05},
    "pos": {"left_hand": 0.40, "left_arm": 0.50, "right_hand_arm": 0.10,
            "others": 0.05},
}
_STREAM_FREQ = {"bow": 0.37, "str": 0.59, "fing": 0.83, "pos": 1.11}
_STREAM_PHASE = {"bow": 0.0, "str": 1.3, "fing": 2.6, "pos": 3.9}
_STREAM_CLASSES = {"bow": 2, "str": 4, "fing": 5, "pos": 12}


@dataclass(frozen=True)
class SynthConfig:
    n_pieces: int = 32
    piece_frames: int = 300
    frame_rate: float = 30.0
    n_mels: int = 128
    seed: int = 0
    note_rate: float = 1.0   # mean notes per second
    snr: float = 0.1         # feature noise standard deviation

    def __post_init__(self):
        if self.piece_frames < 60:
            raise ConfigError(f"piece_frames must be >= 60, got {self.piece_frames}")
        if self.snr < 0:
            raise ConfigError(f"snr must be >= 0, got {self.snr}")
        if self.n_pieces < 1:
            raise ConfigError("need at least one piece")
        if self.n_mels < 2 * _N_SF_BANDS:
            raise ConfigError(
                f"n_mels must be >= {2 * _N_SF_BANDS} to fit the pair "
                f"template bands")
        if self.note_rate <= 0:
            raise ConfigError("note_rate must be positive")


def region_bins(region: str, n_mels: int) -> slice:
    """Frequency bins of a feature region: bow/string/finger/position eighths
    plus the (string, finger) template bank in the upper half."""
    eighth = n_mels // 8
    starts = {"bow": 0, "string": 1, "finger": 2, "position": 3}
    if region == "sf_bank":
        return slice(n_mels // 2, n_mels)
    return slice(starts[region] * eighth, (starts[region] + 1) * eighth)


def sf_band(string: int, finger: int, n_mels: int) -> slice:
    """Sub-band of the pair template bank lit for (string, finger)."""
    bank = region_bins("sf_bank", n_mels)
    width = (bank.stop - bank.start) // _N_SF_BANDS
    index = (string - 1) * 5 + (finger - 1)
    return slice(bank.start + index * width, bank.start + (index + 1) * width)


def _rest_pose(schema: SkeletonSchema) -> np.ndarray:
    n = schema.n_joints
    joints = np.arange(n)[:, None]
    axes = np.arange(3)[None, :]
    return 0.5 * np.sin(2 * np.pi * joints / n + axes * 2 * np.pi / 3)


def _offset_tables(schema: SkeletonSchema) -> dict[str, np.ndarray]:
    """Per-stream (n_classes+1, N, 3) additive pose offsets; silence row is 0."""
    n = schema.n_joints
    gain = np.zeros(n)
    tables = {}
    for stream, n_classes in _STREAM_CLASSES.items():
        for group, idx in schema.groups.items():
            gain[idx] = _GROUP_GAIN[stream][group]
        classes = np.arange(1, n_classes + 1)[:, None, None]
        joints = np.arange(1, n + 1)[None, :, None]
        axes = np.arange(3)[None, None, :]
        table = gain[None, :, None] * np.sin(
            2 * np.pi * _STREAM_FREQ[stream] * classes * joints / n
            + axes * 2 * np.pi / 3 + _STREAM_PHASE[stream])
        tables[stream] = np.concatenate(
            [table, np.zeros((1, n, 3))], axis=0)  # last row = silence
    return tables


def min_tuple_separation(schema: SkeletonSchema | None = None) -> float:
    """Smallest per-frame, per-group L1 gap between distinct tuple poses."""
    schema = schema or default_skeleton()
    tables = _offset_tables(schema)
    tuples = list(product(range(1, 3), range(1, 5), range(1, 6), range(1, 13)))
    tuples.append((3, 5, 6, 13))  # the all-silence tuple
    poses = np.stack([
        tables["bow"][b - 1] + tables["str"][s - 1]
        + tables["fing"][f - 1] + tables["pos"][p - 1]
        for b, s, f, p in tuples])
    delta = np.inf
    for idx in schema.groups.values():
        flat = poses[:, idx, :].reshape(len(tuples), -1)
        delta = min(delta, float(pdist(flat, metric="cityblock").min()))
    return delta


def _sample_events(rng: np.random.Generator, config: SynthConfig
                   ) -> list[NoteEvent]:
    duration_s = config.piece_frames / config.frame_rate
    events = []
    t = 0.0
    bow = int(rng.integers(1, 3))
    while True:
        if rng.random() < 0.25:
            t += float(rng.uniform(0.1, 0.5))
        dur = float(rng.uniform(0.4, 1.6)) / config.note_rate
        offset = min(t + dur, duration_s)
        if offset - t < 0.1:
            break
        events.append(NoteEvent(
            onset_s=t, offset_s=offset, bow=bow,
            string=int(rng.integers(1, 5)),
            finger=int(rng.integers(1, 6)),
            position=int(rng.integers(1, 13))))
        bow = 3 - bow if rng.random() < 0.8 else bow
        t = offset
    return events


def _render_features(events: list[NoteEvent], config: SynthConfig,
                     rng: np.random.Generator) -> np.ndarray:
    t_frames, f = config.piece_frames, config.n_mels
    feats = np.zeros((t_frames, f))
    centers = (np.arange(t_frames) + 0.5) / config.frame_rate
    for ev in events:
        mask = (centers >= ev.onset_s) & (centers < ev.offset_s)
        if not mask.any():
            continue
        progress = (centers[mask] - ev.onset_s) / (ev.offset_s - ev.onset_s)
        ramp = progress if ev.bow == 1 else 1.0 - progress
        feats[mask, region_bins("bow", f)] = ramp[:, None]
        feats[mask, region_bins("string", f)] = ev.string * STRING_STEP
        feats[mask, region_bins("finger", f)] = ev.finger * FINGER_STEP
        feats[mask, region_bins("position", f)] = ev.position * POSITION_STEP
        feats[mask, sf_band(ev.string, ev.finger, f)] = 1.0
    if config.snr > 0:
        feats += rng.normal(0.0, config.snr, size=feats.shape)
    return feats


def _smooth3(data: np.ndarray) -> np.ndarray:
    padded = np.concatenate([data[:1], data, data[-1:]], axis=0)
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def _render_motion(label_classes: dict[str, np.ndarray],
                   tables: dict[str, np.ndarray], rest: np.ndarray,
                   rng: np.random.Generator) -> np.ndarray:
    pose = rest[None].repeat(len(label_classes["bow"]), axis=0)
    for stream, table in tables.items():
        pose = pose + table[label_classes[stream] - 1]
    pose += rng.normal(0.0, MOTION_NOISE, size=pose.shape)
    return _smooth3(pose)


def generate_corpus(config: SynthConfig
                    ) -> tuple[list[AlignedSample], SplitSpec]:
    """Deterministic synthetic corpus plus a default train/val/test split."""
    schema = default_skeleton()
    tables = _offset_tables(schema)
    rest = _rest_pose(schema)
    mel_config = MelConfig(n_mels=config.n_mels)
    children = np.random.SeedSequence(config.seed).spawn(config.n_pieces)

    samples = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        events = _sample_events(rng, config)
        labels = events_to_frames(events, config.frame_rate, config.piece_frames)
        feats = _render_features(events, config, rng)
        classes = {name: labels.stream(name).argmax(axis=1) + 1
                   for name in tables}
        motion = _render_motion(classes, tables, rest, rng)
        samples.append(AlignedSample(
            mel=MelSpectrogram(data=feats, config=mel_config),
            labels=labels,
            motion=MotionSequence(data=motion, frame_rate=config.frame_rate,
                                  schema=schema),
            frame_rate=config.frame_rate,
            piece_id=f"synth_{i:03d}",
            performer_id=f"P{1 + i % 3}"))

    ids = [s.piece_id for s in samples]
    n_val = max(1, config.n_pieces // 8) if config.n_pieces >= 3 else 0
    n_test = n_val
    split = SplitSpec(train=ids[:config.n_pieces - n_val - n_test],
                      val=ids[config.n_pieces - n_val - n_test:
                              config.n_pieces - n_test],
                      test=ids[config.n_pieces - n_test:])
    return samples, split
