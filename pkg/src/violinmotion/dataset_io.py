"""Corpus ingestion: load, align, resample, normalize, and split recordings.

On-disk formats
---------------
* Audio: WAV, PCM 16/24-bit or float32; stereo is averaged to mono; files
  not at the canonical 44.1 kHz are resampled with a warning.
* Motion: CSV with header ``frame,j0_x,j0_y,j0_z,...`` (units meters), one
  row per capture frame, plus a sidecar JSON next to it (same name, ``.json``
  extension) declaring ``{"fps": ..., "n_joints": ...}``.
* Annotations: JSON, schema documented in :mod:`violinmotion.labels`.
* Splits: JSON ``{"train": [...], "val": [...], "test": [...],
  "held_out_performer": null}``.
* NormalizationStats: JSON with explicit arrays, ``"stats_version": 1``.
* Aligned-sample cache: one ``<piece_id>.npz`` per piece holding the feature
  matrix, the four label streams, the motion tensor, and a JSON metadata
  blob (frame rate, feature-config hash, synthetic flag).
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .audio_features import MelConfig, MelSpectrogram, mel_spectrogram, \
    normalize_mel
from .errors import (ConfigError, DimensionMismatch, DurationMismatch,
                     EmptySequence, EmptyTrainingSet, MalformedFile,
                     OverlappingSplits, RangeError, UnknownPieceId)
from .labels import STREAMS, LabelSequence, NoteEvent, events_to_frames, \
    load_annotation
from .motion_model import MotionSequence

CANONICAL_SAMPLE_RATE = 44100
#: Audio/motion duration disagreement beyond this rejects the recording.
DURATION_TOLERANCE_S = 0.5
#: Variances are floored here before any reciprocal square root.
VARIANCE_FLOOR = 1e-8

STATS_VERSION = 1


@dataclass
class Recording:
    """One performance piece: waveform, raw motion, and note annotations."""

    piece_id: str
    performer_id: str
    audio: np.ndarray
    sample_rate: int
    motion: MotionSequence
    annotations: list[NoteEvent]
    duration_s: float


@dataclass
class AlignedSample:
    """Frame-synchronous (features, labels, motion) triple for one piece."""

    mel: MelSpectrogram
    labels: LabelSequence
    motion: MotionSequence
    frame_rate: float
    piece_id: str = ""
    performer_id: str = "unknown"

    def __post_init__(self):
        t = {self.mel.n_frames, self.labels.n_frames, self.motion.n_frames}
        if len(t) != 1:
            raise DimensionMismatch(
                f"streams disagree on frame count: mel={self.mel.n_frames}, "
                f"labels={self.labels.n_frames}, motion={self.motion.n_frames}")

    @property
    def n_frames(self) -> int:
        return self.mel.n_frames


@dataclass
class NormalizationStats:
    """Training-split channel means/variances for features and motion."""

    mel_mean: np.ndarray   # (F,)
    mel_var: np.ndarray    # (F,)
    motion_mean: np.ndarray  # (N, 3)
    motion_var: np.ndarray   # (N, 3)

    def __post_init__(self):
        for name in ("mel_mean", "mel_var", "motion_mean", "motion_var"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.mel_mean.shape != self.mel_var.shape or self.mel_mean.ndim != 1:
            raise DimensionMismatch("mel stats must be matching F-vectors")
        if self.motion_mean.shape != self.motion_var.shape \
                or self.motion_mean.ndim != 2 or self.motion_mean.shape[1] != 3:
            raise DimensionMismatch("motion stats must be matching N×3 arrays")
        if np.any(self.mel_var <= 0) or np.any(self.motion_var <= 0):
            raise RangeError("variances must be strictly positive")

    def to_json(self, path: str | Path) -> None:
        payload = {
            "stats_version": STATS_VERSION,
            "mel_mean": self.mel_mean.tolist(),
            "mel_var": self.mel_var.tolist(),
            "motion_mean": self.motion_mean.tolist(),
            "motion_var": self.motion_var.tolist(),
        }
        Path(path).write_text(json.dumps(payload))

    @classmethod
    def from_json(cls, path: str | Path) -> "NormalizationStats":
        payload = json.loads(Path(path).read_text())
        if payload.get("stats_version") != STATS_VERSION:
            raise MalformedFile(
                f"{path}: unsupported stats_version "
                f"{payload.get('stats_version')!r}, expected {STATS_VERSION}")
        return cls(mel_mean=payload["mel_mean"], mel_var=payload["mel_var"],
                   motion_mean=payload["motion_mean"],
                   motion_var=payload["motion_var"])

    def digest(self) -> str:
        blob = json.dumps({
            "mel_mean": self.mel_mean.tolist(), "mel_var": self.mel_var.tolist(),
            "motion_mean": self.motion_mean.tolist(),
            "motion_var": self.motion_var.tolist()}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class SplitSpec:
    """Piece-level split; lists must be disjoint and cover the corpus."""

    train: list[str]
    val: list[str]
    test: list[str]
    held_out_performer: str | None = None

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps({
            "train": self.train, "val": self.val, "test": self.test,
            "held_out_performer": self.held_out_performer}, indent=2))

    @classmethod
    def from_json(cls, path: str | Path) -> "SplitSpec":
        payload = json.loads(Path(path).read_text())
        missing = {"train", "val", "test"} - payload.keys()
        if missing:
            raise MalformedFile(f"{path}: split file missing keys {sorted(missing)}")
        return cls(train=list(payload["train"]), val=list(payload["val"]),
                   test=list(payload["test"]),
                   held_out_performer=payload.get("held_out_performer"))


# -- file readers/writers -----------------------------------------------------

def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a WAV file as mono float64 in [-1, 1] plus its sample rate."""
    try:
        rate, data = wavfile.read(str(path))
    except Exception as exc:
        raise MalformedFile(f"{path}: cannot read WAV: {exc}") from exc
    if data.dtype == np.int16:
        wave = data / 2.0 ** 15
    elif data.dtype == np.int32:  # includes 24-bit PCM, left-shifted by scipy
        wave = data / 2.0 ** 31
    elif data.dtype == np.uint8:
        wave = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        wave = data.astype(np.float64)
    else:
        raise MalformedFile(f"{path}: unsupported WAV sample format {data.dtype}")
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim == 2:
        wave = wave.mean(axis=1)
    return wave, int(rate)


def motion_csv_header(n_joints: int) -> str:
    cols = [f"j{i}_{axis}" for i in range(n_joints) for axis in "xyz"]
    return ",".join(["frame"] + cols)


def _sidecar_path(motion_path: Path) -> Path:
    return motion_path.with_suffix(".json")


def read_motion_csv(path: str | Path) -> MotionSequence:
    """Read a motion CSV plus its fps/n_joints sidecar JSON."""
    path = Path(path)
    sidecar = _sidecar_path(path)
    if not sidecar.exists():
        raise MalformedFile(f"{path}: missing metadata sidecar {sidecar.name}")
    try:
        meta = json.loads(sidecar.read_text())
        fps = float(meta["fps"])
        n_joints = int(meta["n_joints"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise MalformedFile(f"{sidecar}: bad sidecar: {exc}") from exc
    if fps <= 0 or n_joints <= 0:
        raise MalformedFile(f"{sidecar}: fps and n_joints must be positive")

    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != motion_csv_header(n_joints):
            raise MalformedFile(
                f"{path}: header does not match the declared {n_joints}-joint "
                f"layout")
        try:
            data = np.loadtxt(fh, delimiter=",", ndmin=2, dtype=np.float64)
        except ValueError as exc:
            raise MalformedFile(f"{path}: unparsable motion rows: {exc}") from exc
    if data.size == 0:
        raise MalformedFile(f"{path}: no motion frames")
    if data.shape[1] != 1 + 3 * n_joints:
        raise MalformedFile(
            f"{path}: expected {1 + 3 * n_joints} columns, got {data.shape[1]}")
    frames = data[:, 1:].reshape(data.shape[0], n_joints, 3)
    return MotionSequence(data=frames, frame_rate=fps)


def write_motion_csv(path: str | Path, motion: MotionSequence) -> None:
    """Write motion + sidecar in the ingestion format (full float precision)."""
    path = Path(path)
    t, n = motion.n_frames, motion.n_joints
    flat = np.column_stack([np.arange(t, dtype=np.float64),
                            motion.data.reshape(t, 3 * n)])
    np.savetxt(path, flat, delimiter=",", fmt="%.17g",
               header=motion_csv_header(n), comments="")
    _sidecar_path(path).write_text(json.dumps(
        {"fps": motion.frame_rate, "n_joints": n}))


def load_audio(path: str | Path) -> tuple[np.ndarray, int]:
    """Read a WAV and resample to the canonical 44.1 kHz when necessary."""
    wave, rate = read_wav(path)
    if rate != CANONICAL_SAMPLE_RATE:
        warnings.warn(
            f"{path}: resampling {rate} Hz -> {CANONICAL_SAMPLE_RATE} Hz")
        g = math.gcd(rate, CANONICAL_SAMPLE_RATE)
        wave = resample_poly(wave, CANONICAL_SAMPLE_RATE // g, rate // g)
        rate = CANONICAL_SAMPLE_RATE
    return wave, rate


def load_recording(audio_path: str | Path, motion_path: str | Path,
                   annotation_path: str | Path) -> Recording:
    """Load one (audio, motion, annotation) triple and validate durations."""
    wave, rate = load_audio(audio_path)
    motion = read_motion_csv(motion_path)
    piece_id, performer_id, events = load_annotation(annotation_path)

    audio_s = len(wave) / rate
    motion_s = motion.n_frames / motion.frame_rate
    if abs(audio_s - motion_s) > DURATION_TOLERANCE_S:
        raise DurationMismatch(
            f"{piece_id}: audio lasts {audio_s:.3f} s but motion covers "
            f"{motion_s:.3f} s (tolerance {DURATION_TOLERANCE_S} s)")
    return Recording(piece_id=piece_id, performer_id=performer_id, audio=wave,
                     sample_rate=rate, motion=motion, annotations=events,
                     duration_s=audio_s)


# -- alignment ----------------------------------------------------------------

def features_for_waveform(wave: np.ndarray,
                          mel_config: MelConfig) -> MelSpectrogram:
    """Features on the shared frame grid: tail-padded so T = len(wave) // hop.

    Padding the waveform with window-hop zeros puts exactly one feature
    frame per 1/frame_rate period, which is what keeps features, labels,
    and motion index-aligned (and what inference must reuse).
    """
    padded = np.concatenate(
        [np.asarray(wave, dtype=np.float64),
         np.zeros(mel_config.window - mel_config.hop)])
    return mel_spectrogram(padded, mel_config)


def resample_motion(motion: MotionSequence, src_rate: float,
                    dst_rate: float) -> MotionSequence:
    """Linear per-joint time interpolation to round(T*dst/src) frames."""
    if src_rate <= 0 or dst_rate <= 0:
        raise RangeError(
            f"rates must be positive, got src={src_rate}, dst={dst_rate}")
    t_src = motion.n_frames
    if t_src == 0:
        raise EmptySequence("cannot resample a zero-frame motion sequence")
    if dst_rate == src_rate:
        return MotionSequence(data=motion.data.copy(), frame_rate=dst_rate,
                              schema=motion.schema)
    t_dst = int(math.floor(t_src * dst_rate / src_rate + 0.5))
    if t_dst == 0:
        raise EmptySequence(
            f"resampling {t_src} frames from {src_rate} to {dst_rate} Hz "
            f"yields no frames")
    src_pos = np.arange(t_dst, dtype=np.float64) * (src_rate / dst_rate)
    xp = np.arange(t_src, dtype=np.float64)
    flat = motion.data.reshape(t_src, -1)
    out = np.empty((t_dst, flat.shape[1]), dtype=np.float64)
    for c in range(flat.shape[1]):
        out[:, c] = np.interp(src_pos, xp, flat[:, c])
    return MotionSequence(data=out.reshape(t_dst, motion.n_joints, 3),
                          frame_rate=dst_rate, schema=motion.schema)


def align(recording: Recording, frame_rate: float,
          mel_config: MelConfig) -> AlignedSample:
    """Produce the frame-synchronous triple at the common frame rate.

    The waveform tail is padded with window-hop zeros so the feature frame
    grid matches the label/motion grid exactly (one feature frame per
    1/frame_rate period, T = len(audio) // hop).
    """
    if len(recording.audio) == 0:
        raise EmptySequence(f"{recording.piece_id}: zero-length audio")
    if recording.sample_rate != mel_config.sample_rate:
        raise ConfigError(
            f"recording is at {recording.sample_rate} Hz but the feature "
            f"config expects {mel_config.sample_rate} Hz")
    hop_exact = mel_config.sample_rate / frame_rate
    if frame_rate <= 0 or hop_exact != int(hop_exact):
        raise ConfigError(
            f"frame rate {frame_rate} must divide the sample rate "
            f"{mel_config.sample_rate} exactly")
    if mel_config.hop != int(hop_exact):
        raise ConfigError(
            f"feature hop {mel_config.hop} does not equal "
            f"sample_rate/frame_rate = {int(hop_exact)}")

    mel = features_for_waveform(recording.audio, mel_config)
    motion = resample_motion(recording.motion, recording.motion.frame_rate,
                             frame_rate)
    t_labels = len(recording.audio) // mel_config.hop
    t = min(mel.n_frames, motion.n_frames, t_labels)
    if t <= 0:
        raise EmptySequence(f"{recording.piece_id}: no aligned frames")
    labels = events_to_frames(recording.annotations, frame_rate, t)
    return AlignedSample(
        mel=MelSpectrogram(data=mel.data[:t], config=mel_config),
        labels=labels,
        motion=MotionSequence(data=motion.data[:t], frame_rate=frame_rate,
                              schema=motion.schema),
        frame_rate=frame_rate,
        piece_id=recording.piece_id,
        performer_id=recording.performer_id)


# -- normalization ------------------------------------------------------------

def compute_norm_stats(train_samples: list[AlignedSample]) -> NormalizationStats:
    """Population mean/variance over the concatenated time axis of the train set."""
    if not train_samples:
        raise EmptyTrainingSet("need at least one training sample for stats")
    n_mels = {s.mel.data.shape[1] for s in train_samples}
    n_joints = {s.motion.n_joints for s in train_samples}
    if len(n_mels) != 1 or len(n_joints) != 1:
        raise DimensionMismatch(
            f"training samples disagree on channel counts: F={n_mels}, "
            f"N={n_joints}")
    mel_cat = np.concatenate([s.mel.data for s in train_samples], axis=0)
    motion_cat = np.concatenate([s.motion.data for s in train_samples], axis=0)
    return NormalizationStats(
        mel_mean=mel_cat.mean(axis=0),
        mel_var=np.maximum(mel_cat.var(axis=0), VARIANCE_FLOOR),
        motion_mean=motion_cat.mean(axis=0),
        motion_var=np.maximum(motion_cat.var(axis=0), VARIANCE_FLOOR))


def normalize_motion(motion: MotionSequence,
                     stats: NormalizationStats) -> MotionSequence:
    if motion.n_joints != stats.motion_mean.shape[0]:
        raise DimensionMismatch(
            f"motion has {motion.n_joints} joints, stats cover "
            f"{stats.motion_mean.shape[0]}")
    data = (motion.data - stats.motion_mean) / np.sqrt(stats.motion_var)
    return MotionSequence(data=data, frame_rate=motion.frame_rate,
                          schema=motion.schema)


def denormalize_motion(motion: MotionSequence,
                       stats: NormalizationStats) -> MotionSequence:
    if motion.n_joints != stats.motion_mean.shape[0]:
        raise DimensionMismatch(
            f"motion has {motion.n_joints} joints, stats cover "
            f"{stats.motion_mean.shape[0]}")
    data = motion.data * np.sqrt(stats.motion_var) + stats.motion_mean
    return MotionSequence(data=data, frame_rate=motion.frame_rate,
                          schema=motion.schema)


def normalize_sample(sample: AlignedSample,
                     stats: NormalizationStats) -> AlignedSample:
    """Whiten features and motion; labels pass through untouched."""
    return AlignedSample(
        mel=normalize_mel(sample.mel, stats),
        labels=sample.labels,
        motion=normalize_motion(sample.motion, stats),
        frame_rate=sample.frame_rate,
        piece_id=sample.piece_id,
        performer_id=sample.performer_id)


# -- splitting ----------------------------------------------------------------

def split_dataset(corpus: list, spec: SplitSpec):
    """Partition corpus items (anything with piece_id/performer_id) by piece.

    With ``held_out_performer`` set, that performer's pieces become the test
    set and are removed from train/val regardless of where the spec listed
    them.
    """
    ids = [item.piece_id for item in corpus]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate piece_id in corpus")
    by_id = {item.piece_id: item for item in corpus}

    listed = spec.train + spec.val + spec.test
    if len(set(listed)) != len(listed):
        seen, dupes = set(), set()
        for pid in listed:
            (dupes if pid in seen else seen).add(pid)
        raise OverlappingSplits(
            f"piece ids listed more than once: {sorted(dupes)}")
    unknown = set(listed) - set(ids)
    if unknown:
        raise UnknownPieceId(f"split lists unknown pieces: {sorted(unknown)}")
    uncovered = set(ids) - set(listed)
    if uncovered:
        raise UnknownPieceId(
            f"pieces not assigned to any split: {sorted(uncovered)}")

    if spec.held_out_performer is not None:
        held = {pid for pid in ids
                if by_id[pid].performer_id == spec.held_out_performer}
        train = [by_id[p] for p in spec.train if p not in held]
        val = [by_id[p] for p in spec.val if p not in held]
        test = [by_id[p] for p in ids if p in held]
        return train, val, test
    return ([by_id[p] for p in spec.train], [by_id[p] for p in spec.val],
            [by_id[p] for p in spec.test])


# -- aligned-sample cache -------------------------------------------------------

def save_sample_cache(out_dir: str | Path, sample: AlignedSample,
                      synthetic: bool = False) -> Path:
    """Write one piece's aligned streams as ``<piece_id>.npz``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "piece_id": sample.piece_id,
        "performer_id": sample.performer_id,
        "frame_rate": sample.frame_rate,
        "mel_config": asdict(sample.mel.config),
        "mel_config_hash": sample.mel.config.config_hash(),
        "n_joints": sample.motion.n_joints,
        "synthetic": synthetic,
    }
    path = out_dir / f"{sample.piece_id}.npz"
    np.savez_compressed(
        path,
        mel=sample.mel.data,
        bow=sample.labels.bow, str=sample.labels.str,
        fing=sample.labels.fing, pos=sample.labels.pos,
        motion=sample.motion.data,
        meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(),
                           dtype=np.uint8))
    return path


def load_sample_cache(path: str | Path) -> tuple[AlignedSample, dict]:
    """Inverse of :func:`save_sample_cache`; returns (sample, metadata)."""
    with np.load(path) as archive:
        try:
            meta = json.loads(bytes(archive["meta"]).decode())
            config = MelConfig(**meta["mel_config"])
            labels = LabelSequence(**{name: archive[name].astype(np.float32)
                                      for name in STREAMS})
            sample = AlignedSample(
                mel=MelSpectrogram(data=archive["mel"], config=config),
                labels=labels,
                motion=MotionSequence(data=archive["motion"],
                                      frame_rate=meta["frame_rate"]),
                frame_rate=meta["frame_rate"],
                piece_id=meta["piece_id"],
                performer_id=meta["performer_id"])
        except KeyError as exc:
            raise MalformedFile(f"{path}: incomplete cache file: {exc}") from exc
    return sample, meta


def load_corpus_cache(cache_dir: str | Path) -> tuple[list[AlignedSample], dict]:
    """Load every cached piece in a directory; returns (samples, shared meta)."""
    paths = sorted(Path(cache_dir).glob("*.npz"))
    if not paths:
        raise MalformedFile(f"no cached samples (*.npz) under {cache_dir}")
    samples, metas = [], []
    for p in paths:
        sample, meta = load_sample_cache(p)
        samples.append(sample)
        metas.append(meta)
    hashes = {m["mel_config_hash"] for m in metas}
    if len(hashes) != 1:
        raise ConfigError(
            f"cache mixes feature configs (hashes {sorted(hashes)})")
    return samples, metas[0]
