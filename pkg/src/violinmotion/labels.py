"""Bowing/fingering label taxonomy and frame-level one-hot streams.

Four per-frame label streams describe how a note is produced:

* ``bow``  — bow direction, classes {1: up, 2: down}, 3rd class = silence
* ``str``  — played string, classes {1: E, 2: A, 3: D, 4: G}, 5th = silence
* ``fing`` — finger number, {1: open, 2: index, 3: middle, 4: ring,
  5: pinky}, 6th = silence
* ``pos``  — left-hand position 1..12, 13th = silence

Class numbering is 1-based in documentation and API, 0-based in array
storage (class c occupies column c-1). Silence is always the LAST class of
a stream, and a frame is silent in one stream iff it is silent in all four.

Annotation JSON schema::

    {"piece_id": "...",
     "performer_id": "...",          # optional
     "events": [{"onset_s": 0.0, "offset_s": 0.5,
                 "bow": "up", "string": "A",
                 "finger": 2, "position": 1}, ...]}
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, OverlapError, RangeError, SchemaError

STREAMS = ("bow", "str", "fing", "pos")
CLASS_COUNTS = {"bow": 3, "str": 5, "fing": 6, "pos": 13}
#: 1-based silence class per stream (always the last class).
SILENCE_CLASS = {name: n for name, n in CLASS_COUNTS.items()}
#: Column offset of each stream inside the concatenated T×27 matrix.
BF_OFFSETS = {"bow": 0, "str": 3, "fing": 8, "pos": 14}
BF_WIDTH = 27


class BowDirection(IntEnum):
    UP = 1
    DOWN = 2


class ViolinString(IntEnum):
    E = 1
    A = 2
    D = 3
    G = 4


class Finger(IntEnum):
    OPEN = 1
    INDEX = 2
    MIDDLE = 3
    RING = 4
    PINKY = 5


_BOW_NAMES = {"up": BowDirection.UP, "down": BowDirection.DOWN}
_STRING_NAMES = {s.name: s for s in ViolinString}

MIN_POSITION, MAX_POSITION = 1, 12


@dataclass(frozen=True)
class NoteEvent:
    """One annotated note: a time interval plus its four playing classes."""

    onset_s: float
    offset_s: float
    bow: int
    string: int
    finger: int
    position: int

    def __post_init__(self):
        if not self.onset_s < self.offset_s:
            raise RangeError(
                f"onset {self.onset_s} must precede offset {self.offset_s}")
        if self.bow not in (1, 2):
            raise RangeError(f"bow class must be 1 (up) or 2 (down), got {self.bow}")
        if self.string not in (1, 2, 3, 4):
            raise RangeError(f"string class must be 1..4, got {self.string}")
        if self.finger not in (1, 2, 3, 4, 5):
            raise RangeError(f"finger must be 1..5, got {self.finger}")
        if not MIN_POSITION <= self.position <= MAX_POSITION:
            raise RangeError(
                f"position must be {MIN_POSITION}..{MAX_POSITION}, got {self.position}")

    def classes(self) -> tuple[int, int, int, int]:
        """1-based (bow, str, fing, pos) class tuple."""
        return (self.bow, self.string, self.finger, self.position)


@dataclass
class LabelSequence:
    """Frame-aligned one-hot streams; every row of every stream sums to 1."""

    bow: np.ndarray   # T×3
    str: np.ndarray   # T×5
    fing: np.ndarray  # T×6
    pos: np.ndarray   # T×13

    def __post_init__(self):
        t = self.bow.shape[0]
        for name in STREAMS:
            arr = getattr(self, name)
            expect = (t, CLASS_COUNTS[name])
            if arr.shape != expect:
                raise DimensionMismatch(
                    f"stream '{name}' has shape {arr.shape}, expected {expect}")
            if t and not np.array_equal(arr.sum(axis=1), np.ones(t)):
                raise DimensionMismatch(f"stream '{name}' rows must sum to exactly 1")
        sil = self.silence_mask()
        for name in STREAMS:
            stream_sil = getattr(self, name)[:, -1] == 1
            if not np.array_equal(stream_sil, sil):
                raise DimensionMismatch(
                    "silence must coincide across all four streams")

    @property
    def n_frames(self) -> int:
        return self.bow.shape[0]

    def silence_mask(self) -> np.ndarray:
        """Boolean mask of frames labelled silence (shared by all streams)."""
        return self.bow[:, -1] == 1

    def stream(self, name: str) -> np.ndarray:
        if name not in STREAMS:
            raise RangeError(f"unknown stream '{name}', expected one of {STREAMS}")
        return getattr(self, name)


@dataclass
class BfConcat:
    """Concatenated bow∥str∥fing∥pos one-hots; each row sums to exactly 4."""

    data: np.ndarray  # T×27

    def __post_init__(self):
        if self.data.ndim != 2 or self.data.shape[1] != BF_WIDTH:
            raise DimensionMismatch(
                f"expected T×{BF_WIDTH} matrix, got shape {self.data.shape}")
        t = self.data.shape[0]
        if t and not np.array_equal(self.data.sum(axis=1), np.full(t, 4.0)):
            raise DimensionMismatch("each concatenated row must sum to exactly 4")


def one_hot(class_index: int, n: int) -> np.ndarray:
    """n-vector with a single 1 at 1-based ``class_index``."""
    if not 1 <= class_index <= n:
        raise RangeError(f"class index {class_index} outside 1..{n}")
    vec = np.zeros(n, dtype=np.float32)
    vec[class_index - 1] = 1.0
    return vec


def decode_class(onehot_row: np.ndarray) -> int:
    """Inverse of :func:`one_hot`: 1-based index of the active class."""
    row = np.asarray(onehot_row)
    hits = np.flatnonzero(row == 1)
    if row.ndim != 1 or hits.size != 1 or row.sum() != 1:
        raise RangeError(f"not a one-hot row: {row!r}")
    return int(hits[0]) + 1


def parse_annotation(obj: dict) -> list[NoteEvent]:
    """Validate an annotation JSON object and return its events sorted by onset.

    Raises SchemaError on structural problems, RangeError on out-of-range
    enum values, OverlapError when two events overlap in time (intervals are
    half-open, so touching events are fine).
    """
    if not isinstance(obj, dict) or not isinstance(obj.get("events"), list):
        raise SchemaError("annotation must be an object with an 'events' array")
    events = []
    for i, entry in enumerate(obj["events"]):
        if not isinstance(entry, dict):
            raise SchemaError(f"event {i} is not an object")
        missing = {"onset_s", "offset_s", "bow", "string", "finger", "position"} \
            - entry.keys()
        if missing:
            raise SchemaError(f"event {i} missing keys {sorted(missing)}")
        bow = entry["bow"]
        if bow not in _BOW_NAMES:
            raise SchemaError(f"event {i}: bow must be 'up' or 'down', got {bow!r}")
        string = entry["string"]
        if string not in _STRING_NAMES:
            raise SchemaError(
                f"event {i}: string must be one of E/A/D/G, got {string!r}")
        if not isinstance(entry["finger"], int) or isinstance(entry["finger"], bool):
            raise SchemaError(f"event {i}: finger must be an integer")
        if not isinstance(entry["position"], int) or isinstance(entry["position"], bool):
            raise SchemaError(f"event {i}: position must be an integer")
        events.append(NoteEvent(
            onset_s=float(entry["onset_s"]),
            offset_s=float(entry["offset_s"]),
            bow=int(_BOW_NAMES[bow]),
            string=int(_STRING_NAMES[string]),
            finger=entry["finger"],
            position=entry["position"],
        ))
    events.sort(key=lambda e: (e.onset_s, e.offset_s))
    for prev, cur in zip(events, events[1:]):
        if cur.onset_s < prev.offset_s:
            raise OverlapError(
                f"events [{prev.onset_s}, {prev.offset_s}) and "
                f"[{cur.onset_s}, {cur.offset_s}) overlap")
    return events


def load_annotation(path: str | Path) -> tuple[str, str, list[NoteEvent]]:
    """Read an annotation file; returns (piece_id, performer_id, events)."""
    with open(path, encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    events = parse_annotation(obj)
    piece_id = obj.get("piece_id")
    if not isinstance(piece_id, str) or not piece_id:
        raise SchemaError(f"{path}: 'piece_id' must be a non-empty string")
    performer_id = obj.get("performer_id", "unknown")
    return piece_id, performer_id, events


def events_to_frames(events: list[NoteEvent], frame_rate: float, n_frames: int
                     ) -> LabelSequence:
    """Rasterize events to one-hot streams of ``n_frames`` frames.

    Frame t covers [t, t+1)/frame_rate; it takes the label of the event
    containing the frame CENTER (t+0.5)/frame_rate, and is silence in all
    four streams when no event contains the center.
    """
    if n_frames <= 0:
        raise RangeError(f"n_frames must be positive, got {n_frames}")
    streams = {name: np.zeros((n_frames, CLASS_COUNTS[name]), dtype=np.float32)
               for name in STREAMS}
    covered = np.zeros(n_frames, dtype=bool)
    for ev in events:
        # center(t) in [onset, offset)  <=>  t in [onset*r - 0.5, offset*r - 0.5)
        start = max(0, math.ceil(ev.onset_s * frame_rate - 0.5))
        stop = min(n_frames, math.ceil(ev.offset_s * frame_rate - 0.5))
        if stop <= start:
            continue
        covered[start:stop] = True
        for name, cls in zip(STREAMS, ev.classes()):
            streams[name][start:stop, cls - 1] = 1.0
    for name in STREAMS:
        streams[name][~covered, SILENCE_CLASS[name] - 1] = 1.0
    return LabelSequence(**streams)


def concat_bf(seq: LabelSequence) -> BfConcat:
    """Concatenate the four streams column-wise: bow(3) ∥ str(5) ∥ fing(6) ∥ pos(13)."""
    return BfConcat(np.concatenate(
        [seq.bow, seq.str, seq.fing, seq.pos], axis=1))


def frame_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    """Fraction of frames whose argmax classes agree."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.ndim != 2:
        raise DimensionMismatch(
            f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    if pred.shape[0] == 0:
        raise DimensionMismatch("cannot score an empty sequence")
    return float(np.mean(pred.argmax(axis=1) == gt.argmax(axis=1)))
