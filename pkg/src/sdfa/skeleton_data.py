"""OpenPose keypoint ingestion and sequence preprocessing.

A frame is a ``(25, 3)`` array of ``(x, y, confidence)`` rows in BODY_25
order; a sequence stacks them into ``(T, 25, 3)``. Coordinates stay in
pixels until :func:`normalize_sequence`.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .errors import (
    BatchError,
    ConfigError,
    DataError,
    EmptySequenceError,
    ParseError,
    SequenceTooShortError,
    StructuralError,
)

logger = logging.getLogger(__name__)

NUM_JOINTS = 25
MID_HIP = 8
KEYPOINTS_PER_PERSON = NUM_JOINTS * 3
STD_GUARD = 1e-6

BODY25_JOINT_NAMES = (
    "Nose", "Neck", "RShoulder", "RElbow", "RWrist", "LShoulder", "LElbow",
    "LWrist", "MidHip", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle",
    "REye", "LEye", "REar", "LEar", "LBigToe", "LSmallToe", "LHeel",
    "RBigToe", "RSmallToe", "RHeel",
)


@dataclass
class SequenceMeta:
    is_fall: bool
    subject_id: int = 0
    view_id: int = 0
    setup_id: int = 0
    trial_id: int = 0
    action_label: str = ""
    fall_type: str | None = None

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SequenceMeta:
        if "is_fall" not in d:
            raise DataError("sequence metadata lacks mandatory field 'is_fall'")
        return cls(
            is_fall=bool(d["is_fall"]),
            subject_id=int(d.get("subject_id", 0)),
            view_id=int(d.get("view_id", 0)),
            setup_id=int(d.get("setup_id", 0)),
            trial_id=int(d.get("trial_id", 0)),
            action_label=str(d.get("action_label", "")),
            fall_type=d.get("fall_type") or None,
        )


@dataclass
class SkeletonSequence:
    frames: np.ndarray  # (T, 25, 3): x px, y px, confidence
    meta: SequenceMeta
    fps: float = 30.0
    flags: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (NUM_JOINTS, 3):
            raise StructuralError(
                f"frames must have shape (T, {NUM_JOINTS}, 3), got {self.frames.shape}"
            )

    def __len__(self) -> int:
        return self.frames.shape[0]

    def with_frames(self, frames: np.ndarray) -> SkeletonSequence:
        return replace(self, frames=frames, flags=list(self.flags))

    def to_dict(self) -> dict[str, Any]:
        return {
            "fps": self.fps,
            "meta": asdict(self.meta),
            "frames": self.frames.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SkeletonSequence:
        try:
            frames = np.asarray(d["frames"], dtype=np.float64)
            meta = SequenceMeta.from_dict(d["meta"])
        except KeyError as exc:
            raise DataError(f"canonical sequence lacks field {exc}") from None
        except (TypeError, ValueError) as exc:
            raise DataError(f"bad canonical sequence: {exc}") from None
        if frames.size == 0:
            frames = frames.reshape(0, NUM_JOINTS, 3)
        return cls(frames=frames, meta=meta, fps=float(d.get("fps", 30.0)))


# ---------------------------------------------------------------------------
# OpenPose documents


def parse_openpose_frame(doc: dict | str, frame_index: int | None = None) -> list[np.ndarray]:
    """Return one ``(25, 3)`` frame per person listed in an OpenPose document."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc.msg}", frame_index) from None
    if not isinstance(doc, dict) or not isinstance(doc.get("people"), list):
        raise ParseError("document has no 'people' list", frame_index)

    frames = []
    for p, person in enumerate(doc["people"]):
        if not isinstance(person, dict) or "pose_keypoints_2d" not in person:
            raise ParseError(f"person {p} has no 'pose_keypoints_2d'", frame_index)
        flat = person["pose_keypoints_2d"]
        if not isinstance(flat, list):
            raise ParseError(f"person {p}: keypoints are not a list", frame_index)
        if len(flat) != KEYPOINTS_PER_PERSON:
            raise StructuralError(
                f"person {p}: expected {KEYPOINTS_PER_PERSON} keypoint values, got {len(flat)}",
                frame_index,
            )
        try:
            arr = np.array(flat, dtype=np.float64)
        except (TypeError, ValueError):
            raise ParseError(f"person {p}: non-numeric keypoint value", frame_index) from None
        if not np.all(np.isfinite(arr)):
            raise ParseError(f"person {p}: non-finite keypoint value", frame_index)
        frames.append(arr.reshape(NUM_JOINTS, 3))
    return frames


def serialize_openpose_frame(frames: Sequence[np.ndarray]) -> dict:
    return {
        "version": 1.3,
        "people": [
            {"pose_keypoints_2d": np.asarray(f, dtype=np.float64).reshape(-1).tolist()}
            for f in frames
        ],
    }


def load_openpose_dir(path: str | Path) -> list[list[np.ndarray]]:
    """Parse every ``*.json`` file of a directory in lexicographic order."""
    files = sorted(Path(path).glob("*.json"))
    files = [f for f in files if f.name != "meta.json"]
    out = []
    for i, f in enumerate(files):
        out.append(parse_openpose_frame(f.read_text(), frame_index=i))
    return out


# ---------------------------------------------------------------------------
# Cleaning


def _anchor(frame: np.ndarray) -> np.ndarray | None:
    if frame[MID_HIP, 2] > 0:
        return frame[MID_HIP, :2]
    seen = frame[:, 2] > 0
    if seen.any():
        return frame[seen, :2].mean(axis=0)
    return None


def _associate_tracks(candidates_over_time: list[list[np.ndarray]]) -> list[list[np.ndarray | None]]:
    # greedy nearest-anchor matching between consecutive frames
    T = len(candidates_over_time)
    tracks: list[list[np.ndarray | None]] = []
    last_anchor: list[np.ndarray | None] = []
    for t, cands in enumerate(candidates_over_time):
        anchors = [_anchor(c) for c in cands]
        pairs = []
        for k, a in enumerate(last_anchor):
            for c, b in enumerate(anchors):
                d = math.inf if a is None or b is None else float(np.hypot(*(a - b)))
                pairs.append((d, k, c))
        pairs.sort(key=lambda p: (p[0], p[1], p[2]))
        used_tracks, used_cands = set(), set()
        for _, k, c in pairs:
            if k in used_tracks or c in used_cands:
                continue
            used_tracks.add(k)
            used_cands.add(c)
            tracks[k][t] = cands[c]
            if anchors[c] is not None:
                last_anchor[k] = anchors[c]
        for c, cand in enumerate(cands):
            if c not in used_cands:
                track: list[np.ndarray | None] = [None] * T
                track[t] = cand
                tracks.append(track)
                last_anchor.append(anchors[c])
    return tracks


def track_motion_score(track: Sequence[np.ndarray | None]) -> float:
    """Sum over joints and x/y of the temporal standard deviation."""
    present = [f for f in track if f is not None]
    if len(present) < 2:
        return 0.0
    xy = np.stack(present)[:, :, :2]
    return float(xy.std(axis=0).sum())


def select_primary_skeleton(candidates_over_time: list[list[np.ndarray]]) -> np.ndarray:
    """Pick the most mobile person track; returns ``(T, 25, 3)`` frames.

    Static skeleton-like detections (furniture) have near-zero temporal
    spread, so the track with the largest summed per-joint std wins. Frames
    where the winning track is absent become all-zero (empty) frames.
    """
    if not any(candidates_over_time):
        raise EmptySequenceError("no skeleton candidates in any frame")
    tracks = _associate_tracks(candidates_over_time)
    scores = [track_motion_score(tr) for tr in tracks]
    best = tracks[int(np.argmax(scores))]
    empty = np.zeros((NUM_JOINTS, 3))
    return np.stack([empty if f is None else f for f in best])


def is_empty_frame(frame: np.ndarray) -> bool:
    return not np.any(frame)


def remove_empty_frames(seq: SkeletonSequence) -> SkeletonSequence:
    keep = np.any(seq.frames.reshape(len(seq), -1) != 0, axis=1)
    if not keep.any():
        raise EmptySequenceError("every frame is empty")
    return seq.with_frames(seq.frames[keep])


def resample_indices(length: int, target: int) -> np.ndarray:
    if target <= 0:
        raise ConfigError(f"target length must be positive, got {target}")
    if length <= 0:
        raise EmptySequenceError("cannot resample an empty sequence")
    i = np.arange(target)
    if length < target:
        return i % length
    if length > target:
        # round half up, so the rule does not depend on banker's rounding
        idx = np.floor(i * length / target + 0.5).astype(np.int64)
        return np.clip(idx, 0, length - 1)
    return i


def pad_to_length(seq: SkeletonSequence, target: int) -> SkeletonSequence:
    """Loop short sequences from the start; subsample long ones uniformly."""
    idx = resample_indices(len(seq), target)
    return seq.with_frames(seq.frames[idx])


def view_invariant_transform(seq: SkeletonSequence) -> SkeletonSequence:
    """Translate every joint so the first confident MidHip sits at the origin."""
    confident = np.nonzero(seq.frames[:, MID_HIP, 2] > 0)[0]
    if confident.size == 0:
        logger.warning("MidHip never detected; view-invariant transform skipped")
        out = seq.with_frames(seq.frames.copy())
        out.flags.append("view_invariant_skipped")
        return out
    ref = seq.frames[confident[0], MID_HIP, :2]
    frames = seq.frames.copy()
    frames[:, :, :2] -= ref
    return seq.with_frames(frames)


def normalize_sequence(seq: SkeletonSequence) -> SkeletonSequence:
    frames = seq.frames.copy()
    for ch in (0, 1):
        values = frames[:, :, ch]
        mean = values.mean()
        std = values.std()
        values -= mean
        if std >= STD_GUARD:
            values /= std
    return seq.with_frames(frames)


def preprocess_sequence(seq: SkeletonSequence, target_length: int) -> SkeletonSequence:
    seq = remove_empty_frames(seq)
    seq = pad_to_length(seq, target_length)
    seq = view_invariant_transform(seq)
    return normalize_sequence(seq)


# ---------------------------------------------------------------------------
# Tensors


def to_feature_tensor(batch: Sequence[SkeletonSequence], channels: int = 3,
                      dtype=np.float32) -> np.ndarray:
    """Stack sequences into an ``(N, C, T, 25)`` array of (x, y[, confidence])."""
    if channels not in (2, 3):
        raise ConfigError(f"channels must be 2 or 3, got {channels}")
    if not batch:
        raise BatchError("empty batch")
    lengths = {len(s) for s in batch}
    if len(lengths) != 1:
        raise BatchError(f"ragged sequence lengths in batch: {sorted(lengths)}")
    stacked = np.stack([s.frames[:, :, :channels] for s in batch])  # N, T, V, C
    return np.ascontiguousarray(stacked.transpose(0, 3, 1, 2), dtype=dtype)


def motion_stream(x: np.ndarray) -> np.ndarray:
    """Forward temporal difference along axis 2; the last frame is zero."""
    if x.shape[2] < 2:
        raise SequenceTooShortError(f"motion needs at least 2 frames, got {x.shape[2]}")
    out = np.zeros_like(x)
    out[:, :, :-1] = x[:, :, 1:] - x[:, :, :-1]
    return out


def prepare_batch(seqs: Sequence[SkeletonSequence], target_length: int,
                  channels: int = 3, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Preprocess sequences and return ``(X, labels)`` with fall = 1."""
    processed = [preprocess_sequence(s, target_length) for s in seqs]
    X = to_feature_tensor(processed, channels=channels, dtype=dtype)
    y = np.array([int(s.meta.is_fall) for s in seqs], dtype=np.int64)
    return X, y


# ---------------------------------------------------------------------------
# Canonical files


def save_sequence(seq: SkeletonSequence, path: str | Path) -> None:
    Path(path).write_text(json.dumps(seq.to_dict()))


def load_sequence(path: str | Path) -> SkeletonSequence:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc.msg}") from None
    return SkeletonSequence.from_dict(doc)


def save_dataset(seqs: Iterable[SkeletonSequence], path: str | Path) -> None:
    with open(path, "w") as fh:
        for s in seqs:
            fh.write(json.dumps(s.to_dict()))
            fh.write("\n")


def load_dataset(path: str | Path) -> list[SkeletonSequence]:
    """Read a JSON-lines file of canonical sequences (a single document also works)."""
    text = Path(path).read_text()
    seqs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError:
            # a pretty-printed single document spans several lines
            try:
                return [SkeletonSequence.from_dict(json.loads(text))]
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON: {exc.msg}") from None
        seqs.append(SkeletonSequence.from_dict(doc))
    if not seqs:
        raise DataError(f"{path}: no sequences")
    return seqs
