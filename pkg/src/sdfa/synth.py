"""Seeded generator of fall-like and everyday-activity skeleton sequences.

Falls and lie-downs pass through the same poses; what separates them is how
fast the body goes from upright to horizontal. Other activities follow
simple scripted joint trajectories.

Poses are built in a 3-D body frame (metres for a 1.0-tall person, y up,
z forward), rotated about the feet for falls and lie-downs, and projected
orthographically into a camera whose yaw depends on ``view_id``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

import numpy as np

from .errors import ConfigError
from .skeleton_data import NUM_JOINTS, SequenceMeta, SkeletonSequence

ADL_KINDS = ("sit", "lie_down", "walk", "pick_up")
FALL_TYPES = ("forward_hands", "forward_knees", "backwards", "sitting_chair", "sideways")
# Direction the body topples toward, as a yaw angle in the body frame (0 = forward).
_FALL_DIRECTION = {"forward_hands": 0.0, "forward_knees": 0.0, "backwards": np.pi,
                   "sitting_chair": np.pi, "sideways": np.pi / 2}
_VIEW_YAW = {1: 0.0, 2: np.pi / 4, 3: np.pi / 2}

_THIGH = _SHIN = 0.24
_ANKLE_HEIGHT = 0.04
_TORSO = 0.30
_UPPER_ARM, _FOREARM = 0.18, 0.17
_SHOULDER_HALF, _HIP_HALF = 0.11, 0.06


@dataclass
class SynthSpec:
    n_per_class: int = 100
    T: int = 120
    fps: float = 30.0
    seed: int = 0
    noise_std: float = 1.0
    fall_duration_frames: int = 15
    adl_kinds: tuple[str, ...] = ADL_KINDS
    # Samples per ADL kind; None means n_per_class of each kind.
    adl_per_kind: int | None = None

    def validate(self) -> None:
        if self.n_per_class < 1:
            raise ConfigError("n_per_class must be >= 1")
        if not 2 <= self.fall_duration_frames < self.T:
            raise ConfigError("fall_duration_frames must lie in [2, T)")
        if not self.adl_kinds:
            raise ConfigError("adl_kinds must not be empty")
        unknown = set(self.adl_kinds) - set(ADL_KINDS)
        if unknown:
            raise ConfigError(f"unknown ADL kinds {sorted(unknown)}; choose from {ADL_KINDS}")
        if "lie_down" in self.adl_kinds and 4 * self.fall_duration_frames >= self.T:
            raise ConfigError("lie_down needs T > 4 * fall_duration_frames")
        if self.adl_per_kind is not None and self.adl_per_kind < 1:
            raise ConfigError("adl_per_kind must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        d["adl_kinds"] = list(self.adl_kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> SynthSpec:
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown synth fields {sorted(extra)}")
        d = dict(d)
        if "adl_kinds" in d:
            kinds = d["adl_kinds"]
            if isinstance(kinds, str):
                kinds = [k.strip() for k in kinds.split(",") if k.strip()]
            d["adl_kinds"] = tuple(kinds)
        spec = cls(**d)
        spec.validate()
        return spec


# ---------------------------------------------------------------------------
# Kinematics


def _smoothstep(s):
    s = np.clip(s, 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _leg(hip, thigh_angle, knee_flex):
    """Knee, ankle, heel, toes below ``hip``; angles in radians, forward positive."""
    knee = hip + _THIGH * np.array([0.0, -np.cos(thigh_angle), np.sin(thigh_angle)])
    shin = thigh_angle - knee_flex
    ankle = knee + _SHIN * np.array([0.0, -np.cos(shin), np.sin(shin)])
    foot_base = ankle + np.array([0.0, -_ANKLE_HEIGHT, 0.0])
    return knee, ankle, foot_base + [0, 0, -0.03], foot_base + [0, 0, 0.09], foot_base + [0, 0, 0.07]


def _arm(shoulder, swing):
    direction = np.array([0.0, -np.cos(swing), np.sin(swing)])
    elbow = shoulder + _UPPER_ARM * direction
    return elbow, elbow + _FOREARM * direction


def body_pose(hip_height=0.52, hip_back=0.0, torso_pitch=0.0, thigh=(0.0, 0.0),
              knee_flex=(0.0, 0.0), arm_swing=(0.0, 0.0)) -> np.ndarray:
    """(25, 3) body-frame joint positions; index 0 of each pair is the right side."""
    P = np.zeros((NUM_JOINTS, 3))
    mid_hip = np.array([0.0, hip_height, -hip_back])
    up = np.array([0.0, np.cos(torso_pitch), np.sin(torso_pitch)])
    neck = mid_hip + _TORSO * up
    right = np.array([-1.0, 0.0, 0.0])
    P[8], P[1] = mid_hip, neck
    P[0] = neck + 0.10 * up + 0.03 * np.array([0, -np.sin(torso_pitch), np.cos(torso_pitch)])
    P[15], P[16] = P[0] + 0.02 * up + 0.03 * right, P[0] + 0.02 * up - 0.03 * right
    P[17], P[18] = P[0] + 0.06 * right, P[0] - 0.06 * right
    for side, (sh, el, wr) in enumerate(((2, 3, 4), (5, 6, 7))):
        sign = 1.0 if side == 0 else -1.0
        P[sh] = neck + sign * _SHOULDER_HALF * right
        P[el], P[wr] = _arm(P[sh], torso_pitch + arm_swing[side])
    for side, (hp, kn, an, heel, big, small) in enumerate(((9, 10, 11, 24, 22, 23), (12, 13, 14, 21, 19, 20))):
        sign = 1.0 if side == 0 else -1.0
        P[hp] = mid_hip + sign * _HIP_HALF * right
        P[kn], P[an], P[heel], P[big], P[small] = _leg(P[hp], thigh[side], knee_flex[side])
        P[small] += sign * 0.03 * right
    return P


STANDING = body_pose()


def _rotation(axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _topple(pose: np.ndarray, angle: float, direction: float) -> np.ndarray:
    """Rotate ``pose`` about a ground-level axis through its feet by ``angle``."""
    pivot = pose[[11, 14]].mean(axis=0)
    pivot[1] = 0.0
    heading = np.array([np.sin(direction), 0.0, np.cos(direction)])
    axis = np.cross(np.array([0.0, 1.0, 0.0]), heading)
    return (pose - pivot) @ _rotation(axis, angle).T + pivot


# ---------------------------------------------------------------------------
# Per-activity trajectories, each returning (T, 25, 3) body-frame positions


def _sway(rng, T):
    phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(T)
    return 0.004 * np.sin(2 * np.pi * t / rng.uniform(60, 120) + phase)


def _transition(rng, T, duration, start_pose, end_pose_at, direction):
    """Standing, a ``duration``-frame topple to horizontal, then lying still."""
    onset = int(rng.integers(max(1, T // 5), max(T // 5 + 1, T - duration - T // 8)))
    progress = _smoothstep((np.arange(T) - onset) / duration)
    sway = _sway(rng, T)
    out = np.empty((T, NUM_JOINTS, 3))
    for t in range(T):
        pose = end_pose_at(progress[t]) if end_pose_at else start_pose
        out[t] = _topple(pose, 0.5 * np.pi * progress[t], direction)
        out[t, :, 0] += sway[t] * (1 - progress[t])
    return out


def _fall(rng, T, duration, fall_type):
    direction = _FALL_DIRECTION[fall_type] + rng.normal(0, 0.2)
    if fall_type == "forward_hands":
        def pose_at(s):
            return body_pose(arm_swing=(1.3 * s, 1.3 * s))
    elif fall_type == "forward_knees":
        def pose_at(s):
            return body_pose(thigh=(0.3 * s, 0.3 * s), knee_flex=(0.8 * s, 0.8 * s),
                             hip_height=0.52 - 0.08 * s)
    elif fall_type == "sitting_chair":
        def pose_at(s):
            return body_pose(thigh=(0.6, 0.6), knee_flex=(0.9, 0.9), hip_height=0.42, hip_back=0.08,
                             arm_swing=(0.5 * s, 0.5 * s))
    else:
        def pose_at(s):
            return body_pose(arm_swing=(0.4 * s, -0.4 * s))
    return _transition(rng, T, duration, STANDING, pose_at, direction)


def _lie_down(rng, T, fall_duration):
    duration = int(round(fall_duration * rng.uniform(4.0, 6.0)))
    duration = min(duration, T - 2)
    direction = rng.uniform(0, 2 * np.pi)
    return _transition(rng, T, duration, STANDING, None, direction)


def _sit(rng, T):
    duration = int(rng.integers(30, 45))
    onset = int(rng.integers(T // 6, max(T // 6 + 1, T - duration - 5)))
    s = _smoothstep((np.arange(T) - onset) / duration)
    sway = _sway(rng, T)
    out = np.empty((T, NUM_JOINTS, 3))
    for t in range(T):
        a = 1.5 * s[t]
        out[t] = body_pose(hip_height=0.52 - 0.22 * s[t], hip_back=0.2 * s[t], torso_pitch=0.3 * s[t],
                           thigh=(a, a), knee_flex=(a, a))
        out[t, :, 0] += sway[t]
    return out


def _walk(rng, T, fps):
    speed = rng.uniform(0.5, 0.8) / fps  # body heights per frame
    cadence = rng.uniform(0.8, 1.1) * 2 * np.pi / fps
    phase = rng.uniform(0, 2 * np.pi)
    heading = rng.choice([-1.0, 1.0])
    out = np.empty((T, NUM_JOINTS, 3))
    for t in range(T):
        swing = 0.35 * np.sin(cadence * t + phase)
        pose = body_pose(thigh=(swing, -swing), knee_flex=(max(0.0, -swing) * 1.2, max(0.0, swing) * 1.2),
                         arm_swing=(-0.6 * swing, 0.6 * swing))
        pose[:, 1] -= min(pose[[11, 14], 1]) - _ANKLE_HEIGHT  # keep the lower foot on the ground
        # Walk across the image plane of the body frame (along x after the yaw below).
        out[t] = pose @ _rotation(np.array([0.0, 1.0, 0.0]), heading * np.pi / 2).T
        out[t, :, 0] += heading * speed * t
    return out


def _pick_up(rng, T):
    down = int(rng.integers(25, 40))
    hold = int(rng.integers(5, 20))
    onset = int(rng.integers(T // 8, max(T // 8 + 1, T - 2 * down - hold - 2)))
    t = np.arange(T)
    s = _smoothstep((t - onset) / down) - _smoothstep((t - onset - down - hold) / down)
    out = np.empty((T, NUM_JOINTS, 3))
    for i in range(T):
        k = 0.5 * s[i]
        out[i] = body_pose(torso_pitch=1.3 * s[i], thigh=(k, k), knee_flex=(2 * k, 2 * k),
                           hip_height=0.52 - 0.06 * s[i], hip_back=0.08 * s[i])
    return out


# ---------------------------------------------------------------------------


def _project(body: np.ndarray, rng: np.random.Generator, view_id: int, noise_std: float) -> np.ndarray:
    T = body.shape[0]
    height_px = rng.uniform(300, 400)
    yaw = _VIEW_YAW.get(view_id, 0.0) + rng.normal(0, 0.05)
    origin = np.array([rng.uniform(540, 740), rng.uniform(560, 640)])
    frames = np.empty((T, NUM_JOINTS, 3))
    horizontal = body[..., 0] * np.cos(yaw) + body[..., 2] * np.sin(yaw)
    frames[..., 0] = origin[0] + height_px * horizontal
    frames[..., 1] = origin[1] - height_px * body[..., 1]
    frames[..., :2] += rng.normal(0.0, noise_std, size=(T, NUM_JOINTS, 2)) if noise_std > 0 else 0.0
    frames[..., 2] = rng.uniform(0.6, 1.0, size=(T, NUM_JOINTS))
    return frames


def generate_synthetic_dataset(spec: SynthSpec | None = None) -> list[SkeletonSequence]:
    """Falls first, then each ADL kind in ``spec.adl_kinds`` order.

    Every sequence draws from its own generator seeded by ``(seed, index)``,
    so any sample can be regenerated independently of the others.
    """
    spec = spec or SynthSpec()
    spec.validate()
    per_adl = spec.adl_per_kind or spec.n_per_class
    plan = [("fall", i) for i in range(spec.n_per_class)]
    plan += [(kind, i) for kind in spec.adl_kinds for i in range(per_adl)]

    out = []
    for index, (kind, k) in enumerate(plan):
        rng = np.random.default_rng([spec.seed, index])
        is_fall = kind == "fall"
        fall_type = FALL_TYPES[k % len(FALL_TYPES)] if is_fall else None
        meta = SequenceMeta(
            is_fall=is_fall,
            subject_id=index % 10 + 1,
            view_id=index % 3 + 1,
            setup_id=(index // 3) % 4 + 1,
            trial_id=(index // 2) % 3 + 1,
            action_label=kind,
            fall_type=fall_type,
        )
        if is_fall:
            body = _fall(rng, spec.T, spec.fall_duration_frames, fall_type)
        elif kind == "lie_down":
            body = _lie_down(rng, spec.T, spec.fall_duration_frames)
        elif kind == "sit":
            body = _sit(rng, spec.T)
        elif kind == "walk":
            body = _walk(rng, spec.T, spec.fps)
        else:
            body = _pick_up(rng, spec.T)
        frames = _project(body, rng, meta.view_id, spec.noise_std)
        out.append(SkeletonSequence(frames, meta, fps=spec.fps))
    return out
