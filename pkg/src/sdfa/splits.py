"""Train/test partitions for the six evaluation protocols."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import SplitError
from .skeleton_data import SkeletonSequence

PROTOCOLS = ("seventy_thirty", "cross_subject", "cross_view", "cross_setup", "cross_trial", "cross_fall")


@dataclass
class SplitSpec:
    """Protocol name plus its parameters.

    Unset ID sets fall back to the conventional choices: views 2 and 3 and
    trials 1 and 2 train; for subjects, the lower half of the sorted IDs.
    """

    protocol: str = "seventy_thirty"
    seed: int = 0
    train_fraction: float = 0.7
    train_subjects: tuple[int, ...] | None = None
    train_views: tuple[int, ...] = (2, 3)
    train_trials: tuple[int, ...] = (1, 2)
    held_out_fall_type: str | None = None

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise SplitError(f"unknown protocol {self.protocol!r}; choose from {PROTOCOLS}")
        if not 0.0 < self.train_fraction < 1.0:
            raise SplitError("train_fraction must lie in (0, 1)")

    def describe(self) -> str:
        if self.protocol == "cross_fall":
            return f"cross_fall[{self.held_out_fall_type}]"
        return self.protocol


def _stratified_fraction(groups: dict, fraction: float, rng: np.random.Generator):
    train, test = [], []
    for key in sorted(groups):
        idx = np.array(sorted(groups[key]))
        idx = idx[rng.permutation(idx.size)]
        n_train = int(math.floor(fraction * idx.size + 0.5))
        if idx.size >= 2:
            n_train = min(max(n_train, 1), idx.size - 1)
        train.extend(idx[:n_train].tolist())
        test.extend(idx[n_train:].tolist())
    return train, test


def _require(dataset: Sequence[SkeletonSequence], field_name: str, protocol: str) -> None:
    bad = [i for i, s in enumerate(dataset) if not getattr(s.meta, field_name)]
    if bad:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        raise SplitError(f"{protocol} needs '{field_name}' but samples [{shown}] lack it")


def make_split(dataset: Sequence[SkeletonSequence], spec: SplitSpec) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic ``(train_indices, test_indices)``, each sorted ascending."""
    meta = [s.meta for s in dataset]
    rng = np.random.default_rng(spec.seed)
    p = spec.protocol

    if p == "seventy_thirty":
        groups: dict = {}
        for i, m in enumerate(meta):
            groups.setdefault(m.is_fall, []).append(i)
        train, test = _stratified_fraction(groups, spec.train_fraction, rng)

    elif p == "cross_subject":
        _require(dataset, "subject_id", p)
        chosen = spec.train_subjects
        if chosen is None:
            ids = sorted({m.subject_id for m in meta})
            chosen = tuple(ids[: math.ceil(len(ids) / 2)])
        keep = set(chosen)
        train = [i for i, m in enumerate(meta) if m.subject_id in keep]
        test = [i for i, m in enumerate(meta) if m.subject_id not in keep]

    elif p == "cross_view":
        _require(dataset, "view_id", p)
        keep = set(spec.train_views)
        train = [i for i, m in enumerate(meta) if m.view_id in keep]
        test = [i for i, m in enumerate(meta) if m.view_id not in keep]

    elif p == "cross_setup":
        _require(dataset, "setup_id", p)
        train = [i for i, m in enumerate(meta) if m.setup_id % 2 == 0]
        test = [i for i, m in enumerate(meta) if m.setup_id % 2 == 1]

    elif p == "cross_trial":
        _require(dataset, "trial_id", p)
        keep = set(spec.train_trials)
        train = [i for i, m in enumerate(meta) if m.trial_id in keep]
        test = [i for i, m in enumerate(meta) if m.trial_id not in keep]

    else:  # cross_fall
        if not spec.held_out_fall_type:
            raise SplitError("cross_fall needs held_out_fall_type")
        missing = [i for i, m in enumerate(meta) if m.is_fall and not m.fall_type]
        if missing:
            raise SplitError(f"cross_fall needs 'fall_type' on every fall; samples {missing[:20]} lack it")
        types = {m.fall_type for m in meta if m.is_fall}
        if spec.held_out_fall_type not in types:
            raise SplitError(f"fall type {spec.held_out_fall_type!r} not in dataset ({sorted(types)})")
        adl: dict = {}
        for i, m in enumerate(meta):
            if not m.is_fall:
                adl.setdefault(m.action_label, []).append(i)
        train, test = _stratified_fraction(adl, spec.train_fraction, rng)
        for i, m in enumerate(meta):
            if m.is_fall:
                (test if m.fall_type == spec.held_out_fall_type else train).append(i)

    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def cross_fall_folds(dataset: Sequence[SkeletonSequence], seed: int = 0) -> list[SplitSpec]:
    """One leave-one-fall-type-out spec per distinct fall type."""
    types = sorted({s.meta.fall_type for s in dataset if s.meta.is_fall and s.meta.fall_type})
    if not types:
        raise SplitError("dataset has no typed falls")
    return [SplitSpec("cross_fall", seed=seed, held_out_fall_type=t) for t in types]


def parse_split_options(protocol: str, options: Sequence[str], seed: int = 0) -> SplitSpec:
    """Build a spec from ``key=value`` strings (ID lists comma-separated)."""
    kwargs: dict = {"protocol": protocol, "seed": seed}
    for opt in options:
        key, sep, value = opt.partition("=")
        key = key.strip()
        if not sep:
            raise SplitError(f"split option {opt!r} is not key=value")
        try:
            if key in ("train_subjects", "train_views", "train_trials"):
                kwargs[key] = tuple(int(v) for v in value.split(",") if v.strip())
            elif key in ("held_out", "held_out_fall_type"):
                kwargs["held_out_fall_type"] = value.strip()
            elif key == "train_fraction":
                kwargs[key] = float(value)
            elif key == "seed":
                kwargs[key] = int(value)
            else:
                raise SplitError(f"unknown split option {key!r}")
        except ValueError:
            raise SplitError(f"split option {key!r}: bad value {value!r}") from None
    return SplitSpec(**kwargs)
