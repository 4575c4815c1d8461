"""BODY_25 skeleton graph and adjacency normalisation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError

# OpenPose BODY_25 kinematic tree
BODY25_EDGES: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 2), (2, 3), (3, 4), (1, 5), (5, 6), (6, 7), (1, 8),
    (8, 9), (9, 10), (10, 11), (8, 12), (12, 13), (13, 14),
    (0, 15), (15, 17), (0, 16), (16, 18),
    (14, 19), (19, 20), (14, 21), (11, 22), (22, 23), (11, 24),
)


@dataclass(frozen=True)
class SkeletonGraph:
    num_joints: int
    edges: tuple[tuple[int, int], ...]
    A: np.ndarray
    A_hat: np.ndarray

    def edge_table(self) -> str:
        """Edge list as text, one ``i j`` pair per line."""
        return "".join(f"{i} {j}\n" for i, j in self.edges)

    @classmethod
    def from_edge_table(cls, text: str, num_joints: int, norm: str = "row") -> SkeletonGraph:
        edges = [tuple(int(v) for v in line.split()) for line in text.splitlines() if line.strip()]
        return build_graph(num_joints, edges, norm=norm)


def adjacency_from_edges(num_joints: int, edges: Sequence[tuple[int, int]]) -> np.ndarray:
    A = np.eye(num_joints)
    for i, j in edges:
        if not (0 <= i < num_joints and 0 <= j < num_joints):
            raise ConfigError(f"edge ({i}, {j}) outside {num_joints} joints")
        A[i, j] = A[j, i] = 1.0
    return A


def normalize_adjacency(A: np.ndarray, kind: str = "row") -> np.ndarray:
    """Row-normalise ``D^-1 A`` (default) or symmetrically ``D^-1/2 A D^-1/2``."""
    deg = A.sum(axis=1)
    if np.any(deg <= 0):
        raise RuntimeError("adjacency has a zero-degree row")
    if kind == "row":
        return A / deg[:, None]
    if kind == "symmetric":
        d = 1.0 / np.sqrt(deg)
        return A * d[:, None] * d[None, :]
    raise ConfigError(f"unknown adjacency normalisation {kind!r}")


def build_graph(num_joints: int, edges: Sequence[tuple[int, int]], norm: str = "row") -> SkeletonGraph:
    A = adjacency_from_edges(num_joints, edges)
    A_hat = normalize_adjacency(A, norm)
    A.setflags(write=False)
    A_hat.setflags(write=False)
    return SkeletonGraph(num_joints, tuple(tuple(e) for e in edges), A, A_hat)


def build_body25_graph(norm: str = "row") -> SkeletonGraph:
    return build_graph(25, BODY25_EDGES, norm=norm)


def effective_adjacency(A_hat: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Elementwise modulation of the normalised adjacency.

    ``M`` may be the full ``(V, V)`` matrix or a ``(1, 1)`` scalar gate.
    The differentiable version lives in :func:`sdfa.nn.ops.modulate`.
    """
    M = np.asarray(M)
    if M.shape != A_hat.shape and M.shape != (1, 1):
        raise ShapeError(f"modulation shape {M.shape} does not match adjacency {A_hat.shape}")
    return A_hat * M
