"""21-joint hand skeleton graph and anatomy-driven heatmap operations.

Joint layout: joint 0 is the wrist; joints 4f+1 .. 4f+4 are the base,
two middle knuckles and tip of finger f, for f = 0 (thumb) through
4 (pinky). The skeleton is a tree: each finger chains off the wrist,
giving 20 edges for 21 joints.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation

JOINT_COUNT = 21
WRIST = 0

#: (base, mid1, mid2, tip) joint indices per finger, thumb first.
FINGER_CHAINS = tuple(tuple(range(4 * f + 1, 4 * f + 5)) for f in range(5))

#: Fingertip joint indices.
FINGERTIPS = tuple(chain[-1] for chain in FINGER_CHAINS)


def _canonical_edges() -> tuple[tuple[int, int], ...]:
    edges = []
    for chain in FINGER_CHAINS:
        edges.append((WRIST, chain[0]))
        for a, b in zip(chain, chain[1:]):
            edges.append((a, b))
    return tuple(edges)


EDGES = _canonical_edges()


@dataclass(frozen=True)
class SkeletonGraph:
    """Hand anatomy as an undirected graph with its normalized adjacency.

    ``laplacian`` holds D^{-1/2} A D^{-1/2}; its eigenvalues lie in
    [-1, 1] because the graph is connected and A is binary symmetric.
    """

    joint_count: int
    edges: tuple[tuple[int, int], ...]
    adjacency: np.ndarray
    degree: np.ndarray
    laplacian: np.ndarray

    def neighbors(self, joint: int) -> tuple[int, ...]:
        return tuple(int(q) for q in np.flatnonzero(self.adjacency[joint]))


def build_hand_skeleton() -> SkeletonGraph:
    """Build the canonical 21-joint, 20-edge hand tree."""
    adjacency = np.zeros((JOINT_COUNT, JOINT_COUNT))
    for a, b in EDGES:
        adjacency[a, b] = 1.0
        adjacency[b, a] = 1.0
    degree = np.diag(adjacency.sum(axis=1))
    inv_sqrt = np.diag(1.0 / np.sqrt(np.diag(degree)))
    laplacian = inv_sqrt @ adjacency @ inv_sqrt
    for arr in (adjacency, degree, laplacian):
        arr.flags.writeable = False
    return SkeletonGraph(
        joint_count=JOINT_COUNT,
        edges=EDGES,
        adjacency=adjacency,
        degree=degree,
        laplacian=laplacian,
    )


def mutual_reinforce(heatmaps, graph: SkeletonGraph):
    """Add each joint map's graph-neighbor maps, weighted by the normalized adjacency.

    Output map k is ``hm_k + sum_q L[k, q] * hm_q``. Exactly linear in
    ``heatmaps``. Accepts numpy arrays or torch tensors of shape
    (..., K, H, W) and returns the same kind.
    """
    if heatmaps.shape[-3] != graph.joint_count:
        raise ContractViolation(
            f"expected {graph.joint_count} heatmaps, got {heatmaps.shape[-3]}"
        )
    lap = graph.laplacian
    if isinstance(heatmaps, np.ndarray):
        return heatmaps + np.einsum("kq,...qhw->...khw", lap, heatmaps)
    import torch

    lap_t = torch.tensor(lap, dtype=heatmaps.dtype, device=heatmaps.device)
    return heatmaps + torch.einsum("kq,...qhw->...khw", lap_t, heatmaps)


def reweight_scales(pred: np.ndarray, gt: np.ndarray, visible: np.ndarray) -> np.ndarray:
    """Per-joint scale factors: each joint's share of the total prediction error.

    Occluded joints get scale 0. When the total error over visible joints
    is zero (perfect prediction) the visible joints share a uniform
    1/|visible| so the maps are not wiped out.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    dist = np.linalg.norm(pred - gt, axis=-1)
    dist = np.where(visible, dist, 0.0)
    total = dist.sum()
    if total > 0.0:
        return dist / total
    n_vis = int(visible.sum())
    if n_vis == 0:
        return np.zeros_like(dist)
    return np.where(visible, 1.0 / n_vis, 0.0)


def error_reweight(heatmaps, pred, gt, occl_mask):
    """Scale each joint map by its share of the total joint-position error.

    ``occl_mask`` is True for occluded joints; their maps are zeroed and
    they contribute nothing to the error total. Coordinates must share one
    frame (heatmap grid units).
    """
    scales = reweight_scales(pred, gt, ~np.asarray(occl_mask, dtype=bool))
    if isinstance(heatmaps, np.ndarray):
        return heatmaps * scales[:, None, None]
    import torch

    scales_t = torch.as_tensor(scales, dtype=heatmaps.dtype, device=heatmaps.device)
    return heatmaps * scales_t[:, None, None]
