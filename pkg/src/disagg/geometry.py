"""Synthetic nested polygon partitions of a pixel grid.

Polygons stand in for administrative units.  Level 1 is the coarsest; every
level-(k+1) polygon lies inside exactly one level-k polygon.  Adjacency is
4-connectivity: two polygons touch when they share a pixel edge.
"""

from __future__ import annotations

import heapq
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError
from .raster import GridSpec

MAX_SAMPLE_RESTARTS = 20


@dataclass(frozen=True)
class PolygonPartition:
    level: int
    labels: np.ndarray  # (ny, nx) int, ids 0..P-1
    adjacency: tuple[frozenset, ...]
    areas: np.ndarray  # pixel count per polygon

    @property
    def n_polygons(self) -> int:
        return len(self.areas)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.labels.shape

    def neighbours(self, pid: int) -> frozenset:
        return self.adjacency[pid]

    @classmethod
    def from_labels(cls, labels: np.ndarray, level: int) -> "PolygonPartition":
        labels = np.array(labels, dtype=np.int64)
        n = int(labels.max()) + 1 if labels.size else 0
        areas = np.bincount(labels.ravel(), minlength=n)
        if labels.min() < 0 or np.any(areas == 0):
            raise ConfigurationError("polygon ids must be 0..P-1 with every id present")
        for pid, box in enumerate(ndimage.find_objects(labels + 1)):
            if ndimage.label(labels[box] == pid)[1] != 1:
                raise ConfigurationError(f"polygon {pid} is not edge-connected")
        labels.setflags(write=False)
        areas.setflags(write=False)
        return cls(level=level, labels=labels, adjacency=_adjacency(labels, n), areas=areas)


@dataclass(frozen=True)
class World:
    grid: GridSpec
    partitions: tuple[PolygonPartition, ...]
    # nesting[k][c] = parent id (at level k+1) of child c at level k+2
    nesting: tuple[np.ndarray, ...] = field(default=())

    def level(self, level: int) -> PolygonPartition:
        for part in self.partitions:
            if part.level == level:
                return part
        raise KeyError(f"world has no admin level {level}")

    @property
    def levels(self) -> tuple[int, ...]:
        return tuple(p.level for p in self.partitions)


def _adjacency(labels: np.ndarray, n: int) -> tuple[frozenset, ...]:
    pairs = []
    for a, b in ((labels[:, :-1], labels[:, 1:]), (labels[:-1, :], labels[1:, :])):
        diff = a != b
        pairs.append(np.stack([a[diff], b[diff]], axis=1))
    pairs = np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=np.int64)
    nbrs = [set() for _ in range(n)]
    for i, j in np.unique(np.sort(pairs, axis=1), axis=0):
        nbrs[i].add(int(j))
        nbrs[j].add(int(i))
    return tuple(frozenset(s) for s in nbrs)


def _divisor_pairs(r: int):
    for a in range(1, r + 1):
        if r % a == 0:
            yield a, r // a


def _block_counts(counts: Sequence[int], nx: int, ny: int) -> list[tuple[int, int]]:
    """Choose (blocks along x, blocks along y) for each level so blocks nest."""
    bx, by, prev = 1, 1, 1
    out = []
    for c in counts:
        if c % prev:
            raise ConfigurationError(
                f"level counts must each divide the next; {c} is not a multiple of {prev}"
            )
        best = None
        for rx, ry in _divisor_pairs(c // prev):
            if bx * rx > nx or by * ry > ny:
                continue
            aspect = abs(np.log((nx / (bx * rx)) / (ny / (by * ry))))
            key = (round(aspect, 12), -rx)
            if best is None or key < best[0]:
                best = (key, rx, ry)
        if best is None:
            raise ConfigurationError(f"{c} polygons do not fit on a {nx}x{ny} grid")
        bx, by = bx * best[1], by * best[2]
        prev = c
        out.append((bx, by))
    return out


def _block_labels(nx: int, ny: int, bx: int, by: int) -> np.ndarray:
    col = (np.arange(nx) * bx) // nx
    row = (np.arange(ny) * by) // ny
    return row[:, None] * bx + col[None, :]


def _grow_children(parent_labels, rect_labels, nesting_rect, irregularity, rng):
    """Re-grow the children of every parent region by multi-source Dijkstra.

    Each child starts from the parent pixel nearest its rectangular block's
    centre and claims pixels along cheapest paths, so children are connected
    and stay inside their parent.
    """
    ny, nx = parent_labels.shape
    cost = 1.0 + 4.0 * irregularity * rng.random((ny, nx))
    labels = np.full((ny, nx), -1, dtype=np.int64)
    yy, xx = np.mgrid[0:ny, 0:nx]
    n_child = int(rect_labels.max()) + 1
    cx = np.bincount(rect_labels.ravel(), weights=xx.ravel(), minlength=n_child)
    cy = np.bincount(rect_labels.ravel(), weights=yy.ravel(), minlength=n_child)
    cnt = np.bincount(rect_labels.ravel(), minlength=n_child)
    cx, cy = cx / cnt, cy / cnt

    heap = []
    counter = 0
    for parent in range(int(parent_labels.max()) + 1):
        inside = np.flatnonzero(parent_labels.ravel() == parent)
        px, py = xx.ravel()[inside], yy.ravel()[inside]
        taken = set()
        for child in np.flatnonzero(nesting_rect == parent):
            d2 = (px - cx[child]) ** 2 + (py - cy[child]) ** 2
            for k in np.argsort(d2, kind="stable"):
                if inside[k] not in taken:
                    break
            else:
                raise ConfigurationError(f"parent polygon {parent} has fewer pixels than children")
            taken.add(inside[k])
            heapq.heappush(heap, (0.0, counter, int(inside[k]), int(child)))
            counter += 1

    while heap:
        dist, _, pix, child = heapq.heappop(heap)
        r, c = divmod(pix, nx)
        if labels[r, c] != -1:
            continue
        labels[r, c] = child
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if 0 <= rr < ny and 0 <= cc < nx and labels[rr, cc] == -1:
                if parent_labels[rr, cc] == parent_labels[r, c]:
                    heapq.heappush(heap, (dist + cost[rr, cc], counter, rr * nx + cc, child))
                    counter += 1
    return labels


def make_world(
    spec: GridSpec,
    level_shapes: Sequence[int] = (4, 16, 64),
    irregularity: float = 0.0,
    seed: int = 0,
) -> World:
    """Build nested partitions with the requested polygon count per level.

    ``irregularity=0`` gives exact rectangular blocks.  Larger values
    perturb boundaries through seeded region growing; connectivity and
    nesting are preserved by construction.
    """
    counts = [int(c) for c in level_shapes]
    if not counts:
        raise ConfigurationError("at least one admin level is required")
    if any(b <= a for a, b in zip(counts, counts[1:])) or counts[0] < 1:
        raise ConfigurationError(f"level counts must be positive and strictly increasing: {counts}")
    if counts[-1] > spec.size:
        raise ConfigurationError(f"{counts[-1]} polygons requested on only {spec.size} pixels")
    if not 0.0 <= irregularity <= 1.0:
        raise ConfigurationError(f"irregularity must lie in [0, 1], got {irregularity}")

    blocks = _block_counts(counts, spec.nx, spec.ny)
    rect = [_block_labels(spec.nx, spec.ny, bx, by) for bx, by in blocks]
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x67656F]))

    labels = []
    parent = np.zeros(spec.shape, dtype=np.int64)
    parent_rect = parent
    for lab in rect:
        n_child = int(lab.max()) + 1
        nest_rect = np.zeros(n_child, dtype=np.int64)
        nest_rect[lab.ravel()] = parent_rect.ravel()
        if irregularity == 0.0:
            cur = lab.copy()
        else:
            cur = _grow_children(parent, lab, nest_rect, irregularity, rng)
        labels.append(cur)
        parent, parent_rect = cur, lab

    partitions = tuple(
        PolygonPartition.from_labels(lab, level=k + 1) for k, lab in enumerate(labels)
    )
    nesting = []
    for coarse, fine in zip(labels, labels[1:]):
        m = np.zeros(int(fine.max()) + 1, dtype=np.int64)
        m[fine.ravel()] = coarse.ravel()
        m.setflags(write=False)
        nesting.append(m)
    return World(grid=spec, partitions=partitions, nesting=tuple(nesting))


def is_connected(ids: Iterable[int], adjacency: Sequence[frozenset]) -> bool:
    """Breadth-first check that ``ids`` form one component of ``adjacency``."""
    ids = set(int(i) for i in ids)
    if not ids:
        return True
    start = next(iter(ids))
    seen = {start}
    queue = deque([start])
    while queue:
        for nb in adjacency[queue.popleft()]:
            if nb in ids and nb not in seen:
                seen.add(nb)
                queue.append(nb)
    return seen == ids


def sample_contiguous(partition: PolygonPartition, n: int, seed: int) -> frozenset:
    """Randomly grow a connected set of ``n`` polygons.

    Starts at a uniformly chosen polygon and repeatedly adds a uniformly
    chosen unselected neighbour of the current set.
    """
    P = partition.n_polygons
    if not 1 <= n <= P:
        raise ValueError(f"cannot sample {n} polygons from a partition of {P}")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x636F6E]))
    for _ in range(MAX_SAMPLE_RESTARTS):
        start = int(rng.integers(P))
        chosen = {start}
        frontier = set(partition.adjacency[start])
        while len(chosen) < n and frontier:
            pick = sorted(frontier)[int(rng.integers(len(frontier)))]
            chosen.add(pick)
            frontier.discard(pick)
            frontier.update(partition.adjacency[pick] - chosen)
        if len(chosen) == n:
            return frozenset(chosen)
    raise RuntimeError(
        f"contiguous growth to {n} polygons failed after {MAX_SAMPLE_RESTARTS} restarts"
    )


def polygon_mask(partition: PolygonPartition, ids: Iterable[int]) -> np.ndarray:
    ids = np.array(sorted(set(int(i) for i in ids)), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= partition.n_polygons):
        raise ValueError(f"unknown polygon id in {ids.tolist()}")
    return np.isin(partition.labels, ids)
