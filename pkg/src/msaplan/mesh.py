"""Structured hexahedral meshes, weighted rank partitioning and gather-scatter volumes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Optional, Sequence

import numpy as np


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class BoxMesh:
    """``nx * ny * nz`` elements; element id is ``i + nx*(j + ny*k)`` (x fastest)."""

    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for axis in ("nx", "ny", "nz"):
            v = getattr(self, axis)
            if int(v) != v or v < 1:
                raise PartitionError(f"{axis} must be a positive integer, got {v!r}")

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def dims(self) -> tuple:
        return (self.nx, self.ny, self.nz)

    @cached_property
    def coords(self) -> np.ndarray:
        """(E, 3) integer coordinates ``(i, j, k)`` of every element."""
        ids = np.arange(self.n_elements, dtype=np.int64)
        i = ids % self.nx
        j = (ids // self.nx) % self.ny
        k = ids // (self.nx * self.ny)
        out = np.stack([i, j, k], axis=1)
        out.setflags(write=False)
        return out

    @cached_property
    def faces(self) -> np.ndarray:
        """(F, 2) element pairs sharing a face, each pair listed once with a < b."""
        ids = np.arange(self.n_elements, dtype=np.int64).reshape(self.nz, self.ny, self.nx)
        parts = [
            np.stack([ids[:, :, :-1].ravel(), ids[:, :, 1:].ravel()], axis=1),
            np.stack([ids[:, :-1, :].ravel(), ids[:, 1:, :].ravel()], axis=1),
            np.stack([ids[:-1, :, :].ravel(), ids[1:, :, :].ravel()], axis=1),
        ]
        out = np.concatenate(parts)
        out.setflags(write=False)
        return out

    @property
    def n_faces(self) -> int:
        nx, ny, nz = self.dims
        return (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)

    def neighbors(self, e: int) -> list:
        i, j, k = (int(v) for v in self.coords[e])
        out = []
        for d, (c, n) in enumerate(zip((i, j, k), self.dims)):
            stride = (1, self.nx, self.nx * self.ny)[d]
            if c > 0:
                out.append(e - stride)
            if c < n - 1:
                out.append(e + stride)
        return sorted(out)


def build_box_mesh(nx: int, ny: int, nz: int) -> BoxMesh:
    return BoxMesh(nx, ny, nz)


def auto_box_dims(elements: int, max_aspect: float = 8.0) -> tuple:
    """Most cubic factorisation ``nx*ny*nz == elements`` (minimum surface area).

    Ties go to the lexicographically largest ``(nx, ny, nz)`` so the longest
    side runs along x. Raises if every factorisation is stretched beyond
    ``max_aspect``.
    """
    if elements < 1:
        raise PartitionError("elements must be positive")
    best = None
    for a in range(1, int(round(elements ** (1 / 3))) + 2):
        if elements % a:
            continue
        rest = elements // a
        for b in range(a, math.isqrt(rest) + 1):
            if rest % b:
                continue
            c = rest // b
            if c / a > max_aspect:
                continue
            area = a * b + b * c + a * c
            if best is None or area < best[0]:
                best = (area, (c, b, a))
    if best is None:
        raise PartitionError(
            f"{elements} elements have no box factorisation with aspect ratio <= {max_aspect:g}; "
            "pass explicit mesh dimensions"
        )
    return best[1]


@dataclass(frozen=True)
class RankWeights:
    weights: tuple
    rank_class: Optional[tuple] = None

    def __post_init__(self):
        w = tuple(float(x) for x in self.weights)
        object.__setattr__(self, "weights", w)
        if any(x < 0 or not math.isfinite(x) for x in w):
            raise PartitionError("rank weights must be finite and non-negative")
        if not sum(w) > 0:
            raise PartitionError("rank weights must not all be zero")
        if self.rank_class is not None and len(self.rank_class) != len(w):
            raise PartitionError("rank_class length does not match weights")

    def __len__(self):
        return len(self.weights)

    def quotas(self, total: int) -> np.ndarray:
        w = np.asarray(self.weights)
        return total * w / w.sum()


def largest_remainder(quotas: Sequence[float], total: int) -> list:
    """Round non-negative ``quotas`` to integers summing to ``total``.

    Floors everything, then hands the leftover units to the largest fractional
    parts; equal remainders go to the lower index.
    """
    q = np.asarray(quotas, dtype=float)
    base = np.floor(q + 1e-9).astype(np.int64)
    base = np.minimum(base, np.ceil(q).astype(np.int64))
    short = int(total - base.sum())
    if short < 0 or short > len(q):
        raise PartitionError(f"quotas sum to {q.sum()} which cannot round to {total}")
    frac = q - base
    # stable sort on -frac keeps index order among equal remainders
    order = np.argsort(-np.round(frac, 12), kind="stable")
    base[order[:short]] += 1
    return [int(x) for x in base]


def target_counts(elements: int, weights) -> list:
    if elements < 0:
        raise PartitionError("element count must be non-negative")
    if not isinstance(weights, RankWeights):
        weights = RankWeights(tuple(weights))
    return largest_remainder(weights.quotas(elements), elements)


@dataclass(frozen=True)
class Partition:
    assignment: np.ndarray = field(repr=False)
    counts: tuple

    @property
    def n_ranks(self) -> int:
        return len(self.counts)

    @property
    def n_elements(self) -> int:
        return int(self.assignment.size)

    def elements_of(self, rank: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == rank)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["element_id", "rank"])
            w.writerows(enumerate(self.assignment.tolist()))


def partition_from_assignment(assignment: Iterable[int], n_ranks: int) -> Partition:
    a = np.asarray(list(assignment) if not isinstance(assignment, np.ndarray) else assignment, dtype=np.int64)
    if a.size and (a.min() < 0 or a.max() >= n_ranks):
        raise PartitionError("assignment refers to a rank outside [0, n_ranks)")
    a = a.copy()
    a.setflags(write=False)
    counts = tuple(int(c) for c in np.bincount(a, minlength=n_ranks))
    return Partition(a, counts)


def partition_rcb(mesh: BoxMesh, counts: Sequence[int]) -> Partition:
    """Recursive coordinate bisection honouring exact per-rank element counts.

    The rank range is halved (lower half gets ``n // 2`` ranks) and the element
    set is cut along the longest axis of its bounding box so the lower side
    holds exactly the lower half's total. Ties in axis length prefer x, then
    y, then z; elements with equal coordinate are ordered by id.
    """
    counts = [int(c) for c in counts]
    if any(c < 0 for c in counts):
        raise PartitionError("counts must be non-negative")
    if not counts or sum(counts) != mesh.n_elements:
        raise PartitionError(f"counts sum to {sum(counts)} but mesh has {mesh.n_elements} elements")

    n = mesh.n_elements
    coords = mesh.coords
    prefix = np.concatenate([[0], np.cumsum(counts)])
    assignment = np.empty(n, dtype=np.int64)
    stack = [(np.arange(n, dtype=np.int64), 0, len(counts))]
    while stack:
        ids, lo, hi = stack.pop()
        if hi - lo == 1:
            assignment[ids] = lo
            continue
        mid = lo + (hi - lo) // 2
        n_left = int(prefix[mid] - prefix[lo])
        if n_left == 0 or n_left == ids.size:
            left, right = (ids[:0], ids) if n_left == 0 else (ids, ids[:0])
        else:
            c = coords[ids]
            axis = int(np.argmax(c.max(axis=0) - c.min(axis=0)))
            key = c[:, axis] * n + ids
            order = np.argpartition(key, n_left)
            left, right = ids[order[:n_left]], ids[order[n_left:]]
        stack.append((right, mid, hi))
        stack.append((left, lo, mid))

    assignment.setflags(write=False)
    return Partition(assignment, tuple(counts))


@dataclass(frozen=True)
class CommPlan:
    """Gather-scatter exchange between ranks: one face shares ``(N+1)**2`` points."""

    n_ranks: int
    points_per_face: int
    pair_faces: dict  # (a, b) with a < b -> shared faces

    def points(self, r: int, s: int) -> int:
        key = (r, s) if r < s else (s, r)
        return self.pair_faces.get(key, 0) * self.points_per_face

    def messages(self, rank: int) -> list:
        """``(neighbour, points)`` sent by ``rank`` each gather-scatter round."""
        if not 0 <= rank < self.n_ranks:
            raise KeyError(f"rank {rank} not in plan")
        return [(self._other(k, rank), f * self.points_per_face) for k, f in self._by_rank[rank]]

    @staticmethod
    def _other(pair, rank):
        return pair[1] if pair[0] == rank else pair[0]

    @cached_property
    def _by_rank(self) -> list:
        out = [[] for _ in range(self.n_ranks)]
        for pair, f in sorted(self.pair_faces.items()):
            out[pair[0]].append((pair, f))
            out[pair[1]].append((pair, f))
        return out

    @cached_property
    def rank_points(self) -> np.ndarray:
        out = np.zeros(self.n_ranks, dtype=np.int64)
        for (a, b), f in self.pair_faces.items():
            out[a] += f * self.points_per_face
            out[b] += f * self.points_per_face
        return out

    @cached_property
    def rank_messages(self) -> np.ndarray:
        out = np.zeros(self.n_ranks, dtype=np.int64)
        for a, b in self.pair_faces:
            out[a] += 1
            out[b] += 1
        return out

    @property
    def inter_rank_faces(self) -> int:
        return sum(self.pair_faces.values())

    @property
    def total_exchanged_points(self) -> int:
        return int(self.rank_points.sum())

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["rank_a", "rank_b", "points"])
            for (a, b), faces in sorted(self.pair_faces.items()):
                w.writerow([a, b, faces * self.points_per_face])


def comm_plan(mesh: BoxMesh, partition: Partition, poly_order: int) -> CommPlan:
    if partition.n_elements != mesh.n_elements:
        raise PartitionError("partition does not match mesh size")
    faces = mesh.faces
    ra = partition.assignment[faces[:, 0]]
    rb = partition.assignment[faces[:, 1]]
    cut = ra != rb
    lo = np.minimum(ra[cut], rb[cut])
    hi = np.maximum(ra[cut], rb[cut])
    keys, n = np.unique(lo * partition.n_ranks + hi, return_counts=True)
    pair_faces = {
        (int(k // partition.n_ranks), int(k % partition.n_ranks)): int(c) for k, c in zip(keys, n)
    }
    return CommPlan(partition.n_ranks, (poly_order + 1) ** 2, pair_faces)


@dataclass(frozen=True)
class PartitionStats:
    imbalance: float
    max_count: int
    min_count: int


def partition_stats(partition: Partition, weights) -> PartitionStats:
    """``imbalance`` is the worst ratio of a rank's count to its exact weighted share."""
    if not isinstance(weights, RankWeights):
        weights = RankWeights(tuple(weights))
    if len(weights) != partition.n_ranks:
        raise PartitionError("weights and partition disagree on rank count")
    targets = weights.quotas(partition.n_elements)
    counts = np.asarray(partition.counts, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(targets > 0, counts / np.where(targets > 0, targets, 1.0), np.where(counts > 0, np.inf, 0.0))
    return PartitionStats(float(ratio.max()), int(counts.max()), int(counts.min()))


def check_unit_depth(mesh: BoxMesh, partition: Partition, plan: CommPlan) -> bool:
    """True when the plan exchanges exactly the faces between directly adjacent elements.

    Recounts the rank-pair interfaces from the 3-D rank grid, shifted by one
    element along each axis, and compares them with the plan. Any exchange
    reaching past the first layer of elements, or any missed interface, fails.
    """
    if plan.n_ranks != partition.n_ranks or partition.n_elements != mesh.n_elements:
        return False
    grid = np.asarray(partition.assignment).reshape(mesh.nz, mesh.ny, mesh.nx)
    seen: dict = {}
    for axis in range(3):
        a = np.delete(grid, -1, axis=axis).ravel()
        b = np.delete(grid, 0, axis=axis).ravel()
        cut = a != b
        for lo, hi in zip(np.minimum(a[cut], b[cut]).tolist(), np.maximum(a[cut], b[cut]).tolist()):
            seen[(lo, hi)] = seen.get((lo, hi), 0) + 1
    return seen == plan.pair_faces
