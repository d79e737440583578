"""Space-filling-curve mesh partitioning and per-subdomain views.

Subdomains own contiguous ranges of Morton-ordered cells; range
boundaries balance per-subdomain weight sums.  Each subdomain view keeps
its owned cells plus a ghost layer of every foreign active cell that
shares a vertex, edge, or face with an owned cell, which guarantees all
cells incident to any locally owned node are locally relevant.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .geometry import CellClassification, INTERIOR, CUT
from .grid import morton_encode


class PartitionError(ValueError):
    """Invalid partition request."""


def _greedy_bounds(prefix: np.ndarray, n_parts: int, lo: float) -> np.ndarray:
    """Close each range at the first cell where its sum reaches `lo`."""
    n = prefix.size
    bounds = np.zeros(n_parts + 1, dtype=np.int64)
    bounds[n_parts] = n
    start = 0.0
    for s in range(1, n_parts):
        b = int(np.searchsorted(prefix, start + lo, side="left")) + 1
        b = max(b, int(bounds[s - 1]) + 1)
        b = min(b, n - (n_parts - s))
        bounds[s] = b
        start = float(prefix[b - 1])
    return bounds


def _balanced_boundaries(prefix: np.ndarray, n_parts: int) -> np.ndarray:
    """Bisect the greedy threshold so the leftover range is no lighter.

    With threshold lo every closed range weighs in [lo, lo + w_max); the
    largest lo whose leftover still reaches lo puts all sums in a window
    of one maximum cell weight.
    """
    total = float(prefix[-1])
    lo_ok, lo_bad = 0.0, total
    for _ in range(100):
        mid = 0.5 * (lo_ok + lo_bad)
        bounds = _greedy_bounds(prefix, n_parts, mid)
        leftover = total - float(prefix[bounds[n_parts - 1] - 1])
        if leftover >= mid:
            lo_ok = mid
        else:
            lo_bad = mid
    return _greedy_bounds(prefix, n_parts, lo_ok)


def _adaptive_boundaries(prefix: np.ndarray, n_parts: int) -> np.ndarray:
    """Close each range at the prefix nearest the remaining average."""
    n = prefix.size
    total = float(prefix[-1])
    bounds = np.zeros(n_parts + 1, dtype=np.int64)
    bounds[n_parts] = n
    start = 0.0
    for s in range(1, n_parts):
        target = start + (total - start) / (n_parts - s + 1)
        c = int(np.searchsorted(prefix, target, side="left"))
        if c >= n:
            b = n
        elif c == 0 or prefix[c] - target <= target - prefix[c - 1]:
            b = c + 1
        else:
            b = c
        b = max(b, int(bounds[s - 1]) + 1)
        b = min(b, n - (n_parts - s))
        bounds[s] = b
        start = float(prefix[b - 1])
    return bounds


def _range_sums(weights: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    return np.array([weights[bounds[s]:bounds[s + 1]].sum()
                     for s in range(bounds.size - 1)])


def _repair_boundaries(weights: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Shrink the max-min spread of range sums by boundary moves.

    Candidate moves shift one cell across a single boundary, or cascade
    one cell across every boundary between the heaviest and lightest
    range; the best strictly improving move is applied until the spread
    is within one max weight or no move helps.
    """
    n_parts = bounds.size - 1
    if n_parts == 1:
        return bounds
    sums = _range_sums(weights, bounds)
    w_max = float(weights.max())
    mean = sums.sum() / n_parts

    def objective(ns):
        # spread first; ties broken by total imbalance so moves that pull
        # one of several extremal ranges off the extreme still count
        return (ns.max() - ns.min(), float(np.sum((ns - mean) ** 2)))

    current = objective(sums)
    for _ in range(4 * weights.size):
        if current[0] <= w_max:
            break
        # shifting boundary t by -1 moves one cell (and its weight) from
        # range t-1 into range t; by +1 the other way
        candidates = [([t], d) for t in range(1, n_parts) for d in (-1, 1)]
        heavy = np.argsort(sums)[-3:]
        light = np.argsort(sums)[:3]
        for i in heavy:
            for j in light:
                if i < j:
                    candidates.append((list(range(i + 1, j + 1)), -1))
                elif j < i:
                    candidates.append((list(range(j + 1, i + 1)), +1))
        best = None
        for move, delta in candidates:
            trial = bounds.copy()
            trial[move] += delta
            if np.any(np.diff(trial) < 1):
                continue
            ns = _range_sums(weights, trial)
            cand = objective(ns)
            if cand < current and (best is None or cand < best[0]):
                best = (cand, trial, ns)
        if best is None:
            break
        current, bounds, sums = best
    return bounds


def _split(weights: np.ndarray, n_parts: int) -> np.ndarray:
    """Owner (1-based) per position for Morton-ordered weighted cells."""
    prefix = np.cumsum(weights)
    best = None
    for seed_bounds in (_adaptive_boundaries(prefix, n_parts),
                        _balanced_boundaries(prefix, n_parts)):
        bounds = _repair_boundaries(weights, seed_bounds)
        sums = _range_sums(weights, bounds)
        score = (float(sums.max() - sums.min()), float(np.sum(sums**2)))
        if best is None or score < best[0]:
            best = (score, bounds)
    bounds = best[1]
    owner = np.empty(weights.size, dtype=np.int64)
    for s in range(n_parts):
        owner[bounds[s]:bounds[s + 1]] = s + 1
    return owner


@dataclass
class Partition:
    """Owner subdomain per active cell, 1-based; contiguous Morton ranges."""

    n_subdomains: int
    owner_of_active: np.ndarray
    weights: np.ndarray
    owner_of_background: np.ndarray | None = None  # flat, Morton-code indexed

    def owner_of(self, cell_id: int) -> int:
        return int(self.owner_of_active[cell_id - 1])

    def subdomain_weights(self) -> np.ndarray:
        out = np.zeros(self.n_subdomains)
        np.add.at(out, self.owner_of_active - 1, self.weights)
        return out


def partition_weighted_sfc(classification: CellClassification, weights=None,
                           n_subdomains: int = 1, include_exterior: bool = False,
                           exterior_weight: float = 1.0) -> Partition:
    """Split Morton-ordered cells into weight-balanced contiguous ranges.

    By default only active cells are partitioned.  With
    ``include_exterior`` the whole background grid is split (exterior
    cells carrying ``exterior_weight``) and active owners are read off
    the background ranges, which is what the partition weighting study
    exercises.
    """
    n_active = classification.n_active
    if n_subdomains < 1:
        raise PartitionError("subdomain count must be >= 1")
    if n_subdomains > n_active:
        raise PartitionError(
            f"{n_subdomains} subdomains requested for {n_active} active cells")
    if weights is None:
        weights = np.ones(n_active)
    else:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (n_active,):
            raise PartitionError("need one weight per active cell")
    if np.any(weights <= 0) or exterior_weight <= 0:
        raise PartitionError("weights must be positive")

    grid = classification.grid
    codes = morton_encode(classification.id_to_lattice, grid.level)
    if include_exterior:
        full = np.full(grid.n_cells, exterior_weight, dtype=np.float64)
        full[codes] = weights
        owner_bg = _split(full, n_subdomains)
        owner_active = owner_bg[codes]
        return Partition(n_subdomains, owner_active, weights, owner_bg)
    # active ids are assigned in Morton order, so id order is curve order
    owner_active = _split(weights, n_subdomains)
    return Partition(n_subdomains, owner_active, weights)


@dataclass
class SubdomainMesh:
    """Locally relevant cells of one subdomain: owned first, then ghosts.

    Local ids are 1-based; ``global_ids[l-1]`` maps back to the active
    mesh.  Halo lists pair up across subdomains by ascending global id,
    so positional payloads line up without further negotiation.
    """

    s: int
    classification: CellClassification
    global_ids: np.ndarray            # (n_relevant,)
    n_local: int
    owner_of_relevant: np.ndarray     # (n_relevant,)
    neighbors: np.ndarray             # sorted subdomain ids
    send_halo: dict                   # s' -> local ids of owned cells ghosted by s'
    recv_halo: dict                   # s' -> local ids of ghosts owned by s'
    local_of: dict = field(init=False)
    labels: np.ndarray = field(init=False)

    def __post_init__(self):
        self.local_of = {int(g): l + 1 for l, g in enumerate(self.global_ids)}
        lab = np.empty(self.global_ids.size, dtype=np.int8)
        for i, g in enumerate(self.global_ids):
            lab[i] = self.classification.label_of(int(g))
        self.labels = lab

    @property
    def n_relevant(self) -> int:
        return self.global_ids.size

    @property
    def n_ghost(self) -> int:
        return self.n_relevant - self.n_local

    def is_local(self, l: int) -> bool:
        return 1 <= l <= self.n_local

    def global_of(self, l: int) -> int:
        return int(self.global_ids[l - 1])

    def local_id(self, global_id: int) -> int:
        return self.local_of[int(global_id)]

    def is_relevant(self, global_id: int) -> bool:
        return int(global_id) in self.local_of

    def locals_cut(self):
        return [l for l in range(1, self.n_local + 1)
                if self.labels[l - 1] == CUT]

    def relevant_cut(self):
        return [l for l in range(1, self.n_relevant + 1)
                if self.labels[l - 1] == CUT]

    def locals_interior(self):
        return [l for l in range(1, self.n_local + 1)
                if self.labels[l - 1] == INTERIOR]

    def relevant_interior(self):
        return [l for l in range(1, self.n_relevant + 1)
                if self.labels[l - 1] == INTERIOR]


def _vertex_adjacent(classification: CellClassification, lattice) -> list:
    grid = classification.grid
    out = []
    for off in itertools.product((-1, 0, 1), repeat=grid.d):
        if all(o == 0 for o in off):
            continue
        nb = lattice + np.asarray(off, dtype=np.int64)
        if np.all(nb >= 0) and np.all(nb < grid.n_per_axis):
            nb_id = classification.active_id[tuple(nb)]
            if nb_id > 0:
                out.append(int(nb_id))
    return out


def build_subdomain_meshes(classification: CellClassification,
                           partition: Partition) -> list:
    """Build every subdomain's local/ghost view plus matched halo lists."""
    owner = partition.owner_of_active
    n_parts = partition.n_subdomains
    locals_per: list = [[] for _ in range(n_parts)]
    for k in range(1, classification.n_active + 1):
        locals_per[owner[k - 1] - 1].append(k)

    ghosts_per: list = []
    for s in range(1, n_parts + 1):
        ghosts = set()
        for k in locals_per[s - 1]:
            for nb in _vertex_adjacent(classification, classification.lattice_of(k)):
                if owner[nb - 1] != s:
                    ghosts.add(nb)
        ghosts_per.append(sorted(ghosts))

    meshes = []
    for s in range(1, n_parts + 1):
        own = np.asarray(locals_per[s - 1], dtype=np.int64)
        gho = np.asarray(ghosts_per[s - 1], dtype=np.int64)
        global_ids = np.concatenate([own, gho])
        owner_rel = owner[global_ids - 1]
        nbrs = np.unique(owner_rel[len(own):])
        recv_halo = {}
        for sp in nbrs:
            sel = gho[owner[gho - 1] == sp]
            recv_halo[int(sp)] = np.asarray(
                [len(own) + int(np.searchsorted(gho, g)) + 1 for g in sel],
                dtype=np.int64)
        meshes.append(SubdomainMesh(
            s=s, classification=classification, global_ids=global_ids,
            n_local=len(own), owner_of_relevant=owner_rel,
            neighbors=nbrs.astype(np.int64), send_halo={}, recv_halo=recv_halo))

    # send side mirrors the receiver's ghost list, both in ascending global id
    for mesh in meshes:
        for other in meshes:
            if other.s == mesh.s:
                continue
            ghosts_owned_here = [g for g in ghosts_per[other.s - 1]
                                 if owner[g - 1] == mesh.s]
            if ghosts_owned_here:
                mesh.send_halo[other.s] = np.asarray(
                    [mesh.local_id(g) for g in ghosts_owned_here], dtype=np.int64)
    return meshes
