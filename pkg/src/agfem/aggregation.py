"""Serial cell aggregation.

Every active cell is assigned a root interior cell by sweeping over the
untouched cut cells: a cut cell joins the aggregate of a face neighbor
that was already touched at the start of the round and whose shared face
intersects the domain.  Among candidates the one whose root-cell
barycenter is closest to the current cell wins; ties go to the smaller
neighbor id.  The candidate snapshot is frozen per round, which makes the
result independent of the in-round scan order and lets the distributed
variant reproduce it exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import CellClassification


class AggregationStalledError(RuntimeError):
    """Some cut cells cannot reach any interior cell through active faces."""

    def __init__(self, orphan_ids):
        self.orphan_ids = sorted(int(k) for k in orphan_ids)
        super().__init__(
            f"aggregation stalled; {len(self.orphan_ids)} cut cell(s) are "
            f"unreachable from any interior cell: {self.orphan_ids}"
        )


class AggregateValidationError(ValueError):
    """An aggregate violates its structural invariants."""


@dataclass
class RootMap:
    """Root-cell map R and next-cell map N over 1-based active ids."""

    root: np.ndarray      # R(k), 1-based interior ids
    next: np.ndarray      # N(k), the face neighbor chosen on the path
    rounds: int

    def root_of(self, cell_id: int) -> int:
        return int(self.root[cell_id - 1])

    def next_of(self, cell_id: int) -> int:
        return int(self.next[cell_id - 1])

    @property
    def n_cells(self) -> int:
        return self.root.size


def pick_candidate(candidates, roots_of_candidates, cell_barycenter,
                   root_barycenters) -> int:
    """Index into `candidates` of the winner under the distance/id tie-break."""
    best = 0
    best_dist = None
    for i, (cand, rb) in enumerate(zip(candidates, root_barycenters)):
        dist = float(np.sum((rb - cell_barycenter) ** 2))
        if best_dist is None or dist < best_dist or (
                dist == best_dist and cand < candidates[best]):
            best = i
            best_dist = dist
    return best


def aggregate_serial(classification: CellClassification, face_active,
                     neighbors=None, barycenters=None) -> RootMap:
    """Run the serial aggregation sweep.

    Parameters
    ----------
    classification : active-cell classification.
    face_active : callable (cell_id, cell_id) -> bool testing whether the
        shared face intersects the domain.
    neighbors : optional callable (cell_id) -> array of active neighbor
        ids in deterministic order; defaults to the grid adjacency.
    barycenters : optional (n_active, d) array; defaults to the lattice
        barycenters.
    """
    n = classification.n_active
    if neighbors is None:
        neighbors = classification.active_face_neighbors
    if barycenters is None:
        barycenters = classification.barycenters()
    root = np.full(n, -1, dtype=np.int64)
    nxt = np.full(n, -1, dtype=np.int64)
    interior = classification.interior_ids
    root[interior - 1] = interior
    nxt[interior - 1] = interior

    untouched = [int(k) for k in classification.cut_ids]
    rounds = 0
    while untouched:
        touched = root != -1  # frozen snapshot for this round
        assigned = []
        for k in untouched:
            cands, cand_roots = [], []
            for nb in neighbors(k):
                if touched[nb - 1] and face_active(k, int(nb)):
                    cands.append(int(nb))
                    cand_roots.append(int(root[nb - 1]))
            if not cands:
                continue
            pick = pick_candidate(
                cands, cand_roots, barycenters[k - 1],
                [barycenters[r - 1] for r in cand_roots])
            root[k - 1] = cand_roots[pick]
            nxt[k - 1] = cands[pick]
            assigned.append(k)
        rounds += 1
        if not assigned:
            raise AggregationStalledError(untouched)
        untouched = [k for k in untouched if root[k - 1] == -1]
    return RootMap(root=root, next=nxt, rounds=rounds)


@dataclass
class AggregateSet:
    """Aggregates grouped by root id, with path statistics."""

    members: dict
    max_size: int
    max_path_length: int

    @property
    def n_aggregates(self) -> int:
        return len(self.members)


def aggregates(classification: CellClassification, root_map: RootMap,
               face_active=None) -> AggregateSet:
    """Group cells by root and validate aggregate well-formedness.

    Checks that the aggregates partition the active cells, that each one
    contains exactly one interior cell (its root), and that following the
    next-cell map from any member reaches the root through face-neighbor
    steps whose shared faces are active.
    """
    n = classification.n_active
    if root_map.n_cells != n:
        raise AggregateValidationError("root map size does not match mesh")
    if np.any(root_map.root == -1):
        missing = np.flatnonzero(root_map.root == -1) + 1
        raise AggregateValidationError(f"unassigned cells: {missing.tolist()}")

    interior = set(int(k) for k in classification.interior_ids)
    members: dict[int, list[int]] = {}
    for k in range(1, n + 1):
        members.setdefault(int(root_map.root[k - 1]), []).append(k)

    for root_id, cells in members.items():
        if root_id not in interior:
            raise AggregateValidationError(
                f"aggregate rooted at {root_id} has a non-interior root")
        n_interior = sum(1 for c in cells if c in interior)
        if n_interior != 1:
            raise AggregateValidationError(
                f"aggregate rooted at {root_id} contains {n_interior} "
                f"interior cells (members {cells})")

    max_path = 0
    for k in range(1, n + 1):
        path_len = 0
        cur = k
        while cur != root_map.next_of(cur):
            nxt = root_map.next_of(cur)
            if nxt not in set(int(x) for x in classification.active_face_neighbors(cur)):
                raise AggregateValidationError(
                    f"next-cell {nxt} of cell {cur} is not a face neighbor")
            if face_active is not None and not face_active(cur, nxt):
                raise AggregateValidationError(
                    f"path step {cur} -> {nxt} crosses an inactive face")
            if root_map.root_of(nxt) != root_map.root_of(cur):
                raise AggregateValidationError(
                    f"root changes along the path at {cur} -> {nxt}")
            cur = nxt
            path_len += 1
            if path_len > n:
                raise AggregateValidationError(f"next-cell cycle through {k}")
        if cur != root_map.root_of(k):
            raise AggregateValidationError(
                f"path from {k} ends at {cur}, not its root {root_map.root_of(k)}")
        max_path = max(max_path, path_len)

    max_size = max((len(c) for c in members.values()), default=0)
    return AggregateSet(members=members, max_size=max_size,
                        max_path_length=max_path)
