"""Nitsche-Poisson element integration and constrained assembly.

Element matrices carry the bulk gradient term plus the weak-Dirichlet
boundary terms; the penalty is either beta/h (aggregated spaces, robust
for any cut) or beta times the largest generalized eigenvalue of the
boundary/volume pencil per cut cell (standard spaces, which blows up as
the kept volume shrinks).  The constrained scatter redistributes the
rows and columns of constrained DOFs onto their masters, weighted by the
extrapolation coefficients; products of two constrained DOFs pick up
both weights.  Distributed assembly loops over locally owned cells only
and ships off-owner contributions to the row owners at finalize.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.linalg

from .fespace import StdSpace, shape_gradients, shape_values
from .geometry import CutQuadrature
from .runtime import VirtualRuntime


class AssemblyError(RuntimeError):
    """An element referenced a DOF with neither a row nor a constraint."""


class TauUnboundedError(RuntimeError):
    """The cut-cell volume form is numerically singular beyond constants."""


@dataclass
class ElementContribution:
    cell_id: int
    matrix: np.ndarray   # ((q+1)**d, (q+1)**d), symmetric
    vector: np.ndarray


def nitsche_tau_agg(h: float, beta: float) -> float:
    """Penalty beta/h used with aggregated spaces."""
    if h <= 0 or beta <= 0:
        raise ValueError("cell size and beta must be positive")
    return beta / h


def _constant_complement(m: int) -> np.ndarray:
    ones = np.ones((1, m))
    return scipy.linalg.null_space(ones)


def nitsche_tau_std(space: StdSpace, cell_id: int, quad: CutQuadrature,
                    beta: float) -> float:
    """Cell-wise penalty for the standard space from the local eigenproblem.

    Assembles the volume form V (gradient products over the kept region)
    and the boundary form B (normal-derivative products over the
    interface), deflates the constant kernel of V, and returns beta times
    the largest eigenvalue of B x = lambda V x, floored at beta/h.
    """
    if not quad.has_boundary:
        raise ValueError(f"cell {cell_id} has no boundary rule")
    grid = space.classification.grid
    d = grid.d
    q = space.q
    xi = space.reference_coords(cell_id, quad.points)
    grads = shape_gradients(q, d, xi) / grid.h
    V = np.einsum("nad,nbd,n->ab", grads, grads, quad.weights)
    xib = space.reference_coords(cell_id, quad.boundary_points)
    gradsb = shape_gradients(q, d, xib) / grid.h
    gn = np.einsum("nad,nd->na", gradsb, quad.boundary_normals)
    B = np.einsum("na,nb,n->ab", gn, gn, quad.boundary_weights)

    Z = _constant_complement(V.shape[0])
    Vh = Z.T @ V @ Z
    Bh = Z.T @ B @ Z
    floor = nitsche_tau_agg(float(np.min(grid.h)), beta)
    try:
        lam = scipy.linalg.eigh(Bh, Vh, eigvals_only=True)
    except scipy.linalg.LinAlgError as exc:
        raise TauUnboundedError(
            f"cell {cell_id}: volume form singular beyond its constant "
            f"kernel; the optimal penalty is unbounded") from exc
    lam_max = float(lam[-1])
    return max(beta * lam_max, floor)


def element_poisson_nitsche(space: StdSpace, cell_id: int, quad: CutQuadrature,
                            tau: float, f=None, g=None) -> ElementContribution:
    """Element matrix and vector of the weak-Dirichlet Poisson form.

    A_ab = int grad(phi_a).grad(phi_b) dOmega
         + int (tau phi_a phi_b - phi_a n.grad(phi_b) - phi_b n.grad(phi_a)) dGamma
    b_a  = int phi_a f dOmega + int (tau phi_a - n.grad(phi_a)) g dGamma
    restricted to the cell's cut region and interface.
    """
    grid = space.classification.grid
    d, q = grid.d, space.q
    m = space.nodes_per_cell
    A = np.zeros((m, m))
    b = np.zeros(m)
    if quad.weights.size:
        xi = space.reference_coords(cell_id, quad.points)
        grads = shape_gradients(q, d, xi) / grid.h
        A += np.einsum("nad,nbd,n->ab", grads, grads, quad.weights)
        if f is not None:
            vals = shape_values(q, d, xi)
            b += vals.T @ (quad.weights * np.asarray(f(quad.points)))
    if quad.has_boundary:
        xib = space.reference_coords(cell_id, quad.boundary_points)
        vals = shape_values(q, d, xib)
        grads = shape_gradients(q, d, xib) / grid.h
        gn = np.einsum("nad,nd->na", grads, quad.boundary_normals)
        w = quad.boundary_weights
        A += tau * np.einsum("na,nb,n->ab", vals, vals, w)
        A -= np.einsum("na,nb,n->ab", vals, gn, w)
        A -= np.einsum("na,nb,n->ab", gn, vals, w)
        if g is not None:
            gvals = np.asarray(g(quad.boundary_points))
            b += (tau * vals - gn).T @ (w * gvals)
    return ElementContribution(cell_id=cell_id, matrix=A, vector=b)


def poisson_elements(space: StdSpace, quads, taus, f=None, g=None) -> list:
    """Element contributions for every active cell, in cell-id order.

    Interior cells share one stiffness template and a batched load
    integral; cut cells are integrated individually.
    """
    cls = space.classification
    n = cls.n_active
    out: list = [None] * n
    interior = cls.interior_ids
    template = None
    if interior.size:
        k0 = int(interior[0])
        template = element_poisson_nitsche(space, k0, quads[k0 - 1], 0.0).matrix
        quad0 = quads[k0 - 1]
        xi0 = space.reference_coords(k0, quad0.points)
        phi_w = shape_values(space.q, cls.grid.d, xi0) * quad0.weights[:, None]
        ref_pts = quad0.points - cls.grid.cell_origin(cls.lattice_of(k0))
        for k in interior:
            k = int(k)
            if f is not None:
                pts = cls.grid.cell_origin(cls.lattice_of(k)) + ref_pts
                vec = phi_w.T @ np.asarray(f(pts))
            else:
                vec = np.zeros(space.nodes_per_cell)
            out[k - 1] = ElementContribution(k, template, vec)
    for k in cls.cut_ids:
        k = int(k)
        out[k - 1] = element_poisson_nitsche(
            space, k, quads[k - 1], float(taus[k - 1]), f, g)
    return out


# ---------------------------------------------------------------------------
# serial assembly


def _scatter_rows(dofs, constraints, node_id: int):
    """Rows and weights receiving the contributions of one global DOF."""
    if constraints is None:
        return np.array([node_id], dtype=np.int64), np.array([1.0])
    row = int(dofs.row_of[node_id - 1])
    if row > 0:
        return np.array([row], dtype=np.int64), np.array([1.0])
    try:
        return constraints.for_dof(node_id)
    except KeyError:
        raise AssemblyError(
            f"DOF {node_id} has neither a system row nor a constraint") from None


def assemble_serial(space: StdSpace, dofs, constraints, elements):
    """Assemble (A, b) over the free DOFs.

    With constraints the system lives on the interior rows and
    constrained element entries are redistributed onto master rows with
    the extrapolation weights (products of two weights for the
    constrained-constrained block).  With ``constraints=None`` the
    standard space is assembled over all DOFs.
    """
    n = space.n_dofs if constraints is None else dofs.n_interior
    rows_l, cols_l, vals_l = [], [], []
    b = np.zeros(n)
    for elem in elements:
        cell_nodes = space.cell_dofs[elem.cell_id - 1]
        infos = [_scatter_rows(dofs, constraints, int(g)) for g in cell_nodes]
        for a, (ra, wa) in enumerate(infos):
            np.add.at(b, ra - 1, wa * elem.vector[a])
            for c, (rc, wc) in enumerate(infos):
                val = elem.matrix[a, c]
                if val == 0.0:
                    continue
                rows_l.append(np.repeat(ra, rc.size))
                cols_l.append(np.tile(rc, ra.size))
                vals_l.append(np.outer(wa, wc).ravel() * val)
    if rows_l:
        rows = np.concatenate(rows_l) - 1
        cols = np.concatenate(cols_l) - 1
        vals = np.concatenate(vals_l)
        A = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    else:
        A = sp.csr_matrix((n, n))
    return A, b


# ---------------------------------------------------------------------------
# distributed assembly


@dataclass
class DistributedSystem:
    """Row-wise partitioned sparse system over the interior global ids."""

    n_global: int
    row_starts: np.ndarray    # (P+1,) 1-based owned-range starts
    blocks: list              # per s: csr of shape (n_owned, n_global)
    rhs: list                 # per s: (n_owned,)
    staged_counts: list       # per s: off-owner triplets shipped at finalize

    @property
    def n_subdomains(self) -> int:
        return len(self.blocks)

    def owned_range(self, s: int):
        return int(self.row_starts[s - 1]), int(self.row_starts[s])

    def gather(self):
        """Full (A, b) with globally ordered rows."""
        A = sp.vstack(self.blocks).tocsr()
        b = np.concatenate(self.rhs)
        return A, b


def _dist_scatter_rows(piece, constraints, l: int, a: int):
    j = int(piece.cell_j[l][a])
    if piece.j_interior[j - 1]:
        gid = int(piece.cell_g[l][a])
        if gid == -1:
            raise AssemblyError(
                f"subdomain {piece.s}: interior DOF {j} of local cell {l} "
                f"has no global id")
        return np.array([gid], dtype=np.int64), np.array([1.0])
    try:
        return constraints.for_dof(j)
    except KeyError:
        raise AssemblyError(
            f"subdomain {piece.s}: DOF {j} has neither a global id nor a "
            f"constraint") from None


def _assembly_body(proc, piece, constraints, elements, n_global, row_starts):
    s = proc.rank
    mesh = piece.mesh
    m = len(piece.cell_j[1]) if mesh.n_local else 0
    rows_l, cols_l, vals_l = [], [], []
    brows_l, bvals_l = [], []
    for l, elem in zip(range(1, mesh.n_local + 1), elements):
        infos = [_dist_scatter_rows(piece, constraints, l, a) for a in range(m)]
        for a, (ra, wa) in enumerate(infos):
            if elem.vector[a] != 0.0:
                brows_l.append(ra)
                bvals_l.append(wa * elem.vector[a])
            for c, (rc, wc) in enumerate(infos):
                val = elem.matrix[a, c]
                if val == 0.0:
                    continue
                rows_l.append(np.repeat(ra, rc.size))
                cols_l.append(np.tile(rc, ra.size))
                vals_l.append(np.outer(wa, wc).ravel() * val)
    rows = np.concatenate(rows_l) if rows_l else np.zeros(0, dtype=np.int64)
    cols = np.concatenate(cols_l) if cols_l else np.zeros(0, dtype=np.int64)
    vals = np.concatenate(vals_l) if vals_l else np.zeros(0)
    brows = np.concatenate(brows_l) if brows_l else np.zeros(0, dtype=np.int64)
    bvals = np.concatenate(bvals_l) if bvals_l else np.zeros(0)
    if rows.size and (rows.min() < 1 or rows.max() > n_global):
        raise AssemblyError(f"subdomain {s}: contribution outside the "
                            f"interior id range")

    owner = np.searchsorted(row_starts, rows, side="right")
    bowner = np.searchsorted(row_starts, brows, side="right")
    payloads = {}
    staged = 0
    for sp_ in range(1, len(row_starts)):
        if sp_ == s:
            continue
        mask = owner == sp_
        bmask = bowner == sp_
        if np.any(mask) or np.any(bmask):
            payloads[sp_] = (rows[mask], cols[mask], vals[mask],
                             brows[bmask], bvals[bmask])
            staged += int(mask.sum() + bmask.sum())
    received = yield proc.routed_exchange(payloads)

    my_start, my_end = int(row_starts[s - 1]), int(row_starts[s])
    n_owned = my_end - my_start
    keep = owner == s
    parts = [(rows[keep], cols[keep], vals[keep], brows[bowner == s],
              bvals[bowner == s])]
    for src in sorted(received):
        parts.append(received[src])
    all_rows = np.concatenate([p[0] for p in parts])
    all_cols = np.concatenate([p[1] for p in parts])
    all_vals = np.concatenate([p[2] for p in parts])
    A = sp.coo_matrix(
        (all_vals, (all_rows - my_start, all_cols - 1)),
        shape=(n_owned, n_global)).tocsr()
    b = np.zeros(n_owned)
    for p in parts:
        np.add.at(b, p[3] - my_start, p[4])
    return A, b, staged


def assemble_distributed(runtime: VirtualRuntime, numbering, constraints_per_s,
                         elements_per_s, phase: str = "assembly") -> DistributedSystem:
    """Assemble the row-wise partitioned system over all subdomains.

    Every subdomain integrates its locally owned cells only; the final
    routed exchange transfers staged off-owner rows to their owners,
    after which the gathered matrix equals the serial assembly.
    """
    row_starts = numbering.owned_ranges()
    results = runtime.run(
        _assembly_body,
        args=[(p, c, e, numbering.n_global, row_starts)
              for p, c, e in zip(numbering.pieces, constraints_per_s,
                                 elements_per_s)],
        phase=phase)
    return DistributedSystem(
        n_global=numbering.n_global, row_starts=row_starts,
        blocks=[r[0] for r in results], rhs=[r[1] for r in results],
        staged_counts=[r[2] for r in results])


def export_matrix_coo(A, path):
    """Write a sparse matrix as 1-based 'row col value' text lines."""
    coo = sp.coo_matrix(A)
    with open(path, "w", encoding="utf-8") as fh:
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r + 1} {c + 1} {float(v)!r}\n")
