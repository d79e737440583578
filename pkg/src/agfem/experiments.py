"""Experiment driver: configs, the solve pipeline, and the study commands.

Each command appends deterministic rows to CSV files under the output
directory; wall-clock timings go to a separate timings.csv so the result
files are byte-identical across repeated runs and thread counts.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np
import scipy.sparse as sp

from . import svg
from .aggregation import aggregate_serial, aggregates
from .assembly import (assemble_distributed, assemble_serial, export_matrix_coo,
                       nitsche_tau_agg, nitsche_tau_std, poisson_elements)
from .distagg import (aggregate_parallel, build_direct_plan, build_inverse_plan,
                      compare_with_serial, import_root_data)
from .distspace import (build_constraints_distributed, distributed_row_permutation,
                        number_dofs_distributed, root_cell_data_provider)
from .fespace import build_std_space, build_constraints_serial, classify_dofs
from .geometry import classify_cells, cut_quadrature, face_is_active
from .grid import unit_box_grid
from .levelset import HalfPlane, Popcorn, Sphere
from .partition import partition_weighted_sfc, build_subdomain_meshes
from .runtime import VirtualRuntime
from .solve import condition_estimate, error_norms, pcg_jacobi

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_EQUIVALENCE = 4

RECORD_SCHEMA_VERSION = 1

GEOMETRIES = ("circle", "offset-circle", "halfplane", "popcorn")
SPACES = ("agg", "std")
SOLUTIONS = ("linear", "sine")
DUMPS = ("aggregates", "constraints", "matrix")

OFFSET_CIRCLE_CENTER = (0.531, 0.472, 0.515)


class ConfigError(ValueError):
    """Bad experiment configuration."""


class EquivalenceError(RuntimeError):
    """A serial/parallel equivalence check failed."""


@dataclass
class ExperimentConfig:
    geometry: str = "circle"
    dimension: int = 2
    level: int = 4
    space: str = "agg"
    beta: float = 10.0
    rtol: float = 1e-6
    maxit: int = 500
    procs: int = 1
    weight: float = 10.0
    out: str = "."
    seed: int = 0
    threads: int = 1
    dump: tuple = ()
    solution: str = "linear"
    quad_order: int = 4
    trace: int = 0
    radius: float = 0.3
    center: tuple = (0.5, 0.5)
    normal: tuple = (1.0, 0.0)
    offset: float = 0.503

    def validate(self):
        if self.geometry not in GEOMETRIES:
            raise ConfigError(f"unknown geometry {self.geometry!r}")
        if self.space not in SPACES:
            raise ConfigError(f"unknown space {self.space!r}")
        if self.solution not in SOLUTIONS:
            raise ConfigError(f"unknown solution {self.solution!r}")
        if self.dimension not in (2, 3):
            raise ConfigError("dimension must be 2 or 3")
        if self.geometry == "popcorn" and self.dimension != 3:
            raise ConfigError("the popcorn geometry is three-dimensional")
        if self.level < 1:
            raise ConfigError("level must be >= 1")
        for name in ("beta", "rtol", "weight", "radius"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("maxit", "procs", "threads", "quad_order"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        for d in self.dump:
            if d not in DUMPS:
                raise ConfigError(f"unknown dump target {d!r}")
        if self.space == "std" and self.procs > 1:
            raise ConfigError("the standard space runs serially (procs = 1)")
        return self


_TUPLE_FIELDS = {"center": float, "normal": float}


def _parse_value(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown config key {name!r}")
    raw = raw.strip()
    if name == "dump":
        return tuple(v.strip() for v in raw.split(",") if v.strip())
    if name in _TUPLE_FIELDS:
        return tuple(float(v) for v in raw.split(","))
    if name in ("geometry", "space", "out", "solution"):
        return raw
    if name in ("dimension", "level", "maxit", "procs", "seed", "threads",
                "quad_order", "trace"):
        return int(raw)
    return float(raw)


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Flat ``key = value`` file plus command-line overrides."""
    values = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
                key, raw = line.split("=", 1)
                values[key.strip()] = _parse_value(key.strip(), raw)
    for key, raw in (overrides or {}).items():
        if raw is None:
            continue
        values[key] = raw if not isinstance(raw, str) else _parse_value(key, raw)
    try:
        cfg = ExperimentConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg.validate()


def make_levelset(cfg: ExperimentConfig):
    d = cfg.dimension
    if cfg.geometry == "circle":
        center = (tuple(cfg.center) + (0.5,) * 3)[:d]
        return Sphere(center, cfg.radius)
    if cfg.geometry == "offset-circle":
        return Sphere(OFFSET_CIRCLE_CENTER[:d], cfg.radius)
    if cfg.geometry == "halfplane":
        normal = (tuple(cfg.normal) + (0.0,) * 3)[:d]
        return HalfPlane(normal, cfg.offset)
    return Popcorn()


def manufactured_solution(cfg: ExperimentConfig):
    """Exact solution with its gradient and Poisson source term."""
    d = cfg.dimension
    if cfg.solution == "linear":
        def u(p):
            return np.sum(np.atleast_2d(p), axis=1)

        def grad(p):
            return np.ones_like(np.atleast_2d(p))

        return u, grad, None
    pi = np.pi

    def u(p):
        p = np.atleast_2d(p)
        out = np.ones(p.shape[0])
        for a in range(d):
            out = out * np.sin(pi * p[:, a])
        return out

    def grad(p):
        p = np.atleast_2d(p)
        out = np.empty_like(p)
        for c in range(d):
            comp = np.full(p.shape[0], pi)
            for a in range(d):
                comp = comp * (np.cos(pi * p[:, a]) if a == c
                               else np.sin(pi * p[:, a]))
            out[:, c] = comp
        return out

    def f(p):
        return d * pi**2 * u(p)

    return u, grad, f


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class PhaseTimer:
    timings: dict = field(default_factory=dict)

    def time(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.timings[name] = timer.timings.get(name, 0.0) + \
                    time.perf_counter() - self.t0

        return _Ctx()


@dataclass
class SolveOutputs:
    """Everything a solve run produced, for records, dumps, and checks."""

    cfg: ExperimentConfig
    grid: object
    levelset: object
    classification: object
    root_map: object
    aggregate_stats: object
    space: object
    dofs: object
    constraints: object
    quads: list
    taus: np.ndarray
    matrix: object
    rhs: np.ndarray
    solution: np.ndarray          # serial reduced numbering
    report: object
    norms: object
    timings: dict
    runtime: VirtualRuntime | None = None
    meshes: list | None = None
    dist_map: object = None
    numbering: object = None
    dist_constraints: list | None = None
    dist_system: object = None
    dist_solution: np.ndarray | None = None
    dist_report: object = None
    row_permutation: np.ndarray | None = None


def geometry_setup(cfg: ExperimentConfig, level=None):
    grid = unit_box_grid(level if level is not None else cfg.level,
                         cfg.dimension)
    ls = make_levelset(cfg)
    cls = classify_cells(grid, ls)

    def face_active(ka, kb):
        return face_is_active(grid, ls, cls.lattice_of(ka), cls.lattice_of(kb))

    return grid, ls, cls, face_active


def cell_quadratures(grid, ls, cls, order):
    return [cut_quadrature(grid, ls, cls.lattice_of(k), order)
            for k in range(1, cls.n_active + 1)]


def penalty_per_cell(cfg, space, cls, quads):
    """Per-cell Nitsche penalty: beta/h for agg, eigenproblem for std."""
    h = float(np.min(cls.grid.h))
    taus = np.zeros(cls.n_active)
    if cfg.space == "agg":
        taus[:] = nitsche_tau_agg(h, cfg.beta)
        return taus
    for k in cls.cut_ids:
        k = int(k)
        if quads[k - 1].has_boundary:
            taus[k - 1] = nitsche_tau_std(space, k, quads[k - 1], cfg.beta)
    return taus


def run_solve_pipeline(cfg: ExperimentConfig, level=None) -> SolveOutputs:
    """classify -> aggregate -> spaces/constraints -> assemble -> solve -> norms."""
    timer = PhaseTimer()
    with timer.time("classify"):
        grid, ls, cls, face_active = geometry_setup(cfg, level)
        quads = cell_quadratures(grid, ls, cls, cfg.quad_order)

    root_map = None
    agg_stats = None
    constraints = None
    with timer.time("aggregate"):
        if cfg.space == "agg":
            root_map = aggregate_serial(cls, face_active)
            agg_stats = aggregates(cls, root_map, face_active)
    with timer.time("space"):
        space = build_std_space(cls, 1)
        dofs = classify_dofs(space, cls, root_map)
        if cfg.space == "agg":
            constraints = build_constraints_serial(space, dofs, root_map)
        taus = penalty_per_cell(cfg, space, cls, quads)
    u, grad_u, f = manufactured_solution(cfg)
    with timer.time("assemble"):
        elements = poisson_elements(space, quads, taus, f, u)
        if cfg.space == "agg":
            A, b = assemble_serial(space, dofs, constraints, elements)
        else:
            A, b = assemble_serial(space, None, None, elements)

    out = SolveOutputs(cfg=cfg, grid=grid, levelset=ls, classification=cls,
                       root_map=root_map, aggregate_stats=agg_stats,
                       space=space, dofs=dofs, constraints=constraints,
                       quads=quads, taus=taus, matrix=A, rhs=b,
                       solution=None, report=None, norms=None,
                       timings=timer.timings)

    if cfg.procs == 1:
        with timer.time("solve"):
            x, report = pcg_jacobi((A, b), rtol=cfg.rtol, maxit=cfg.maxit)
        out.solution, out.report = x, report
    else:
        _distributed_stage(cfg, out, elements, timer)
    with timer.time("norms"):
        if cfg.space == "agg":
            out.norms = error_norms(space, dofs, constraints, quads,
                                    out.solution, u, grad_u)
        else:
            out.norms = error_norms(space, None, None, quads, out.solution,
                                    u, grad_u)
    return out


def _distributed_stage(cfg, out: SolveOutputs, elements, timer, runtime=None):
    """Parallel aggregation, numbering, assembly, and solve for procs > 1."""
    cls = out.classification
    grid = out.grid
    ls = out.levelset

    def face_active(ka, kb):
        return face_is_active(grid, ls, cls.lattice_of(ka), cls.lattice_of(kb))

    with timer.time("partition"):
        part = partition_weighted_sfc(cls, n_subdomains=cfg.procs)
        meshes = build_subdomain_meshes(cls, part)
    if runtime is None:
        runtime = VirtualRuntime(cfg.procs, threads=cfg.threads,
                                 trace=bool(cfg.trace))
    with timer.time("aggregate-parallel"):
        dist_map = aggregate_parallel(runtime, meshes, face_active)
    with timer.time("plans"):
        direct = [build_direct_plan(m, dist_map) for m in meshes]
        inverse = build_inverse_plan(runtime, meshes, dist_map)
    with timer.time("numbering"):
        numbering = number_dofs_distributed(runtime, meshes, 1)
    with timer.time("import"):
        buffers = import_root_data(runtime, meshes, direct, inverse,
                                   root_cell_data_provider(numbering))
    with timer.time("constraints"):
        dist_cons = [build_constraints_distributed(p, dist_map, bf)
                     for p, bf in zip(numbering.pieces, buffers)]
    with timer.time("assemble-distributed"):
        elements_per_s = [[elements[m.global_of(l) - 1]
                           for l in range(1, m.n_local + 1)] for m in meshes]
        system = assemble_distributed(runtime, numbering, dist_cons,
                                      elements_per_s)
    with timer.time("solve"):
        x_d, report = pcg_jacobi(system, rtol=cfg.rtol, maxit=cfg.maxit,
                                 runtime=runtime)
    perm = distributed_row_permutation(numbering, out.space, out.dofs)
    x_serial = np.zeros_like(x_d)
    x_serial[perm] = x_d
    out.runtime = runtime
    out.meshes = meshes
    out.dist_map = dist_map
    out.numbering = numbering
    out.dist_constraints = dist_cons
    out.dist_system = system
    out.dist_solution = x_d
    out.dist_report = report
    out.row_permutation = perm
    out.solution = x_serial
    out.report = report


# ---------------------------------------------------------------------------
# records and CSV output


RECORD_FIELDS = [
    "schema_version", "command", "geometry", "dimension", "level", "space",
    "beta", "rtol", "maxit", "procs", "weight", "seed", "threads", "solution",
    "n_cells", "n_active", "n_cut", "n_interior_dofs", "agg_rounds",
    "max_aggregate", "assembly_checksum", "iterations", "converged",
    "kappa_est", "rel_l2", "rel_h1",
]


def make_run_record(cfg: ExperimentConfig, out: SolveOutputs,
                    command: str = "solve") -> dict:
    if out.dist_system is not None:
        A, b = out.dist_system.gather()
    else:
        A, b = sp.csr_matrix(out.matrix), out.rhs
    checksum = float(np.sum(A.data**2) + np.sum(b**2))
    n = A.shape[0]
    try:
        # near-degenerate standard-space cuts can defeat the recurrence;
        # the record then reports nan instead of failing the run
        kappa = condition_estimate(A, "lanczos", maxit=min(n, 300)) if n \
            else float("nan")
    except (ValueError, FloatingPointError):
        kappa = float("nan")
    return {
        "schema_version": RECORD_SCHEMA_VERSION,
        "command": command,
        "geometry": cfg.geometry,
        "dimension": cfg.dimension,
        "level": cfg.level,
        "space": cfg.space,
        "beta": repr(cfg.beta),
        "rtol": repr(cfg.rtol),
        "maxit": cfg.maxit,
        "procs": cfg.procs,
        "weight": repr(cfg.weight),
        "seed": cfg.seed,
        "threads": cfg.threads,
        "solution": cfg.solution,
        "n_cells": out.grid.n_cells,
        "n_active": out.classification.n_active,
        "n_cut": int(out.classification.cut_ids.size),
        "n_interior_dofs": out.dofs.n_interior,
        "agg_rounds": out.root_map.rounds if out.root_map is not None else "",
        "max_aggregate": (out.aggregate_stats.max_size
                          if out.aggregate_stats is not None else ""),
        "assembly_checksum": repr(checksum),
        "iterations": out.report.iterations,
        "converged": out.report.converged,
        "kappa_est": repr(float(kappa)),
        "rel_l2": repr(float(out.norms.l2)),
        "rel_h1": repr(float(out.norms.h1_semi)),
    }


def append_csv(path, fieldnames, rows):
    new = not os.path.exists(path)
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        if new:
            writer.writeheader()
        writer.writerows(rows)


def write_timings(out_dir, command, cfg, timings):
    rows = [{"command": command, "geometry": cfg.geometry, "level": cfg.level,
             "procs": cfg.procs, "phase": k, "seconds": f"{v:.6f}"}
            for k, v in timings.items()]
    append_csv(os.path.join(out_dir, "timings.csv"),
               ["command", "geometry", "level", "procs", "phase", "seconds"],
               rows)


def _write_dumps(cfg, out: SolveOutputs, out_dir):
    if "aggregates" in cfg.dump and out.root_map is not None:
        rows = [{"cell_id": k, "root_id": out.root_map.root_of(k),
                 "next_id": out.root_map.next_of(k)}
                for k in range(1, out.classification.n_active + 1)]
        append_csv(os.path.join(out_dir, "aggregates.csv"),
                   ["cell_id", "root_id", "next_id"], rows)
        if out.meshes is not None:
            rows = []
            for mesh in out.meshes:
                for l in range(1, mesh.n_relevant + 1):
                    rows.append({
                        "subdomain": mesh.s, "local_id": l,
                        "global_id": mesh.global_of(l),
                        "root_id": out.dist_map.root_of(mesh.s, l),
                        "root_owner": out.dist_map.owner_of(mesh.s, l),
                        "next_id": out.dist_map.next_of(mesh.s, l)})
            append_csv(os.path.join(out_dir, "aggregates_dist.csv"),
                       ["subdomain", "local_id", "global_id", "root_id",
                        "root_owner", "next_id"], rows)
            prows = [{"cell_id": k + 1, "owner": int(o)} for k, o in
                     enumerate(_owner_vector(out.meshes, out.classification))]
            append_csv(os.path.join(out_dir, "partition.csv"),
                       ["cell_id", "owner"], prows)
    if "constraints" in cfg.dump and out.constraints is not None:
        rows = []
        for i, dof in enumerate(out.constraints.constrained):
            rows.append({
                "constrained": int(dof),
                "masters": ";".join(str(int(m)) for m in out.constraints.masters[i]),
                "coeffs": ";".join(repr(float(c)) for c in out.constraints.coeffs[i])})
        append_csv(os.path.join(out_dir, "constraints.csv"),
                   ["constrained", "masters", "coeffs"], rows)
    if "matrix" in cfg.dump:
        A = out.matrix if out.dist_system is None else out.dist_system.gather()[0]
        export_matrix_coo(A, os.path.join(out_dir, "matrix.txt"))
        rows = [{"iteration": i + 1, "relative_residual": repr(float(r))}
                for i, r in enumerate(out.report.residual_history)]
        append_csv(os.path.join(out_dir, "solve_report.csv"),
                   ["iteration", "relative_residual"], rows)


def _owner_vector(meshes, cls):
    owner = np.zeros(cls.n_active, dtype=np.int64)
    for mesh in meshes:
        for l in range(1, mesh.n_local + 1):
            owner[mesh.global_of(l) - 1] = mesh.s
    return owner


def cmd_solve(cfg: ExperimentConfig) -> dict:
    """Full pipeline run; appends one row to runs.csv."""
    out_dir = cfg.out
    os.makedirs(out_dir, exist_ok=True)
    outputs = run_solve_pipeline(cfg)
    record = make_run_record(cfg, outputs)
    append_csv(os.path.join(out_dir, "runs.csv"), RECORD_FIELDS, [record])
    write_timings(out_dir, "solve", cfg, outputs.timings)
    _write_dumps(cfg, outputs, out_dir)
    if cfg.trace and outputs.runtime is not None and outputs.runtime.trace:
        rows = [{"phase": t.phase, "superstep": t.superstep, "kind": t.kind,
                 "src": t.src, "dst": t.dst, "bytes": t.n_bytes}
                for t in outputs.runtime.trace]
        append_csv(os.path.join(out_dir, "trace.csv"),
                   ["phase", "superstep", "kind", "src", "dst", "bytes"], rows)
    return record


# ---------------------------------------------------------------------------
# cut sweep


DEFAULT_SWEEP = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8)


def run_cut_sweep(cfg: ExperimentConfig, offsets=DEFAULT_SWEEP):
    """Condition numbers of both spaces as a cut slides across a cell face.

    The half-plane boundary sits at ``offset + delta * h`` for each delta
    in ``offsets``, so the cut cells keep a volume fraction of delta.
    """
    if cfg.geometry not in ("halfplane", "circle"):
        raise ConfigError("cut sweep needs the halfplane or circle geometry")
    h = 0.5**cfg.level
    rows = []
    for delta in offsets:
        results = {}
        for space_kind in ("agg", "std"):
            sub = replace(cfg, space=space_kind, procs=1,
                          offset=cfg.offset + delta * h,
                          radius=cfg.radius + delta * h)
            out = run_solve_pipeline(sub)
            A = sp.csr_matrix(out.matrix)
            kappa = condition_estimate(A, "dense")
            results[space_kind] = (kappa, out.report)
        rows.append({
            "delta": repr(float(delta)),
            "kappa_agg": repr(results["agg"][0]),
            "kappa_std": repr(results["std"][0]),
            "iters_agg": results["agg"][1].iterations,
            "iters_std": results["std"][1].iterations,
            "converged_std": results["std"][1].converged,
        })
    return rows


def cmd_cut_sweep(cfg: ExperimentConfig, offsets=DEFAULT_SWEEP):
    os.makedirs(cfg.out, exist_ok=True)
    rows = run_cut_sweep(cfg, offsets)
    path = os.path.join(cfg.out, "cut_sweep.csv")
    append_csv(path, ["delta", "kappa_agg", "kappa_std", "iters_agg",
                      "iters_std", "converged_std"], rows)
    deltas = [float(r["delta"]) for r in rows]
    svg.line_chart(
        os.path.join(cfg.out, "cut_sweep.svg"),
        [("agg", deltas, [float(r["kappa_agg"]) for r in rows]),
         ("std", deltas, [float(r["kappa_std"]) for r in rows])],
        xlabel="cut offset (fraction of h)", ylabel="condition number",
        logx=True, logy=True, title="conditioning vs cut offset")
    return rows


# ---------------------------------------------------------------------------
# parallel check


def _constraint_key_view_serial(space, dofs, constraints):
    view = {}
    for i, dof in enumerate(constraints.constrained):
        key = tuple(int(v) for v in space.node_keys[dof - 1])
        masters = [tuple(int(v) for v in
                         space.node_keys[dofs.interior_ids[row - 1] - 1])
                   for row in constraints.masters[i]]
        view[key] = (masters, constraints.coeffs[i])
    return view


def _constraint_key_view_dist(numbering, dist_constraints):
    gid_key = {}
    for piece in numbering.pieces:
        for key, gid in piece.gid_of_key.items():
            gid_key[gid] = key
    view = {}
    for piece, cons in zip(numbering.pieces, dist_constraints):
        for i, j in enumerate(cons.constrained):
            key = tuple(int(v) for v in piece.node_keys[j - 1])
            masters = [gid_key[int(g)] for g in cons.masters[i]]
            view.setdefault(key, []).append((piece.s, masters, cons.coeffs[i]))
    return view


def run_parallel_check(cfg: ExperimentConfig, procs_list,
                       runtime_factory=None) -> dict:
    """Assert serial/parallel equality of aggregates, constraints, systems,
    and solver histories; raises EquivalenceError with the first diff."""
    base = replace(cfg, procs=1, space="agg")
    serial = run_solve_pipeline(base)
    A_s = sp.csr_matrix(serial.matrix)
    serial_cons_view = _constraint_key_view_serial(
        serial.space, serial.dofs, serial.constraints)
    checked = {"procs": [], "aggregate_cells": 0, "constrained_dofs": 0}
    for P in procs_list:
        if P == 1:
            checked["procs"].append(1)
            continue
        sub = replace(cfg, procs=P, space="agg")
        if runtime_factory is None:
            out = run_solve_pipeline(sub)
        else:
            out = _run_with_runtime(sub, runtime_factory(P))
        mismatch = compare_with_serial(out.meshes, out.dist_map, serial.root_map)
        if mismatch is not None:
            s, g, want, got = mismatch
            raise EquivalenceError(
                f"P={P}: aggregation differs at cell {g} (subdomain {s}): "
                f"serial root {want}, parallel root {got}")
        checked["aggregate_cells"] += serial.classification.n_active

        dist_view = _constraint_key_view_dist(out.numbering,
                                              out.dist_constraints)
        if set(dist_view) != set(serial_cons_view):
            extra = set(dist_view) ^ set(serial_cons_view)
            raise EquivalenceError(
                f"P={P}: constrained DOF sets differ at node keys {sorted(extra)[:3]}")
        for key, (masters_s, coeffs_s) in serial_cons_view.items():
            pairs_s = sorted(zip(masters_s, coeffs_s))
            for (s_id, masters_d, coeffs_d) in dist_view[key]:
                pairs_d = sorted(zip(masters_d, coeffs_d))
                if [m for m, _ in pairs_s] != [m for m, _ in pairs_d]:
                    raise EquivalenceError(
                        f"P={P}: master sets differ for node {key} "
                        f"(subdomain {s_id})")
                dev = max(abs(a - b) for (_, a), (_, b) in zip(pairs_s, pairs_d))
                if dev > 1e-13:
                    raise EquivalenceError(
                        f"P={P}: constraint coefficients differ for node {key}")
        checked["constrained_dofs"] += len(serial_cons_view)

        A_d, b_d = out.dist_system.gather()
        perm = out.row_permutation
        pm = sp.csr_matrix((np.ones(perm.size), (perm, np.arange(perm.size))),
                           shape=(perm.size, perm.size))
        A_cmp = pm @ A_d @ pm.T
        b_cmp = pm @ b_d
        diff = sp.csr_matrix(A_cmp - A_s)
        if diff.nnz and np.max(np.abs(diff.data)) > 1e-12:
            idx = int(np.argmax(np.abs(diff.data)))
            row = np.searchsorted(diff.indptr, idx, side="right") - 1
            raise EquivalenceError(
                f"P={P}: assembled matrices differ by "
                f"{np.max(np.abs(diff.data)):.3e} at row {row + 1}")
        if np.max(np.abs(b_cmp - serial.rhs)) > 1e-12:
            row = int(np.argmax(np.abs(b_cmp - serial.rhs)))
            raise EquivalenceError(
                f"P={P}: assembled vectors differ at row {row + 1}")

        h_s = np.asarray(serial.report.residual_history)
        h_d = np.asarray(out.report.residual_history)
        if serial.report.iterations != out.report.iterations or \
                not np.allclose(h_s, h_d, rtol=0.0, atol=1e-10):
            raise EquivalenceError(
                f"P={P}: solver histories differ "
                f"({serial.report.iterations} vs {out.report.iterations} iterations)")
        checked["procs"].append(P)
    return checked


def _run_with_runtime(cfg, runtime):
    """Pipeline variant with an injected runtime (test instrumentation)."""
    inner = run_solve_pipeline(replace(cfg, procs=1))
    inner.cfg = cfg
    u, _, f = manufactured_solution(cfg)
    elements = poisson_elements(inner.space, inner.quads, inner.taus, f, u)
    _distributed_stage(cfg, inner, elements, PhaseTimer(), runtime)
    return inner


def cmd_parallel_check(cfg: ExperimentConfig, procs_list) -> dict:
    os.makedirs(cfg.out, exist_ok=True)
    result = run_parallel_check(cfg, procs_list)
    rows = [{"geometry": cfg.geometry, "level": cfg.level,
             "procs": ",".join(str(p) for p in result["procs"]),
             "status": "pass"}]
    append_csv(os.path.join(cfg.out, "parallel_check.csv"),
               ["geometry", "level", "procs", "status"], rows)
    return result


# ---------------------------------------------------------------------------
# convergence study


def fit_order(hs, errs):
    """Least-squares slope of log(err) against log(h)."""
    hs = np.asarray(hs, dtype=float)
    errs = np.asarray(errs, dtype=float)
    if hs.size < 2 or np.any(errs <= 0):
        return None
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    return float(slope)


def run_convergence(cfg: ExperimentConfig, levels):
    rows = []
    for level in levels:
        out = run_solve_pipeline(replace(cfg, level=level))
        rows.append({
            "level": level,
            "h": repr(float(np.min(out.grid.h))),
            "n_interior_dofs": out.dofs.n_interior,
            "iterations": out.report.iterations,
            "rel_l2": repr(float(out.norms.l2)),
            "rel_h1": repr(float(out.norms.h1_semi)),
        })
    hs = [float(r["h"]) for r in rows]
    l2s = [float(r["rel_l2"]) for r in rows]
    h1s = [float(r["rel_h1"]) for r in rows]
    floored = cfg.solution == "linear"
    orders = {
        "l2_order": "" if floored or len(rows) < 2 else repr(fit_order(hs, l2s)),
        "h1_order": "" if floored or len(rows) < 2 else repr(fit_order(hs, h1s)),
        "solver_floor": floored,
    }
    return rows, orders


def cmd_convergence(cfg: ExperimentConfig, levels):
    os.makedirs(cfg.out, exist_ok=True)
    rows, orders = run_convergence(cfg, levels)
    for row in rows:
        row.update(orders)
    fieldnames = ["level", "h", "n_interior_dofs", "iterations", "rel_l2",
                  "rel_h1", "l2_order", "h1_order", "solver_floor"]
    append_csv(os.path.join(cfg.out, "convergence.csv"), fieldnames, rows)
    hs = [float(r["h"]) for r in rows]
    svg.line_chart(
        os.path.join(cfg.out, "convergence.svg"),
        [("rel L2", hs, [float(r["rel_l2"]) for r in rows]),
         ("rel H1-semi", hs, [float(r["rel_h1"]) for r in rows])],
        xlabel="h", ylabel="relative error", logx=True, logy=True,
        title="error vs cell size")
    return rows, orders


# ---------------------------------------------------------------------------
# weight study


def run_weight_study(cfg: ExperimentConfig, weights):
    if cfg.procs < 2:
        raise ConfigError("the weight study needs procs >= 2")
    grid, ls, cls, _ = geometry_setup(cfg)
    rows = []
    for w in weights:
        part = partition_weighted_sfc(
            cls, weights=np.full(cls.n_active, float(w)),
            n_subdomains=cfg.procs, include_exterior=True, exterior_weight=1.0)
        active_counts = np.bincount(part.owner_of_active,
                                    minlength=cfg.procs + 1)[1:]
        total_counts = np.bincount(part.owner_of_background,
                                   minlength=cfg.procs + 1)[1:]
        rows.append({
            "weight": repr(float(w)),
            "max_active": int(active_counts.max()),
            "min_active": int(active_counts.min()),
            "max_total": int(total_counts.max()),
            "min_total": int(total_counts.min()),
        })
    return rows


def cmd_weight_study(cfg: ExperimentConfig, weights):
    os.makedirs(cfg.out, exist_ok=True)
    rows = run_weight_study(cfg, weights)
    append_csv(os.path.join(cfg.out, "weight_study.csv"),
               ["weight", "max_active", "min_active", "max_total", "min_total"],
               rows)
    ws = [float(r["weight"]) for r in rows]
    svg.line_chart(
        os.path.join(cfg.out, "weight_study.svg"),
        [("max active", ws, [r["max_active"] for r in rows]),
         ("min active", ws, [r["min_active"] for r in rows]),
         ("max total", ws, [r["max_total"] for r in rows])],
        xlabel="active-cell weight", ylabel="cells per subdomain", logx=True,
        title="partition balance vs weight")
    return rows
