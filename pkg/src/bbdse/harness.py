"""Experiment drivers: k sweeps over a ground-truth corpus and the forward
versus backward-bounded comparison on single traces."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

from .detect import Opacity, detect_all_opaque
from .formula import (ForwardExecutor, branch_condition, forward_formula,
                      forward_path_predicate, slice_at)
from .isa import COND_JUMPS
from .solver import DEFAULT_TIMEOUT, Kind, Solver
from .tracer import Trace, run

DEFAULT_KS = (2, 4, 8, 12, 16, 24, 32)


@dataclass
class SweepRow:
    k: int
    detected: int = 0
    fn: int = 0
    fp: int = 0
    timeouts: int = 0
    queries: int = 0
    solved: int = 0            # queries that reached the solver (not cached or folded)
    solver_time: float = 0.0
    predicates: int = 0        # injected opaque predicates
    genuine: int = 0           # other executed conditionals

    @property
    def avg_query(self) -> float:
        return self.solver_time / self.solved if self.solved else 0.0

    @property
    def fp_rate(self) -> float:
        return self.fp / self.genuine if self.genuine else 0.0

    def merge(self, other: "SweepRow") -> None:
        for f in ("detected", "fn", "fp", "timeouts", "queries", "solved", "solver_time",
                  "predicates", "genuine"):
            setattr(self, f, getattr(self, f) + getattr(other, f))

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["kind"] = "ksweep"
        rec["solver_time"] = round(self.solver_time, 6)
        rec["avg_query"] = round(self.avg_query, 6)
        return rec


def sample_trace(sample) -> Trace:
    return run(sample.image, sample.inputs[0])


def sweep_sample(sample, ks=DEFAULT_KS, timeout: float = DEFAULT_TIMEOUT, solver=None,
                 bound_metric: str = "steps") -> list:
    """One SweepRow per k for a single sample."""
    tr = sample_trace(sample)
    truth = {r.site for r in sample.records if r.kind == "OP"}
    own = solver is None
    solver = solver or Solver(timeout=timeout)
    rows = []
    try:
        for k in ks:
            res = detect_all_opaque(tr, k, solver, timeout, bound_metric)
            row = SweepRow(k, predicates=len(truth), genuine=len(set(res) - truth))
            for a, st in res.items():
                dead = st.status in (Opacity.OPAQUE, Opacity.LIKELY_DEAD)
                if a in truth:
                    row.detected += st.status is Opacity.OPAQUE
                    row.fn += st.status is not Opacity.OPAQUE
                elif dead:
                    row.fp += 1
                row.timeouts += st.stats.timeouts
                row.queries += st.stats.queries
                row.solved += st.stats.solved
                row.solver_time += st.stats.solver_time
            rows.append(row)
    finally:
        if own:
            solver.close()
    return rows


def _sweep_job(args):
    sample, ks, timeout, solver_path, bound_metric = args
    with Solver(solver_path, timeout) as s:
        return sweep_sample(sample, ks, timeout, s, bound_metric)


def ksweep(samples, ks=DEFAULT_KS, timeout: float = DEFAULT_TIMEOUT, solver_path=None,
           jobs: int = 1, bound_metric: str = "steps") -> list:
    """Per-k detection table over a corpus joined with its truth sidecars."""
    ks = sorted(ks)
    if any(k <= 0 for k in ks):
        raise ValueError("k values must be positive")
    totals = {k: SweepRow(k) for k in ks}
    jobs_args = [(s, ks, timeout, solver_path, bound_metric) for s in samples]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            results = list(pool.map(_sweep_job, jobs_args))
    else:
        with Solver(solver_path, timeout) as s:
            results = [sweep_sample(a[0], ks, timeout, s, bound_metric) for a in jobs_args]
    for rows in results:
        for row in rows:
            totals[row.k].merge(row)
    return [totals[k] for k in ks]


# -- forward vs backward -------------------------------------------------------

@dataclass
class DseRow:
    method: str
    sat: int = 0
    unsat: int = 0
    timeout: int = 0
    wall: float = 0.0

    def to_record(self) -> dict:
        return {"kind": "compare-dse", "method": self.method, "sat": self.sat,
                "unsat": self.unsat, "timeout": self.timeout, "wall": round(self.wall, 3)}


@dataclass
class DseComparison:
    rows: list
    verdicts: dict = field(default_factory=dict)    # method -> [(occurrence, Kind)]
    steps: int = 0


def conditional_occurrences(trace: Trace) -> list:
    return [st.index for st in trace.steps if st.instr.op in COND_JUMPS]


def _count(row: DseRow, kind: Kind) -> None:
    if kind is Kind.SAT:
        row.sat += 1
    elif kind is Kind.UNSAT:
        row.unsat += 1
    else:
        row.timeout += 1


def compare_dse(trace: Trace, k: int = 16, timeout: float = DEFAULT_TIMEOUT, solver=None,
                methods=("forward", "backward", "bbdse")) -> DseComparison:
    """Ask, at every conditional of the trace, whether the direction not taken
    is feasible, with forward DSE, unbounded backward slicing and BB-DSE."""
    own = solver is None
    solver = solver or Solver(timeout=timeout)
    occs = conditional_occurrences(trace)
    W = trace.width
    out = DseComparison([], {}, len(trace))
    try:
        for m in methods:
            name = f"bbdse k={k}" if m == "bbdse" else m
            row = DseRow(name)
            verdicts = []
            t0 = time.perf_counter()
            fwd = ForwardExecutor(trace) if m == "forward" else None
            for i in occs:
                goal = branch_condition(trace.steps[i], W, taken=not trace.steps[i].branch_taken)
                if m == "forward":
                    g, cons = fwd.query(i, goal)
                    f = forward_formula(g, cons, W, i)
                elif m == "backward":
                    f = slice_at(trace, i, goal, math.inf)
                elif m == "bbdse":
                    f = slice_at(trace, i, goal, k)
                else:
                    raise ValueError(f"unknown method {m!r}")
                v = solver.check(f)
                _count(row, v.kind)
                verdicts.append((i, v.kind))
            row.wall = time.perf_counter() - t0
            out.rows.append(row)
            out.verdicts[name] = verdicts
    finally:
        if own:
            solver.close()
    return out


def position_costs(trace: Trace, positions, k: int = 16, per_position: int = 20,
                   timeout: float = DEFAULT_TIMEOUT, solver_path=None, forward: bool = True) -> dict:
    """Average per-query wall time (slice construction plus solving, no
    cache) for the conditionals nearest each trace position.

    Returns ``{position: (bbdse_avg, forward_avg)}``; the forward figure
    checks the complete path predicate up to the conditional.
    """
    occs = conditional_occurrences(trace)
    W = trace.width
    out = {}
    # separate sessions: large forward scripts must not slow the bounded ones
    with Solver(solver_path, timeout, cache=False) as s, \
            Solver(solver_path, timeout, cache=False) as sf:
        for p in positions:
            near = sorted(occs, key=lambda i: abs(i - p))[:per_position]
            t_bb = t_fw = 0.0
            for i in near:
                goal = branch_condition(trace.steps[i], W, taken=not trace.steps[i].branch_taken)
                t0 = time.perf_counter()
                s.check(slice_at(trace, i, goal, k))
                t_bb += time.perf_counter() - t0
                if forward:
                    t0 = time.perf_counter()
                    sf.check(forward_path_predicate(trace, i, goal))
                    t_fw += time.perf_counter() - t0
            n = max(len(near), 1)
            out[p] = (t_bb / n, t_fw / n if forward else None)
    return out
