"""Infeasibility analyses: opaque predicates, call stack tampering, opaque
constants, jump closure and conditional self-modification."""

from __future__ import annotations

import enum
import json
import math
import time
from dataclasses import dataclass, field
from typing import Optional

from . import terms as T
from .formula import (SliceFormula, branch_condition, inline_goal, mem_word_at, reg_at,
                      slice_at, readonly_tables)
from .isa import COND_JUMPS, SP, Op, reg_name
from .solver import Kind, Solver, Verdict
from .tracer import Trace, branch_coverage

K_MAX = 10_000
PAIR_SLACK = 16


class Opacity(str, enum.Enum):
    COVERED = "COVERED"
    GENUINE = "GENUINE"
    OPAQUE = "OPAQUE"
    LIKELY_DEAD = "LIKELY_DEAD"
    UNKNOWN = "UNKNOWN"

    def __str__(self):
        return self.value


class Integrity(str, enum.Enum):
    GENUINE = "GENUINE"
    VIOLATED = "VIOLATED"
    UNKNOWN = "UNKNOWN"

    def __str__(self):
        return self.value


class Alignment(str, enum.Enum):
    ALIGNED = "ALIGNED"
    DISALIGNED = "DISALIGNED"
    UNKNOWN = "UNKNOWN"

    def __str__(self):
        return self.value


class Multiplicity(str, enum.Enum):
    SINGLE = "SINGLE"
    MULTIPLE = "MULTIPLE"
    UNKNOWN = "UNKNOWN"

    def __str__(self):
        return self.value


@dataclass
class QueryStats:
    queries: int = 0
    solver_time: float = 0.0
    timeouts: int = 0
    solved: int = 0                     # answered by the solver, not cache or folding
    times: list = field(default_factory=list)

    def add(self, v: Verdict):
        self.queries += 1
        self.solver_time += v.elapsed
        self.times.append(v.elapsed)
        if not v.cached and "folds" not in (v.reason or ""):
            self.solved += 1
        if v.kind is Kind.TIMEOUT:
            self.timeouts += 1


@dataclass
class OpacityStatus:
    addr: int
    status: Opacity
    branch: Optional[str] = None        # dead direction for OPAQUE: taken|fallthrough
    per_occurrence: list = field(default_factory=list)   # (occurrence, Kind)
    stats: QueryStats = field(default_factory=QueryStats)
    k: float = 0

    def to_record(self) -> dict:
        return {"kind": "opaque", "addr": self.addr, "label": str(self.status),
                "branch": self.branch, "k": None if self.k == math.inf else self.k,
                "occurrences": [[o, str(v)] for o, v in self.per_occurrence],
                "queries": self.stats.queries, "solver_time": round(self.stats.solver_time, 6),
                "timeouts": self.stats.timeouts}


def _solver(solver, timeout):
    return solver if solver is not None else Solver(timeout=timeout)


def _ask(solver, f: SliceFormula, stats: QueryStats | None) -> Verdict:
    v = solver.check(f)
    if stats is not None:
        stats.add(v)
    return v


def _decide(trace: Trace, occurrence: int, goal: T.Term, k, tables, solver,
            stats: QueryStats | None) -> Verdict:
    """Answer from the inlined goal when it folds to a constant (the common
    case for return-address and stack-pointer checks over long call spans),
    otherwise build the full slice and ask the solver."""
    g = inline_goal(trace, occurrence, goal, k, tables)
    if g.is_const:
        v = Verdict(Kind.SAT if g.value else Kind.UNSAT, reason="goal folds to a constant")
        if stats is not None:
            stats.add(v)
        return v
    return _ask(solver, slice_at(trace, occurrence, goal, k, tables=tables), stats)


def conditional_sites(trace: Trace) -> list:
    """Addresses of conditional jumps executed in ``trace`` (first-seen order)."""
    seen = {}
    for st in trace.steps:
        if st.instr.op in COND_JUMPS and st.addr not in seen:
            seen[st.addr] = True
    return list(seen)


def detect_opaque(trace: Trace, addr: int, k=16, solver=None, timeout: float = 5.0,
                  bound_metric: str = "steps", coverage=None, occurrences=None) -> OpacityStatus:
    """Classify the conditional jump at ``addr``."""
    cov = (coverage if coverage is not None else branch_coverage(trace)).get(addr)
    if cov is None:
        raise ValueError(f"no conditional jump executed at {addr:#x}")
    out = OpacityStatus(addr, Opacity.UNKNOWN, k=k)
    if cov.taken_seen and cov.fallthrough_seen:
        out.status = Opacity.COVERED
        return out
    solver = _solver(solver, timeout)
    observed_taken = cov.taken_seen
    occ = occurrences if occurrences is not None else trace.occurrences(addr)
    W = trace.width
    tables = readonly_tables(trace)

    def query(i, taken):
        goal = branch_condition(trace.steps[i], W, taken=taken)
        f = slice_at(trace, i, goal, k, bound_metric, tables)
        return _ask(solver, f, out.stats)

    undecided = False
    for i in occ:
        v = query(i, not observed_taken)
        out.per_occurrence.append((i, v.kind))
        if v.kind is Kind.SAT:
            out.status = Opacity.GENUINE
            return out
        if v.kind is not Kind.UNSAT:
            undecided = True
    if undecided:
        out.status = Opacity.UNKNOWN
        return out
    # every occurrence refuses the unobserved direction; check the other one
    for i in occ:
        v = query(i, observed_taken)
        if v.kind is not Kind.UNSAT:
            out.status = Opacity.OPAQUE
            out.branch = "fallthrough" if observed_taken else "taken"
            return out
    out.status = Opacity.LIKELY_DEAD
    out.branch = "both"
    return out


def detect_all_opaque(trace: Trace, k=16, solver=None, timeout: float = 5.0,
                      bound_metric: str = "steps", addrs=None) -> dict:
    cov = branch_coverage(trace)
    solver = _solver(solver, timeout)
    addrs = conditional_sites(trace) if addrs is None else addrs
    index: dict[int, list] = {}
    for st in trace.steps:
        if st.addr in cov:
            index.setdefault(st.addr, []).append(st.index)
    return {a: detect_opaque(trace, a, k, solver, timeout, bound_metric, cov, index.get(a, []))
            for a in addrs}


# -- call stack tampering -----------------------------------------------------

@dataclass
class TamperingLabel:
    integrity: Integrity = Integrity.UNKNOWN
    alignment: Alignment = Alignment.UNKNOWN
    multiplicity: Multiplicity = Multiplicity.UNKNOWN

    def __str__(self):
        return f"{self.integrity}+{self.alignment}+{self.multiplicity}"


@dataclass
class RetOccurrence:
    index: int
    call_index: Optional[int]
    matched: bool               # call found by stack slot
    return_site: Optional[int]
    target: int
    integrity: Integrity = Integrity.UNKNOWN
    alignment: Alignment = Alignment.UNKNOWN
    multiplicity: Multiplicity = Multiplicity.UNKNOWN


@dataclass
class RetReport:
    addr: int
    label: TamperingLabel
    occurrences: list = field(default_factory=list)
    targets: set = field(default_factory=set)
    stats: QueryStats = field(default_factory=QueryStats)

    def to_record(self) -> dict:
        return {"kind": "ret", "addr": self.addr, "label": str(self.label),
                "integrity": str(self.label.integrity), "alignment": str(self.label.alignment),
                "multiplicity": str(self.label.multiplicity),
                "targets": sorted(self.targets),
                "occurrences": [[o.index, o.call_index, str(o.integrity), str(o.alignment),
                                 str(o.multiplicity)] for o in self.occurrences],
                "queries": self.stats.queries, "solver_time": round(self.stats.solver_time, 6)}


def match_calls(trace: Trace) -> list:
    """Walk the trace with a formal call stack.

    Returns one RetOccurrence per executed RET.  A ret is matched to the call
    whose return-address slot it pops; entries above it are discarded.  A ret
    popping any other slot is compared against the innermost pending call
    without popping it.
    """
    wb = trace.width // 8
    stack: list = []   # (call index, slot, return site)
    out = []
    for st in trace.steps:
        op = st.instr.op
        if op is Op.CALL or op is Op.CALLR:
            stack.append((st.index, st.effective_addrs[0], st.next_addr))
        elif op is Op.RET:
            slot = st.effective_addrs[0]
            pos = next((p for p in range(len(stack) - 1, -1, -1) if stack[p][1] == slot), None)
            if pos is not None:
                call_i, _, site = stack[pos]
                del stack[pos:]
                out.append(RetOccurrence(st.index, call_i, True, site, st.jump_target))
            elif stack:
                call_i, _, site = stack[-1]
                out.append(RetOccurrence(st.index, call_i, False, site, st.jump_target))
            else:
                out.append(RetOccurrence(st.index, None, False, None, st.jump_target))
    return out


def classify_rets(trace: Trace, k_max: int = K_MAX, solver=None, timeout: float = 5.0) -> dict:
    """Tampering labels per static RET address."""
    solver = _solver(solver, timeout)
    W = trace.width
    wb = W // 8
    tables = readonly_tables(trace)
    reports: dict[int, RetReport] = {}
    for occ in match_calls(trace):
        st = trace.steps[occ.index]
        rep = reports.setdefault(st.addr, RetReport(st.addr, TamperingLabel()))
        rep.occurrences.append(occ)
        rep.targets.add(occ.target)
        if occ.call_index is None:
            continue
        call = trace.steps[occ.call_index]
        d = occ.index - occ.call_index
        # a few steps before the call so a value pushed for the ret is in view
        k = d + PAIR_SLACK
        slot = st.effective_addrs[0]
        sp_before_call = trace.value_before(reg_name(SP), call.index)
        sp_after_ret = (st.effective_addrs[0] + wb) % (1 << W)
        # dynamic facts
        occ.integrity = Integrity.GENUINE if occ.target == occ.return_site else Integrity.VIOLATED
        occ.alignment = Alignment.ALIGNED if sp_after_ret == sp_before_call else Alignment.DISALIGNED
        if d > k_max:
            # beyond the bound only runtime violations are reported
            if occ.integrity is Integrity.GENUINE:
                occ.integrity = Integrity.UNKNOWN
            if occ.alignment is Alignment.ALIGNED:
                occ.alignment = Alignment.UNKNOWN
            continue
        ret_word = mem_word_at(slot, W)
        if occ.integrity is Integrity.GENUINE:
            goal = T.cmp("ne", ret_word, T.const(occ.return_site, W))
            v = _decide(trace, occ.index, goal, k, tables, solver, rep.stats)
            if v.kind is Kind.UNSAT:
                # the slot provably holds the return site: one possible target
                occ.multiplicity = Multiplicity.SINGLE
            else:
                occ.integrity = Integrity.UNKNOWN
        else:
            goal = T.cmp("ne", ret_word, T.const(occ.target, W))
            v = _decide(trace, occ.index, goal, k, tables, solver, rep.stats)
            occ.multiplicity = Multiplicity.SINGLE if v.kind is Kind.UNSAT else Multiplicity.UNKNOWN
        if occ.alignment is Alignment.ALIGNED:
            sp_call = reg_at("sp", W, at=call.index)
            sp_ret = T.binop("add", reg_at("sp", W), T.const(wb, W))
            v = _decide(trace, occ.index, T.cmp("ne", sp_call, sp_ret), k, tables, solver,
                        rep.stats)
            if v.kind is not Kind.UNSAT:
                occ.alignment = Alignment.UNKNOWN
    for rep in reports.values():
        rep.label = _aggregate(rep)
    return reports


def _aggregate(rep: RetReport) -> TamperingLabel:
    occs = rep.occurrences
    lab = TamperingLabel()
    if any(o.integrity is Integrity.VIOLATED for o in occs):
        lab.integrity = Integrity.VIOLATED
    elif occs and all(o.integrity is Integrity.GENUINE for o in occs):
        lab.integrity = Integrity.GENUINE
    if any(o.alignment is Alignment.DISALIGNED for o in occs):
        lab.alignment = Alignment.DISALIGNED
    elif occs and all(o.alignment is Alignment.ALIGNED for o in occs):
        lab.alignment = Alignment.ALIGNED
    if len(rep.targets) > 1:
        lab.multiplicity = Multiplicity.MULTIPLE
    elif occs and all(o.multiplicity is Multiplicity.SINGLE for o in occs):
        lab.multiplicity = Multiplicity.SINGLE
    return lab


# -- other infeasibility questions ----------------------------------------------

@dataclass
class Finding:
    kind: str
    addr: int
    label: str
    value: object = None
    witness: Optional[dict] = None
    per_occurrence: list = field(default_factory=list)
    stats: QueryStats = field(default_factory=QueryStats)

    def to_record(self) -> dict:
        return {"kind": self.kind, "addr": self.addr, "label": self.label,
                "value": self.value, "witness": self.witness,
                "occurrences": [[o, str(v)] for o, v in self.per_occurrence],
                "queries": self.stats.queries, "solver_time": round(self.stats.solver_time, 6)}


def _witness_value(f: SliceFormula, term: T.Term, model: dict) -> int:
    env = dict(model)
    memo: dict = {}
    for name, rhs in f.equations:
        env[name] = T.evaluate(rhs, env, memo)
    return T.evaluate(term, env, memo)


def opaque_constant(trace: Trace, occurrence: int, expr, k=16, solver=None,
                    timeout: float = 5.0) -> Finding:
    """Is ``expr`` (a register name or placeholder Term) constant at the occurrence?"""
    solver = _solver(solver, timeout)
    W = trace.width
    if isinstance(expr, (str, int)):
        name = expr if isinstance(expr, str) else reg_name(expr)
        observed = trace.value_before(name, occurrence)
        expr = reg_at(name, W)
    else:
        raise TypeError("pass a register name; use check_constant for arbitrary terms")
    return check_constant(trace, occurrence, expr, observed, k, solver)


def check_constant(trace: Trace, occurrence: int, expr: T.Term, observed: int, k=16,
                   solver=None, timeout: float = 5.0) -> Finding:
    solver = _solver(solver, timeout)
    st = trace.steps[occurrence]
    out = Finding("const", st.addr, "UNKNOWN", observed)
    f = slice_at(trace, occurrence, T.cmp("ne", expr, T.const(observed, expr.width)), k)
    v = _ask(solver, f, out.stats)
    out.per_occurrence.append((occurrence, v.kind))
    if v.kind is Kind.UNSAT:
        out.label = "OPAQUE_CONST"
    elif v.kind is Kind.SAT:
        out.label = "VARIABLE"
        out.witness = v.model
    return out


def jump_closure(trace: Trace, addr: int, k=16, solver=None, timeout: float = 5.0) -> Finding:
    """Can the indirect jump at ``addr`` reach anything beyond the observed targets?"""
    solver = _solver(solver, timeout)
    occ = trace.occurrences(addr)
    if not occ:
        raise ValueError(f"no instruction executed at {addr:#x}")
    ins = trace.steps[occ[0]].instr
    if ins.op not in (Op.JMPR, Op.CALLR):
        raise ValueError(f"{addr:#x} is not an indirect jump")
    W = trace.width
    targets = sorted({trace.steps[i].jump_target for i in occ})
    out = Finding("jump", addr, "CLOSED", targets)
    target = reg_at(ins.operands[0], W)
    goal = T.conj(*[T.cmp("ne", target, T.const(v, W)) for v in targets])
    for i in occ:
        f = slice_at(trace, i, goal, k)
        v = _ask(solver, f, out.stats)
        out.per_occurrence.append((i, v.kind))
        if v.kind is Kind.SAT:
            out.label = "OPEN"
            out.witness = dict(v.model or {})
            # the alternative target under the model
            resolved = f.goal.args[0] if f.goal.op == "and" else f.goal
            while resolved.op == "and":
                resolved = resolved.args[0]
            out.witness["target"] = _witness_value(f, resolved.args[0], v.model or {})
            return out
        if v.kind is not Kind.UNSAT:
            out.label = "UNKNOWN"
    return out


def selfmod_conditional(trace: Trace, occurrence: int, k=16, solver=None,
                        timeout: float = 5.0) -> Finding:
    """Could the code-region store at ``occurrence`` write anything else?"""
    solver = _solver(solver, timeout)
    st = trace.steps[occurrence]
    if st.instr.op is not Op.STORE or st.written_value is None:
        raise ValueError(f"step {occurrence} is not a store into the code region")
    W = trace.width
    value = st.written_value
    out = Finding("selfmod", st.addr, "UNKNOWN", value)
    goal = T.cmp("ne", reg_at(st.instr.operands[2], W), T.const(value, W))
    v = _ask(solver, slice_at(trace, occurrence, goal, k), out.stats)
    out.per_occurrence.append((occurrence, v.kind))
    if v.kind is Kind.UNSAT:
        out.label = "UNCONDITIONAL"
    elif v.kind is Kind.SAT:
        out.label = "CONDITIONAL"
        out.witness = v.model
    return out


def code_stores(trace: Trace) -> list:
    return [st.index for st in trace.steps if st.written_value is not None and st.instr.op is Op.STORE]


def write_records(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_record() if hasattr(r, "to_record") else r, sort_keys=True) + "\n")
