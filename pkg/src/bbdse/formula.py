"""Bounded backward slices and forward path predicates over a trace.

Naming: ``{loc}_{d}`` is the value of ``loc`` as written by step ``d``;
``{loc}_init`` is its value before the first step.  Registers are named
``r0..r7, sp``; memory bytes ``m{addr:x}``.  Because names depend only on
the defining step, a slice at bound k is a syntactic subset of the slice at
any larger bound, and the forward path predicate uses the same names.

Goals are written over placeholders: ``$r3`` is r3 just before the
occurrence, ``$r3@17`` is r3 just before step 17, ``$m1ffc`` a memory byte.
"""

from __future__ import annotations

import heapq
import math
import re
from dataclasses import dataclass, field, replace

from . import terms as T
from .isa import ALU_RI, ALU_RR, COMPARE, SP, Op, reg_name
from .tracer import Trace

BOUND_METRICS = ("steps", "defuse")
SYMBOLIC_TABLE_MAX = 64  # bytes; larger read-only objects stay concretised


@dataclass(frozen=True)
class ReachabilityCondition:
    addr: int
    occurrence: int
    goal: T.Term


@dataclass(frozen=True)
class SliceFormula:
    equations: tuple          # ((name, Term), ...) in definition order
    conditions: tuple         # width-1 Terms (branch constraints)
    goal: T.Term
    cut_inputs: frozenset
    span: tuple               # (lo, hi) trace indices, hi exclusive
    k_used: float
    width: int
    widths: dict = field(default_factory=dict, compare=False)

    @property
    def constraints(self) -> tuple:
        eqs = tuple(T.cmp("eq", T.var(n, e.width), e) for n, e in self.equations)
        return eqs + tuple(self.conditions)

    def defined(self) -> set:
        return {n for n, _ in self.equations}

    def variables(self) -> set:
        roots = [e for _, e in self.equations] + list(self.conditions) + [self.goal]
        return T.variables(*roots) | self.defined()

    def var_width(self, name: str) -> int:
        return self.widths.get(name) or _name_width(name, self.width)

    def __len__(self) -> int:
        return len(self.equations) + len(self.conditions)


def _name_width(name: str, width: int) -> int:
    return 8 if name.startswith("m") and width != 8 else width


def loc_name(loc, d) -> str:
    base = loc if isinstance(loc, str) else f"m{loc:x}"
    return f"{base}_init" if d is None else f"{base}_{d}"


_NAME = re.compile(r"^(r[0-7]|sp|m[0-9a-f]+|oob)_(init|\d+)$")


def parse_name(name: str):
    """Inverse of ``loc_name``: returns (loc, d) or None for other names."""
    m = _NAME.match(name)
    if not m:
        return None
    base, d = m.groups()
    loc = int(base[1:], 16) if base.startswith("m") else base
    return loc, (None if d == "init" else int(d))


# -- goal placeholders -------------------------------------------------------

def reg_at(name, width: int, at: int | None = None) -> T.Term:
    if isinstance(name, int):
        name = reg_name(name)
    return T.var(f"${name}" + (f"@{at}" if at is not None else ""), width)


def mem_byte_at(addr: int, at: int | None = None) -> T.Term:
    return T.var(f"$m{addr:x}" + (f"@{at}" if at is not None else ""), 8)


def mem_word_at(addr: int, width: int, at: int | None = None) -> T.Term:
    word = mem_byte_at(addr, at)
    for i in range(1, width // 8):
        word = T.concat(mem_byte_at(addr + i, at), word)
    return word


def _parse_placeholder(name: str, default_at: int):
    body = name[1:]
    at = default_at
    if "@" in body:
        body, at_s = body.split("@")
        at = int(at_s)
    if body.startswith("m"):
        return int(body[1:], 16), at
    return body, at


def branch_condition(step, width: int, taken: bool | None = None) -> T.Term:
    """Placeholder goal 'the conditional at ``step`` goes the ``taken`` way'."""
    if taken is None:
        taken = step.branch_taken
    r = reg_at(step.instr.operands[0], width)
    zero = T.const(0, width)
    is_zero = T.cmp("eq", r, zero)
    jump_if_zero = step.instr.op is Op.JZ
    return is_zero if taken == jump_if_zero else T.bnot(is_zero)


def negate_goal(f: SliceFormula) -> SliceFormula:
    return replace(f, goal=T.bnot(f.goal))


# -- the slicer --------------------------------------------------------------

class _Walker:
    """Shared machinery: resolves operand values to SSA variables and emits
    transfer equations for needed definitions."""

    def __init__(self, trace: Trace, tables=None):
        self.trace = trace
        self.W = trace.width
        self.wb = self.W // 8
        self.inputs = trace.input_bytes
        self.tables = tables if tables is not None else readonly_tables(trace)
        self.needed: dict[int, dict] = {}
        self.heap: list[int] = []

    def need(self, loc, d, depth):
        bucket = self.needed.get(d)
        if bucket is None:
            bucket = self.needed[d] = {}
            heapq.heappush(self.heap, -d)
        if loc not in bucket or bucket[loc] > depth:
            bucket[loc] = depth

    def value(self, loc, j: int, depth: int) -> T.Term:
        """Term for ``loc`` just before step ``j``."""
        d = self.trace.last_write_before(loc, j)
        if isinstance(loc, str):
            if d is not None:
                self.need(loc, d, depth)
            return T.var(loc_name(loc, d), self.W)
        if d is None:
            if loc in self.inputs:
                return T.var(loc_name(loc, None), 8)
            return T.const(self.trace.initial_byte(loc), 8)
        self.need(loc, d, depth)
        return T.var(loc_name(loc, d), 8)

    def reg(self, r: int, j: int, depth: int) -> T.Term:
        return self.value(reg_name(r), j, depth)

    def word(self, addr: int, j: int, depth: int) -> T.Term:
        if self.W == 8:
            return self.value(addr, j, depth)
        out = self.value(addr, j, depth)
        for i in range(1, self.wb):
            out = T.concat(self.value(addr + i, j, depth), out)
        return out

    def byte_of(self, word: T.Term, i: int) -> T.Term:
        if self.W == 8:
            return word
        return T.extract(word, 8 * i + 7, 8 * i)

    def resolve_goal(self, goal: T.Term, occurrence: int) -> T.Term:
        mapping = {}
        for v in T.var_terms(goal):
            if v.name.startswith("$"):
                loc, at = _parse_placeholder(v.name, occurrence)
                mapping[v.name] = self.value(loc, at, 0)
        return T.substitute(goal, mapping)

    def load(self, step, depth: int) -> T.Term:
        """Value loaded by a LOAD/POP/RET step; constant tables keep a
        symbolic address so the slice does not pin the index."""
        ins = step.instr
        ea = step.effective_addrs[0]
        j = step.index
        if ins.op is Op.LOAD:
            obj = self.tables.get(ea)
            if obj is not None:
                addr_term = T.binop("add", self.reg(ins.operands[1], j, depth), T.const(ins.operands[2], self.W))
                if not addr_term.is_const:
                    lo, hi = obj
                    oob = f"oob_{j}"
                    out = T.var(oob, self.W)
                    for a in range(hi - self.wb, lo - 1, -self.wb):
                        out = T.ite(T.cmp("eq", addr_term, T.const(a, self.W)),
                                    self.word(a, j, depth), out)
                    return out
        return self.word(ea, j, depth)

    def transfer(self, step, loc, depth: int) -> T.Term:
        """Right-hand side of the definition of ``loc`` at ``step``."""
        ins = step.instr
        op = ins.op
        o = ins.operands
        j = step.index
        W = self.W
        nd = depth + 1
        if op in ALU_RR:
            return T.binop(ALU_RR[op], self.reg(o[0], j, nd), self.reg(o[1], j, nd))
        if op in ALU_RI:
            return T.binop(ALU_RI[op], self.reg(o[0], j, nd), T.const(o[1], W))
        if op in COMPARE:
            c = T.cmp(COMPARE[op], self.reg(o[1], j, nd), self.reg(o[2], j, nd))
            return T.zext(c, W - 1)
        if op is Op.MOVI:
            return T.const(o[1], W)
        if op is Op.MOV:
            return self.reg(o[1], j, nd)
        if op is Op.LOAD:
            return self.load(step, nd)
        sp_name = reg_name(SP)
        if op is Op.POP:
            if loc == sp_name and o[0] != SP:
                return T.binop("add", self.reg(SP, j, nd), T.const(self.wb, W))
            return self.word(step.effective_addrs[0], j, nd)
        if op is Op.RET:
            return T.binop("add", self.reg(SP, j, nd), T.const(self.wb, W))
        if op in (Op.PUSH, Op.PUSHI, Op.CALL, Op.CALLR):
            if loc == sp_name:
                return T.binop("sub", self.reg(SP, j, nd), T.const(self.wb, W))
            if op is Op.PUSH:
                src = self.reg(o[0], j, nd)
            elif op is Op.PUSHI:
                src = T.const(o[0], W)
            else:
                src = T.const(step.next_addr, W)
            return self.byte_of(src, loc - step.effective_addrs[0])
        if op is Op.STORE:
            return self.byte_of(self.reg(o[2], j, nd), loc - step.effective_addrs[0])
        raise ValueError(f"step {j} ({ins}) does not define {loc!r}")

    def branch(self, step, depth: int) -> T.Term:
        r = self.reg(step.instr.operands[0], step.index, depth)
        is_zero = T.cmp("eq", r, T.const(0, self.W))
        return is_zero if step.branch_taken == (step.instr.op is Op.JZ) else T.bnot(is_zero)

    def walk(self, lo: int, max_depth: float, branches_from: int | None, hi: int):
        """Emit definitions needed at indices in [lo, hi), newest first, and
        branch constraints for conditional steps in [branches_from, hi).
        Needs deeper than ``max_depth`` are left undefined (cut inputs)."""
        equations = []
        conditions = []
        steps = self.trace.steps
        j = hi - 1
        while j >= lo:
            st = steps[j]
            if branches_from is not None and j >= branches_from and st.branch_taken is not None:
                conditions.append(self.branch(st, 1))
            bucket = self.needed.pop(j, None)
            if bucket:
                for loc, depth in bucket.items():
                    if depth < max_depth:
                        equations.append((loc_name(loc, j), self.transfer(st, loc, depth)))
            j -= 1
            if branches_from is None or j < branches_from:
                # nothing else to collect here: jump to the next needed definition
                heap = self.heap
                while heap and (-heap[0] > j or -heap[0] not in self.needed):
                    heapq.heappop(heap)
                if not heap:
                    break
                j = -heap[0]
        return equations, conditions

def readonly_tables(trace: Trace) -> dict:
    """Byte address -> (lo, hi) for small constant data objects.

    An object spans from one data symbol to the next (or the image end); it
    qualifies when it lies outside the code region, holds no input bytes and
    is never written in the trace.
    """
    cached = trace.__dict__.get("_tables")
    if cached is not None:
        return cached
    img = trace.program
    data_syms = sorted({a for a in img.symbols.values()
                        if img.contains(a) and not img.in_code(a)})
    written = set()
    for st in trace.steps:
        for loc, _ in st.writes:
            if not isinstance(loc, str):
                written.add(loc)
    out = {}
    for n, lo in enumerate(data_syms):
        hi = data_syms[n + 1] if n + 1 < len(data_syms) else img.end
        if hi - lo < 2 * (img.width // 8) or hi - lo > SYMBOLIC_TABLE_MAX:
            continue
        rng = range(lo, hi)
        if any(a in trace.input_bytes or a in written for a in rng):
            continue
        for a in rng:
            out[a] = (lo, hi)
    object.__setattr__(trace, "_tables", out)
    return out


def _prune(goal: T.Term, equations: list, conditions: list):
    """Keep only constraints connected to the goal through shared variables."""
    parent: dict[str, str] = {}

    def find(x):
        root = x
        while parent.get(root, root) != root:
            root = parent[root]
        while parent.get(x, x) != root:
            parent[x], x = root, parent[x]
        return root

    def union(names):
        it = iter(names)
        first = next(it, None)
        if first is None:
            return
        r = find(first)
        for n in it:
            s = find(n)
            if s != r:
                parent[s] = r

    eq_vars = [T.variables(rhs) | {name} for name, rhs in equations]
    cond_vars = [T.variables(c) for c in conditions]
    for vs in eq_vars + cond_vars:
        union(vs)
    goal_vars = T.variables(goal)
    roots = {find(v) for v in goal_vars}
    keep_eq = [e for e, vs in zip(equations, eq_vars) if find(e[0]) in roots]
    keep_cond = [c for c, vs in zip(conditions, cond_vars) if vs and find(next(iter(vs))) in roots]
    return keep_eq, keep_cond


def _finish(goal, equations, conditions, span, k, width, prune=True):
    if prune:
        equations, conditions = _prune(goal, equations, conditions)
    equations = list(reversed(equations))
    defined = {n for n, _ in equations}
    used = T.variables(goal, *[rhs for _, rhs in equations], *conditions)
    cut = frozenset(used - defined)
    widths = {}
    for v in T.var_terms(goal, *[rhs for _, rhs in equations], *conditions):
        widths[v.name] = v.width
    for n, rhs in equations:
        widths[n] = rhs.width
    return SliceFormula(tuple(equations), tuple(conditions), goal, cut, span, k, width, widths)


def backward_slice(trace: Trace, cond: ReachabilityCondition, k,
                   bound_metric: str = "steps", tables=None) -> SliceFormula:
    """Bounded backward slice ending at ``cond.occurrence`` with the goal attached."""
    i = cond.occurrence
    if not 0 <= i < len(trace.steps):
        raise IndexError(f"occurrence {i} outside trace of length {len(trace.steps)}")
    if trace.steps[i].addr != cond.addr:
        raise ValueError(f"step {i} is at {trace.steps[i].addr:#x}, not {cond.addr:#x}")
    if k < 0:
        raise ValueError("k must be non-negative")
    if bound_metric not in BOUND_METRICS:
        raise ValueError(f"bound_metric must be one of {BOUND_METRICS}")
    w = _Walker(trace, tables)
    goal = w.resolve_goal(cond.goal, i)
    if bound_metric == "steps":
        lo = max(0, i - k) if k != math.inf else 0
        equations, conditions = w.walk(lo, math.inf, lo, i)
        span = (lo, i)
    else:
        # def-use depth bound: first the data cone, then branch constraints
        # inside the span that cone covers
        eq1, _ = w.walk(0, k, None, i)
        lo = min((int(n.rsplit("_", 1)[1]) for n, _ in eq1), default=i)
        w2 = _Walker(trace, w.tables)
        goal = w2.resolve_goal(cond.goal, i)
        equations, conditions = w2.walk(lo, k, lo, i)
        span = (lo, i)
    return _finish(goal, equations, conditions, span, k, trace.width)


def slice_at(trace: Trace, occurrence: int, goal: T.Term, k, bound_metric="steps",
             tables=None) -> SliceFormula:
    cond = ReachabilityCondition(trace.steps[occurrence].addr, occurrence, goal)
    return backward_slice(trace, cond, k, bound_metric, tables)


def inline_goal(trace: Trace, occurrence: int, goal: T.Term, k, tables=None) -> T.Term:
    """Goal with every definition inside the window substituted in.

    Branch constraints are ignored, so a constant result decides the full
    slice exactly: false means UNSAT, true is witnessed by the trace itself.
    """
    w = _Walker(trace, tables)
    g = w.resolve_goal(goal, occurrence)
    lo = max(0, occurrence - k) if k != math.inf else 0
    equations, _ = w.walk(lo, math.inf, None, occurrence)
    mapping: dict = {}
    for name, rhs in reversed(equations):
        mapping[name] = T.substitute(rhs, mapping)
    return T.substitute(g, mapping)


def forward_path_predicate(trace: Trace, upto: int, goal: T.Term | None = None) -> SliceFormula:
    """Every transfer equation and branch constraint of steps [0, upto)."""
    if not 0 <= upto <= len(trace.steps):
        raise IndexError("upto outside trace")
    w = _Walker(trace)
    goal = T.TRUE if goal is None else w.resolve_goal(goal, upto)
    for st in trace.steps[:upto]:
        for loc, _ in st.writes:
            w.need(loc, st.index, 0)
    equations, conditions = w.walk(0, math.inf, 0, upto)
    return _finish(goal, equations, conditions, (0, upto), math.inf, trace.width, prune=False)


def concrete_valuation(trace: Trace, f: SliceFormula) -> dict:
    """Runtime value of every variable of ``f``, read back from the trace."""
    env = {}
    for name in f.variables():
        parsed = parse_name(name)
        if parsed is None:
            raise ValueError(f"cannot value variable {name!r}")
        loc, d = parsed
        if loc == "oob":
            st = trace.steps[d]
            env[name] = trace.value_before(reg_name(st.instr.operands[0]), d + 1)
        elif d is None:
            env[name] = trace.value_before(loc, 0)
        else:
            env[name] = trace.value_before(loc, d + 1)
    return env


def holds(f: SliceFormula, env: dict, with_goal: bool = False) -> bool:
    memo: dict = {}
    for c in f.constraints:
        if not T.evaluate(c, env, memo):
            return False
    return bool(T.evaluate(f.goal, env, memo)) if with_goal else True


# -- forward symbolic execution ---------------------------------------------

class ForwardExecutor:
    """Classic forward DSE along a trace: symbolic state by substitution.

    Inputs are the initial registers and input memory bytes.  ``query`` at an
    occurrence returns the goal expressed over inputs together with the path
    constraints sharing variables with it, which is equisatisfiable with the
    full forward path predicate (the remaining constraints are satisfied by
    the trace itself and share no variable with the goal).
    """

    def __init__(self, trace: Trace):
        self.trace = trace
        self.W = trace.width
        self.wb = self.W // 8
        self.pos = 0
        self.regs = {reg_name(r): T.var(loc_name(reg_name(r), None), self.W) for r in range(9)}
        self.mem: dict[int, T.Term] = {}
        self.parent: dict[str, str] = {}
        self.groups: dict[str, list] = {}
        self.constraints: list = []

    def _byte(self, a):
        t = self.mem.get(a)
        if t is None:
            if a in self.trace.input_bytes:
                t = T.var(loc_name(a, None), 8)
            else:
                t = T.const(self.trace.initial_byte(a), 8)
        return t

    def _word(self, a):
        if self.W == 8:
            return self._byte(a)
        out = self._byte(a)
        for i in range(1, self.wb):
            out = T.concat(self._byte(a + i), out)
        return out

    def _store(self, a, v):
        if self.W == 8:
            self.mem[a] = v
            return
        for i in range(self.wb):
            self.mem[a + i] = T.extract(v, 8 * i + 7, 8 * i)

    def _find(self, x):
        root = x
        while self.parent.get(root, root) != root:
            root = self.parent[root]
        while self.parent.get(x, x) != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def _add_constraint(self, c: T.Term):
        if c.is_const:
            return
        vs = list(T.variables(c))
        roots = {self._find(v) for v in vs}
        big = max(roots, key=lambda r: len(self.groups.get(r, ())))
        merged = self.groups.setdefault(big, [])
        for r in roots:
            if r != big:
                self.parent[r] = big
                merged.extend(self.groups.pop(r, []))
        merged.append(c)
        self.constraints.append(c)

    def goal_term(self, goal: T.Term) -> T.Term:
        mapping = {}
        for v in T.var_terms(goal):
            if v.name.startswith("$"):
                loc, at = _parse_placeholder(v.name, self.pos)
                if at != self.pos:
                    raise ValueError("forward goals must refer to the current position")
                mapping[v.name] = self.regs[loc] if isinstance(loc, str) else self._byte(loc)
        return T.substitute(goal, mapping)

    def advance(self, upto: int):
        steps = self.trace.steps
        W, wb = self.W, self.wb
        R = self.regs
        while self.pos < upto:
            st = steps[self.pos]
            ins = st.instr
            op = ins.op
            o = ins.operands
            name = reg_name
            if op in ALU_RR:
                R[name(o[0])] = T.binop(ALU_RR[op], R[name(o[0])], R[name(o[1])])
            elif op in ALU_RI:
                R[name(o[0])] = T.binop(ALU_RI[op], R[name(o[0])], T.const(o[1], W))
            elif op in COMPARE:
                R[name(o[0])] = T.zext(T.cmp(COMPARE[op], R[name(o[1])], R[name(o[2])]), W - 1)
            elif op is Op.MOVI:
                R[name(o[0])] = T.const(o[1], W)
            elif op is Op.MOV:
                R[name(o[0])] = R[name(o[1])]
            elif op is Op.LOAD:
                R[name(o[0])] = self._load(st)
            elif op is Op.STORE:
                self._store(st.effective_addrs[0], R[name(o[2])])
            elif op in (Op.PUSH, Op.PUSHI, Op.CALL, Op.CALLR):
                src = (R[name(o[0])] if op is Op.PUSH else T.const(o[0], W) if op is Op.PUSHI
                       else T.const(st.next_addr, W))
                R["sp"] = T.binop("sub", R["sp"], T.const(wb, W))
                self._store(st.effective_addrs[0], src)
            elif op is Op.POP:
                v = self._word(st.effective_addrs[0])
                R["sp"] = T.binop("add", R["sp"], T.const(wb, W))
                R[name(o[0])] = v
            elif op is Op.RET:
                R["sp"] = T.binop("add", R["sp"], T.const(wb, W))
            elif op in (Op.JZ, Op.JNZ):
                is_zero = T.cmp("eq", R[name(o[0])], T.const(0, W))
                self._add_constraint(is_zero if st.branch_taken == (op is Op.JZ) else T.bnot(is_zero))
            self.pos += 1

    def _load(self, st):
        ins = st.instr
        ea = st.effective_addrs[0]
        tables = readonly_tables(self.trace)
        obj = tables.get(ea)
        if obj is not None:
            addr_term = T.binop("add", self.regs[reg_name(ins.operands[1])], T.const(ins.operands[2], self.W))
            if not addr_term.is_const:
                lo, hi = obj
                out = T.var(f"oob_{st.index}", self.W)
                for a in range(hi - self.wb, lo - 1, -self.wb):
                    out = T.ite(T.cmp("eq", addr_term, T.const(a, self.W)), self._word(a), out)
                return out
        return self._word(ea)

    def query(self, occurrence: int, goal: T.Term):
        """(goal over inputs, relevant path constraints) at ``occurrence``."""
        if occurrence < self.pos:
            raise ValueError("forward executor cannot move backwards")
        self.advance(occurrence)
        g = self.goal_term(goal)
        if g.is_const:
            return g, []
        roots = {self._find(v) for v in T.variables(g)}
        cons = []
        for r in roots:
            cons.extend(self.groups.get(r, ()))
        return g, cons


def forward_formula(goal: T.Term, constraints, width: int, upto: int) -> SliceFormula:
    """Wrap a forward query as a SliceFormula (no definitions, inputs only)."""
    roots = [goal] + list(constraints)
    widths = {v.name: v.width for v in T.var_terms(*roots)}
    return SliceFormula((), tuple(constraints), goal, frozenset(widths), (0, upto), math.inf,
                        width, widths)
