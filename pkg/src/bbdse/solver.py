"""Satisfiability of slice formulas: SMT-LIB2 emission, an external solver
process, and an exhaustive numpy oracle for small formulas."""

from __future__ import annotations

import enum
import os
import select
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import terms as T
from .formula import SliceFormula

SOLVER_ENV = "BBDSE_SOLVER"
DEFAULT_TIMEOUT = 5.0
BRUTE_MAX_BITS = 24


class Kind(str, enum.Enum):
    SAT = "SAT"
    UNSAT = "UNSAT"
    TIMEOUT = "TIMEOUT"
    UNKNOWN = "UNKNOWN"

    def __str__(self):
        return self.value


@dataclass
class Verdict:
    kind: Kind
    model: Optional[dict] = None
    elapsed: float = 0.0
    reason: str = ""
    cached: bool = False

    @property
    def sat(self) -> bool:
        return self.kind is Kind.SAT

    @property
    def unsat(self) -> bool:
        return self.kind is Kind.UNSAT


class SolverError(RuntimeError):
    pass


def default_solver_path() -> str | None:
    return os.environ.get(SOLVER_ENV) or shutil.which("z3")


# -- SMT-LIB emission ----------------------------------------------------------

def _roots(f: SliceFormula):
    return [rhs for _, rhs in f.equations] + list(f.conditions) + [f.goal]


def _render(f: SliceFormula, canonical: bool):
    """Returns (declarations and assertions, variable names, renaming)."""
    roots = _roots(f)
    order = T.postorder(roots)
    # variable order: defined names and leaves in first-appearance order
    names: list[str] = []
    seen = set()
    for n, rhs in f.equations:
        for node in T.postorder([rhs]):
            if node.op == "var" and node.param not in seen:
                seen.add(node.param)
                names.append(node.param)
        if n not in seen:
            seen.add(n)
            names.append(n)
    for node in order:
        if node.op == "var" and node.param not in seen:
            seen.add(node.param)
            names.append(node.param)
    if canonical:
        rename = {n: f"v{i}" for i, n in enumerate(names)}
    else:
        rename = {n: n for n in names}
        names = sorted(names)

    refs: dict[int, int] = {}
    for node in order:
        for a in node.args:
            refs[id(a)] = refs.get(id(a), 0) + 1
    text: dict[int, str] = {}
    defs = []
    counter = 0

    def ref(node):
        return text[id(node)]

    for node in order:
        if node.op == "var":
            text[id(node)] = rename[node.param]
            continue
        s = T.smt_node(node, ref)
        if refs.get(id(node), 0) > 1 and node.op != "const":
            nm = f"_t{counter}"
            counter += 1
            sort = f"(_ BitVec {node.width})"
            defs.append(f"(define-fun {nm} () {sort} {s})")
            s = nm
        text[id(node)] = s

    widths = {}
    for node in order:
        if node.op == "var":
            widths[node.param] = node.width
    for n, rhs in f.equations:
        widths[n] = rhs.width
    lines = [f"(declare-fun {rename[n]} () (_ BitVec {widths[n]}))" for n in names]
    lines += defs
    for n, rhs in f.equations:
        lines.append(f"(assert (= {rename[n]} {text[id(rhs)]}))")
    for c in f.conditions:
        lines.append(f"(assert (= {text[id(c)]} #b1))")
    lines.append(f"(assert (= {text[id(f.goal)]} #b1))")
    return lines, names, rename


def emit_smtlib(f: SliceFormula, logic: str = "QF_BV") -> str:
    lines, _, _ = _render(f, canonical=False)
    return "\n".join([f"(set-logic {logic})"] + lines + ["(check-sat)", "(exit)"]) + "\n"


def canonical_key(f: SliceFormula) -> str:
    lines, _, _ = _render(f, canonical=True)
    return "\n".join(lines)


def _parse_value(tok: str) -> int:
    tok = tok.strip()
    if tok.startswith("#x"):
        return int(tok[2:], 16)
    if tok.startswith("#b"):
        return int(tok[2:], 2)
    if tok.startswith("(_ bv"):
        return int(tok[5:].split()[0])
    raise SolverError(f"cannot parse value {tok!r}")


def _parse_model(text: str) -> dict:
    """Parse a ``(get-value ...)`` answer: ((name value) ...)."""
    out = {}
    body = text.strip()
    if body.startswith("(") and body.endswith(")"):
        body = body[1:-1]
    depth = 0
    cur = ""
    items = []
    for ch in body:
        if ch == "(":
            depth += 1
            if depth == 1:
                cur = ""
                continue
        elif ch == ")":
            depth -= 1
            if depth == 0:
                items.append(cur)
                continue
        if depth >= 1:
            cur += ch
    for item in items:
        name, _, value = item.strip().partition(" ")
        out[name] = _parse_value(value)
    return out


# -- checking -------------------------------------------------------------------

def verify_model(f: SliceFormula, model: dict) -> bool:
    """Re-evaluate every constraint and the goal under ``model`` (cut inputs)."""
    env = dict(model)
    memo: dict = {}
    for name, rhs in f.equations:
        env[name] = T.evaluate(rhs, env, memo)
    for c in list(f.conditions) + [f.goal]:
        if not T.evaluate(c, env, memo):
            return False
    return True


def _trivial(f: SliceFormula) -> Verdict | None:
    if f.goal.is_const and not f.goal.value:
        return Verdict(Kind.UNSAT, reason="goal folds to false")
    if any(c.is_const and not c.value for c in f.conditions):
        return Verdict(Kind.UNSAT, reason="constraint folds to false")
    return None


def check(f: SliceFormula, timeout: float = DEFAULT_TIMEOUT, solver_path: str | None = None,
          dump: str | None = None) -> Verdict:
    """One solver process per query."""
    start = time.perf_counter()
    trivial = _trivial(f)
    if trivial is not None:
        trivial.elapsed = time.perf_counter() - start
        return trivial
    path = solver_path or default_solver_path()
    if not path:
        return Verdict(Kind.UNKNOWN, reason="no SMT solver found", elapsed=0.0)
    lines, names, rename = _render(f, canonical=False)
    cut = sorted(c for c in f.cut_inputs if c in rename)
    script = [f"(set-option :timeout {int(timeout * 1000)})", "(set-logic QF_BV)"] + lines
    script.append("(check-sat)")
    if cut:
        script.append("(get-value (" + " ".join(rename[c] for c in cut) + "))")
    script.append("(get-info :reason-unknown)")
    text = "\n".join(script) + "\n"
    if dump:
        with open(dump, "w") as fh:
            fh.write(emit_smtlib(f))
    try:
        proc = subprocess.run([path, "-in", "-smt2"], input=text, capture_output=True,
                              text=True, timeout=timeout + 2.0)
    except subprocess.TimeoutExpired:
        return Verdict(Kind.TIMEOUT, elapsed=time.perf_counter() - start, reason="wall clock")
    except OSError as exc:
        return Verdict(Kind.UNKNOWN, elapsed=time.perf_counter() - start, reason=str(exc))
    return _interpret(proc.stdout, cut, rename, time.perf_counter() - start)


def _interpret(out: str, cut, rename, elapsed) -> Verdict:
    lines = [ln for ln in out.splitlines() if ln.strip()]
    if not lines:
        return Verdict(Kind.UNKNOWN, elapsed=elapsed, reason="empty solver output")
    head = lines[0].strip()
    if head == "unsat":
        return Verdict(Kind.UNSAT, elapsed=elapsed)
    if head == "sat":
        model = {}
        if cut:
            back = {rename[c]: c for c in cut}
            # model lines sit between the verdict and the reason-unknown answer
            raw = _parse_model(" ".join(ln for ln in lines[1:] if "reason-unknown" not in ln))
            model = {back[k]: v for k, v in raw.items() if k in back}
        return Verdict(Kind.SAT, model=model, elapsed=elapsed)
    if head == "unknown":
        reason = " ".join(lines[1:])
        kind = Kind.TIMEOUT if ("timeout" in reason or "canceled" in reason) else Kind.UNKNOWN
        return Verdict(kind, elapsed=elapsed, reason=reason)
    return Verdict(Kind.UNKNOWN, elapsed=elapsed, reason=out.strip()[:300])


class Solver:
    """A long-lived solver process answering one query at a time.

    Queries are reset between uses and answers are cached on the
    variable-renamed script text, so repeated loop iterations of the same
    slice shape cost one solver call.
    """

    MARK = "__bbdse_done__"

    def __init__(self, path: str | None = None, timeout: float = DEFAULT_TIMEOUT,
                 cache: bool = True):
        self.path = path or default_solver_path()
        self.timeout = timeout
        self.use_cache = cache
        self.cache: dict[str, tuple] = {}
        self.proc: subprocess.Popen | None = None
        self.calls = 0
        self.hits = 0
        self._timeout_set = None

    def _start(self):
        if not self.path:
            raise SolverError("no SMT solver found; set " + SOLVER_ENV)
        self.proc = subprocess.Popen([self.path, "-in", "-smt2"], stdin=subprocess.PIPE,
                                     stdout=subprocess.PIPE, stderr=subprocess.STDOUT,
                                     text=True)
        self.proc.stdin.write("(set-logic QF_BV)\n")

    def close(self):
        if self.proc is not None:
            try:
                self.proc.kill()
                self.proc.wait(timeout=2)
            except Exception:
                pass
            self.proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __del__(self):
        self.close()

    def _read_until_mark(self, deadline: float) -> str | None:
        fd = self.proc.stdout.fileno()
        buf = b""
        mark = self.MARK.encode()
        while mark not in buf:
            remaining = deadline - time.perf_counter()
            if remaining <= 0:
                return None
            ready, _, _ = select.select([fd], [], [], remaining)
            if not ready:
                return None
            chunk = os.read(fd, 65536)
            if not chunk:
                return buf.decode() or None
            buf += chunk
        return buf[:buf.index(mark)].decode()

    def check(self, f: SliceFormula, timeout: float | None = None) -> Verdict:
        start = time.perf_counter()
        timeout = self.timeout if timeout is None else timeout
        trivial = _trivial(f)
        if trivial is not None:
            trivial.elapsed = time.perf_counter() - start
            return trivial
        lines, names, rename = _render(f, canonical=True)
        key = "\n".join(lines)
        # cut inputs the formula never mentions are unconstrained
        cut = sorted(c for c in f.cut_inputs if c in rename)
        if self.use_cache and key in self.cache:
            kind, model = self.cache[key]
            self.hits += 1
            if model is not None:
                model = {c: model[rename[c]] for c in cut if rename[c] in model}
            return Verdict(kind, model=model, elapsed=time.perf_counter() - start, cached=True)
        if not self.path:
            return Verdict(Kind.UNKNOWN, reason="no SMT solver found")
        if self.proc is None or self.proc.poll() is not None:
            self._start()
            self._timeout_set = None
        script = []
        if self._timeout_set != timeout:
            script.append(f"(set-option :timeout {max(1, int(timeout * 1000))})")
            self._timeout_set = timeout
        # push/pop scopes the declarations and is far cheaper than (reset)
        script += ["(push)"] + lines + ["(check-sat)"]
        if cut:
            script.append("(get-value (" + " ".join(rename[c] for c in cut) + "))")
        script.append("(get-info :reason-unknown)")
        script.append("(pop)")
        script.append(f'(echo "{self.MARK}")')
        self.calls += 1
        try:
            self.proc.stdin.write("\n".join(script) + "\n")
            self.proc.stdin.flush()
        except OSError as exc:
            self.close()
            return Verdict(Kind.UNKNOWN, elapsed=time.perf_counter() - start, reason=str(exc))
        out = self._read_until_mark(start + timeout + 2.0)
        elapsed = time.perf_counter() - start
        if out is None:
            self.close()
            return Verdict(Kind.TIMEOUT, elapsed=elapsed, reason="wall clock")
        if "error" in out and not out.lstrip().startswith(("sat", "unsat", "unknown")):
            return Verdict(Kind.UNKNOWN, elapsed=elapsed, reason=out.strip()[:300])
        verdict = _interpret(out, cut, rename, elapsed)
        if self.use_cache and verdict.kind in (Kind.SAT, Kind.UNSAT):
            canon_model = None
            if verdict.model is not None:
                canon_model = {rename[c]: v for c, v in verdict.model.items()}
            self.cache[key] = (verdict.kind, canon_model)
        return verdict


# -- exhaustive oracle ----------------------------------------------------------

def brute_check(f: SliceFormula, max_bits: int = BRUTE_MAX_BITS, chunk: int = 1 << 18) -> Verdict:
    """Enumerate every assignment of the cut inputs.

    Definitions are evaluated in order (they are functions of earlier
    names), so only the cut inputs are free.
    """
    start = time.perf_counter()
    widths = {}
    for v in T.var_terms(*_roots(f)):
        widths[v.name] = v.width
    free = sorted(f.cut_inputs)
    for n in free:
        widths.setdefault(n, f.var_width(n))
    bits = sum(widths[n] for n in free)
    if bits > max_bits:
        raise ValueError(f"{bits} free input bits exceed the brute-force budget of {max_bits}")
    total = 1 << bits
    checks = list(f.conditions) + [f.goal]
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(total, lo + chunk), dtype=np.uint64)
        env = {}
        shift = 0
        for n in free:
            w = widths[n]
            env[n] = (idx >> np.uint64(shift)) & np.uint64((1 << w) - 1)
            shift += w
        memo: dict = {}
        for name, rhs in f.equations:
            env[name] = T.evaluate_np([rhs], env, memo)[0]
            if env[name].shape != idx.shape:
                env[name] = np.broadcast_to(env[name], idx.shape)
        ok = np.ones(len(idx), dtype=bool)
        for val in T.evaluate_np(checks, env, memo):
            ok &= (np.broadcast_to(val, idx.shape) != 0)
        hits = np.flatnonzero(ok)
        if len(hits):
            first = int(hits[0])
            model = {n: int(env[n][first]) for n in free}
            return Verdict(Kind.SAT, model=model, elapsed=time.perf_counter() - start)
    return Verdict(Kind.UNSAT, elapsed=time.perf_counter() - start)
