"""Linear sweep, recursive, dynamic and sparse disassembly, plus scoring."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .isa import COND_JUMPS, Instruction, Op, ProgramImage, decode
from .tracer import Trace


class Method(str, enum.Enum):
    LINEAR = "linear"
    RECURSIVE = "recursive"
    DYNAMIC = "dynamic"
    SPARSE = "sparse"

    def __str__(self):
        return self.value


@dataclass
class DisasmResult:
    method: Method
    instructions: set = field(default_factory=set)     # (addr, Instruction)
    edges: set = field(default_factory=set)            # (src, dst, kind)

    @property
    def addrs(self) -> set:
        return {a for a, _ in self.instructions}

    def __len__(self) -> int:
        return len(self.instructions)

    def by_addr(self) -> dict:
        out: dict[int, list] = {}
        for a, ins in self.instructions:
            out.setdefault(a, []).append(ins)
        return out


def _static_successors(ins: Instruction, addr: int) -> list:
    """(target, kind) pairs a recursive traversal assumes for ``ins``."""
    op = ins.op
    nxt = addr + ins.length
    if op in (Op.HALT, Op.RET, Op.JMPR):
        return []
    if op is Op.JMP:
        return [(ins.target(), "jump")]
    if op in COND_JUMPS:
        return [(ins.target(), "jump"), (nxt, "fallthrough")]
    if op is Op.CALL:
        return [(ins.target(), "call"), (nxt, "fallthrough")]
    if op is Op.CALLR:
        return [(nxt, "fallthrough")]
    return [(nxt, "fallthrough")]


def linear_sweep(image: ProgramImage) -> DisasmResult:
    """Decode the code region front to back, skipping a byte on failure."""
    res = DisasmResult(Method.LINEAR)
    lo, hi = image.code_region
    a = lo
    prev = None
    while a < hi:
        ins = decode(image, a)
        if not ins:
            a += 1
            prev = None
            continue
        res.instructions.add((a, ins))
        if prev is not None:
            res.edges.add((prev, a, "fallthrough"))
        prev = a if ins.op not in (Op.HALT, Op.RET, Op.JMP, Op.JMPR) else None
        a += ins.length
    return res


def _traverse(image: ProgramImage, entries, successors, method: Method) -> DisasmResult:
    res = DisasmResult(method)
    seen = set()
    work = [e for e in entries]
    while work:
        a = work.pop()
        if a in seen or not image.in_code(a):
            continue
        seen.add(a)
        ins = decode(image, a)
        if not ins:
            continue
        res.instructions.add((a, ins))
        for t, kind in successors(ins, a):
            if t is None:
                continue
            res.edges.add((a, t, kind))
            if t not in seen:
                work.append(t)
    return res


def recursive(image: ProgramImage, entries=None) -> DisasmResult:
    """Classic recursive traversal from ``entries`` (default: the image entry)."""
    entries = [image.entry] if entries is None else list(entries)
    if not entries:
        raise ValueError("recursive disassembly needs at least one entry point")
    return _traverse(image, entries, _static_successors, Method.RECURSIVE)


def _edge_kind(ins: Instruction, src_next: int, dst: int) -> str:
    if ins.op is Op.RET:
        return "ret"
    if ins.op in (Op.CALL, Op.CALLR):
        return "call"
    if dst == src_next:
        return "fallthrough"
    return "jump"


def dynamic_disasm(traces) -> DisasmResult:
    """Union of the instructions executed in ``traces``."""
    traces = list(traces)
    if not traces:
        raise ValueError("dynamic disassembly needs at least one trace")
    res = DisasmResult(Method.DYNAMIC)
    for tr in traces:
        prev = None
        for st in tr.steps:
            res.instructions.add((st.addr, st.instr))
            if prev is not None:
                res.edges.add((prev.addr, st.addr, _edge_kind(prev.instr, prev.next_addr, st.addr)))
            prev = st
    return res


def _dynamic_targets(traces) -> dict:
    """addr of each executed control transfer -> set of observed successors."""
    out: dict[int, set] = {}
    for tr in traces:
        for st in tr.steps:
            if st.jump_target is not None:
                out.setdefault(st.addr, set()).add(st.jump_target)
    return out


def _suppressed_return_sites(traces, rets) -> set:
    """Call addresses whose associated rets are all labelled VIOLATED."""
    from .detect import Integrity, match_calls
    verdicts: dict[int, list] = {}
    for tr in traces:
        for occ in match_calls(tr):
            if occ.call_index is None:
                continue
            rep = rets.get(tr.steps[occ.index].addr)
            verdicts.setdefault(tr.steps[occ.call_index].addr, []).append(
                rep.label.integrity if rep is not None else Integrity.UNKNOWN)
    return {a for a, vs in verdicts.items() if vs and all(v is Integrity.VIOLATED for v in vs)}


def sparse(image: ProgramImage, traces, opacity: dict | None = None, rets: dict | None = None
           ) -> DisasmResult:
    """Recursive traversal steered by the traces and the detector reports.

    ``opacity`` maps conditional addresses to OpacityStatus, ``rets`` maps ret
    addresses to RetReport; both must come from the same traces.
    """
    from .detect import Integrity, Opacity
    traces = list(traces)
    if not traces:
        raise ValueError("sparse disassembly needs at least one trace")
    opacity = opacity or {}
    rets = rets or {}
    executed = {st.addr for tr in traces for st in tr.steps}
    for a in list(opacity) + list(rets):
        if a not in executed:
            raise ValueError(f"report for {a:#x} does not match any executed instruction")
    dyn = _dynamic_targets(traces)
    suppressed = _suppressed_return_sites(traces, rets) if rets else set()

    def successors(ins: Instruction, a: int):
        op = ins.op
        nxt = a + ins.length
        if op in COND_JUMPS:
            st = opacity.get(a)
            if st is not None and st.status is Opacity.OPAQUE:
                if st.branch == "taken":
                    return [(nxt, "fallthrough")]
                return [(ins.target(), "jump")]
            return [(ins.target(), "jump"), (nxt, "fallthrough")]
        if op is Op.JMPR:
            return [(t, "jump") for t in sorted(dyn.get(a, ()))]
        if op in (Op.CALL, Op.CALLR):
            out = [(ins.target(), "call")] if op is Op.CALL else \
                [(t, "call") for t in sorted(dyn.get(a, ()))]
            if a not in suppressed:
                out.append((nxt, "fallthrough"))
            return out
        if op is Op.RET:
            rep = rets.get(a)
            if rep is not None and rep.label.integrity is Integrity.VIOLATED:
                return [(t, "ret") for t in sorted(rep.targets)]
            return []
        return _static_successors(ins, a)

    entries = {image.entry} | {tr.steps[0].addr for tr in traces if tr.steps}
    for targets in dyn.values():
        entries |= targets
    res = _traverse(image, sorted(entries), successors, Method.SPARSE)
    dynamic = dynamic_disasm(traces)
    res.instructions |= dynamic.instructions
    res.edges |= dynamic.edges
    return res


# -- scoring ------------------------------------------------------------------

@dataclass(frozen=True)
class Metrics:
    method: str
    count: int
    perfect: int
    over: int
    under: int

    @property
    def over_ratio(self) -> float:
        return self.over / self.perfect if self.perfect else 0.0

    def to_record(self) -> dict:
        return {"kind": "disasm", "method": self.method, "count": self.count,
                "perfect": self.perfect, "over": self.over, "under": self.under}


def perfect_set(image: ProgramImage, legit_addrs, traces=()) -> set:
    """Original-program instructions at ``legit_addrs`` plus everything executed."""
    out = set()
    for a in legit_addrs:
        ins = decode(image, a)
        if ins:
            out.add((a, ins))
    for tr in traces:
        out |= {(st.addr, st.instr) for st in tr.steps}
    return out


def score(result: DisasmResult, perfect: set) -> Metrics:
    got = result.instructions
    return Metrics(str(result.method), len(got), len(perfect), len(got - perfect), len(perfect - got))


def to_dot(result: DisasmResult, tags: dict | None = None, name: str = "cfg") -> str:
    """Instruction-level CFG in DOT; ``tags`` maps addresses to liveness
    labels used for node colouring."""
    colors = {"ALIVE": "palegreen", "DEAD": "lightgray", "SPURIOUS": "lightsalmon"}
    lines = [f"digraph {name} {{", '  node [shape=box, fontname="monospace"];']
    for a, ins in sorted(result.instructions, key=lambda x: (x[0], str(x[1]))):
        label = f"{a:#x}: {ins}".replace('"', r"\"")
        attrs = f'label="{label}"'
        if tags and a in tags:
            tag = str(tags[a])
            attrs += f', style=filled, fillcolor={colors.get(tag, "white")}, status="{tag}"'
        lines.append(f'  n{a:x} [{attrs}];')
    addrs = result.addrs
    for s, d, kind in sorted(result.edges):
        if s in addrs and d in addrs:
            lines.append(f'  n{s:x} -> n{d:x} [label="{kind}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
