"""Predicate synthesis, liveness tagging and reduced-CFG extraction."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import terms as T
from .assembler import assemble_listing
from .detect import Opacity, OpacityStatus
from .disasm import DisasmResult, Method, recursive, sparse
from .formula import inline_goal, reg_at
from .isa import (ALU_RI, ALU_RR, COMPARE, COND_JUMPS, SP, Instruction, Op, ProgramImage,
                  reg_name)
from .tracer import Trace, run


class Liveness(str, enum.Enum):
    ALIVE = "ALIVE"
    DEAD = "DEAD"
    SPURIOUS = "SPURIOUS"

    def __str__(self):
        return self.value


@dataclass
class SynthesizedPredicate:
    site: int
    term: T.Term
    matched_family: int | None
    contributing: set = field(default_factory=set)

    @property
    def text(self) -> str:
        return T.to_text(self.term)

    def to_record(self) -> dict:
        return {"kind": "predicate", "addr": self.site, "term": self.text,
                "family": self.matched_family, "contributing": sorted(self.contributing)}


# -- dynamic def-use ------------------------------------------------------------

def step_reads(step) -> set:
    """Registers (by name) and memory bytes read by ``step``."""
    ins = step.instr
    op = ins.op
    o = ins.operands
    wb = ins.width // 8
    regs: list = []
    mem: list = []
    if op in ALU_RR:
        regs = [o[0], o[1]]
    elif op in ALU_RI:
        regs = [o[0]]
    elif op in COMPARE:
        regs = [o[1], o[2]]
    elif op is Op.MOV:
        regs = [o[1]]
    elif op is Op.LOAD:
        regs = [o[1]]
        mem = [step.effective_addrs[0]]
    elif op is Op.STORE:
        regs = [o[0], o[2]]
    elif op is Op.PUSH:
        regs = [o[0], SP]
    elif op in (Op.PUSHI, Op.CALL):
        regs = [SP]
    elif op in (Op.POP, Op.RET):
        regs = [SP]
        mem = [step.effective_addrs[0]]
    elif op in (Op.JZ, Op.JNZ, Op.JMPR):
        regs = [o[0]]
    elif op is Op.CALLR:
        regs = [o[0], SP]
    out = {reg_name(r) for r in regs}
    for a in mem:
        out.update(range(a, a + wb))
    return out


def dynamic_cone(trace: Trace, occurrence: int, k) -> set:
    """Indices of steps in the ``k`` steps before ``occurrence`` whose values
    flow (through data or address operands) into the step at ``occurrence``."""
    needed = set(step_reads(trace.steps[occurrence]))
    cone = set()
    lo = max(0, occurrence - k)
    for j in range(occurrence - 1, lo - 1, -1):
        if not needed:
            break
        st = trace.steps[j]
        written = {loc for loc, _ in st.writes}
        hit = written & needed
        if hit:
            cone.add(j)
            needed -= written
            needed |= step_reads(st)
    return cone


def _used_outside(trace: Trace, addrs: set, allowed: set) -> set:
    """Addresses in ``addrs`` with some executed definition read by a step
    whose address is not in ``allowed``."""
    steps = trace.steps
    out = set()
    for st in steps:
        if st.addr not in addrs or st.addr in out:
            continue
        live = {loc for loc, _ in st.writes}
        j = st.index + 1
        while live and j < len(steps):
            nxt = steps[j]
            if live & step_reads(nxt) and nxt.addr not in allowed:
                out.add(st.addr)
                break
            live -= {loc for loc, _ in nxt.writes}
            j += 1
    return out


# -- normalisation and family templates ---------------------------------------

def _flatten_concat(t: T.Term) -> list:
    if t.op == "concat":
        return _flatten_concat(t.args[0]) + _flatten_concat(t.args[1])
    return [t]


def _input_byte(t: T.Term):
    if t.is_var and t.name.startswith("m") and t.name.endswith("_init"):
        try:
            return int(t.name[1:-5], 16)
        except ValueError:
            return None
    return None


def normalize(term: T.Term, image: ProgramImage) -> T.Term:
    """Fold runs of initial memory bytes into named word variables."""
    W = image.width

    def word_var(addr):
        return T.var(image.symbol_at(addr) or f"m{addr:x}", W)

    memo: dict = {}
    for node in T.postorder([term]):
        if node.op == "concat" and node.width == W:
            leaves = _flatten_concat(node)
            addrs = [_input_byte(x) for x in leaves]
            if None not in addrs and all(addrs[i] == addrs[-1] + len(addrs) - 1 - i
                                         for i in range(len(addrs))):
                memo[id(node)] = word_var(addrs[-1])
                continue
        if W == 8 and _input_byte(node) is not None:
            memo[id(node)] = word_var(_input_byte(node))
            continue
        if node.args:
            args = [memo[id(a)] for a in node.args]
            memo[id(node)] = node if all(a is b for a, b in zip(args, node.args)) \
                else T.mk(node.op, args, node.param)
        else:
            memo[id(node)] = node
    return memo[id(term)]


def predicate_term(trace: Trace, occurrence: int, k) -> T.Term:
    """Normalised 'condition register is nonzero' at a conditional step."""
    st = trace.steps[occurrence]
    goal = T.cmp("ne", reg_at(st.instr.operands[0], trace.width), T.const(0, trace.width))
    return normalize(inline_goal(trace, occurrence, goal, k), trace.program)


_TEMPLATES: dict = {}


def family_templates(width: int) -> dict:
    """family id -> normalised predicate term, obtained by running each
    family's code through the same slicing pipeline."""
    if width in _TEMPLATES:
        return _TEMPLATES[width]
    from .obfuscate import FAMILIES, family_code
    out = {}
    for fam in FAMILIES:
        code, reg, _ = family_code(fam)
        src = "\n".join(code + [f"JNZ {reg}, done", "done:", "HALT", ".data",
                                "gx:", ".word 0", "gy:", ".word 0"]) + "\n"
        img, _ = assemble_listing(src, width)
        tr = run(img, {"gx": 3, "gy": 5})
        occ = next(s.index for s in tr.steps if s.instr.op in COND_JUMPS)
        out[fam] = predicate_term(tr, occ, len(tr.steps))
    _TEMPLATES[width] = out
    return out


def synthesize(trace: Trace, site: int, k=16, status: OpacityStatus | None = None
               ) -> SynthesizedPredicate:
    """Rebuild and classify the predicate of an opaque conditional."""
    if status is not None and status.status is not Opacity.OPAQUE:
        raise ValueError(f"{site:#x} is not labelled OPAQUE")
    occs = trace.occurrences(site)
    if not occs or trace.steps[occs[0]].instr.op not in COND_JUMPS:
        raise ValueError(f"no conditional jump executed at {site:#x}")
    term = predicate_term(trace, occs[0], k)
    fam = next((f for f, tpl in family_templates(trace.width).items() if tpl is term), None)
    cone_addrs = set()
    for i in occs:
        cone_addrs |= {trace.steps[j].addr for j in dynamic_cone(trace, i, k)}
    # an instruction also feeding live computation stays alive
    allowed = cone_addrs | {site}
    while True:
        shared = _used_outside(trace, cone_addrs, allowed)
        if not shared:
            break
        cone_addrs -= shared
        allowed -= shared
    return SynthesizedPredicate(site, term, fam, cone_addrs)


# -- liveness -------------------------------------------------------------------

def propagate_liveness(image: ProgramImage, traces, opacity: dict, rets: dict | None = None,
                       syntheses=()) -> dict:
    """addr -> Liveness over everything a recursive traversal reaches.

    Dead code is what recursive traversal reaches but the annotated (sparse)
    traversal does not, so dead regions end where live code re-converges.
    """
    traces = list(traces)
    rec = recursive(image, {image.entry} | {t.steps[0].addr for t in traces if t.steps})
    sp = sparse(image, traces, opacity, rets)
    spurious = set()
    for s in syntheses:
        spurious |= s.contributing
        spurious.add(s.site)
    tags = {}
    for a in rec.addrs | sp.addrs:
        if a not in sp.addrs:
            tags[a] = Liveness.DEAD
        elif a in spurious:
            tags[a] = Liveness.SPURIOUS
        else:
            tags[a] = Liveness.ALIVE
    return tags


def extract_reduced_cfg(image: ProgramImage, traces, tags: dict, opacity: dict,
                        rets: dict | None = None) -> DisasmResult:
    """ALIVE instructions with edges re-routed around spurious nodes; opaque
    conditionals collapse into their feasible edge."""
    sp = sparse(image, list(traces), opacity, rets)
    succ: dict[int, list] = {}
    for s, d, kind in sp.edges:
        succ.setdefault(s, []).append((d, kind))
    ins_at = {a: i for a, i in sp.instructions}

    def forward(d, kind, seen=()):
        # follow spurious nodes (single successor by construction) to live code
        while tags.get(d) is Liveness.SPURIOUS and d not in seen:
            seen = seen + (d,)
            nxt = [e for e in succ.get(d, ()) if tags.get(e[0]) is not Liveness.DEAD]
            if len(nxt) != 1:
                return None
            d = nxt[0][0]
        return (d, kind) if tags.get(d) is Liveness.ALIVE else None

    out = DisasmResult(Method.SPARSE)
    for a, ins in sp.instructions:
        if tags.get(a) is not Liveness.ALIVE:
            continue
        out.instructions.add((a, ins))
        for d, kind in succ.get(a, ()):
            if tags.get(d) is Liveness.DEAD:
                continue
            e = forward(d, kind)
            if e is not None:
                out.edges.add((a, e[0], e[1]))
    return out


def check_well_formed(cfg: DisasmResult) -> list:
    """Non-terminal nodes without successors (empty when well formed)."""
    has_succ = {s for s, _, _ in cfg.edges}
    return [a for a, ins in cfg.instructions
            if ins.op not in (Op.HALT, Op.RET, Op.JMPR) and a not in has_succ]


# -- reassembly -----------------------------------------------------------------

def reassemble(image: ProgramImage, cfg: DisasmResult) -> str:
    """Assembly source for the reduced CFG.

    Code is laid out in address order with explicit jumps where the reduced
    fallthrough no longer follows; data keeps its original addresses so
    constant data pointers stay valid.  Code addresses embedded as
    immediates (PUSHI of a label) are not relocated.
    """
    W = image.width
    code_lo, code_hi = image.code_region
    nodes = sorted(cfg.instructions, key=lambda x: x[0])
    order = [a for a, _ in nodes]
    succ: dict[int, dict] = {}
    for s, d, kind in cfg.edges:
        succ.setdefault(s, {})[kind] = d

    def lab(a):
        return f"L_{a:x}"

    lines = [f".org {code_lo:#x}", f".entry {lab(_entry(image, cfg))}"]
    for n, (a, ins) in enumerate(nodes):
        nxt = order[n + 1] if n + 1 < len(order) else None
        out = succ.get(a, {})
        lines.append(f"{lab(a)}:")
        op = ins.op
        if op is Op.JMP:
            lines.append(f"    JMP {lab(out['jump'])}")
            continue
        if op in COND_JUMPS:
            lines.append(f"    {op.name} r{ins.operands[0]}, {lab(out['jump'])}")
        elif op is Op.CALL:
            lines.append(f"    CALL {lab(out['call'])}")
        else:
            lines.append(f"    {ins}")
        ft = out.get("fallthrough")
        if ft is None and op not in (Op.HALT, Op.RET, Op.JMPR) and "jump" in out \
                and op not in COND_JUMPS:
            ft = out["jump"]
        if ft is not None and ft != nxt:
            lines.append(f"    JMP {lab(ft)}")
    # data region, byte for byte, with its symbols
    data_syms: dict[int, list] = {}
    for name, addr in image.symbols.items():
        if code_hi <= addr < image.end:
            data_syms.setdefault(addr, []).append(name)
    if code_hi < image.end:
        lines.append(".data")
        lines.append(f".org {code_hi:#x}")
        for a in range(code_hi, image.end):
            for name in data_syms.get(a, ()):
                lines.append(f"{name}:")
            lines.append(f"    .byte {image.data[a - image.base]:#x}")
    return "\n".join(lines) + "\n"


def _entry(image: ProgramImage, cfg: DisasmResult) -> int:
    addrs = cfg.addrs
    if image.entry in addrs:
        return image.entry
    return min(addrs)


@dataclass
class Simplification:
    predicates: list
    tags: dict
    cfg: DisasmResult
    source: str

    def counts(self) -> dict:
        out = {str(t): 0 for t in Liveness}
        for t in self.tags.values():
            out[str(t)] += 1
        return out


def simplify(image: ProgramImage, traces, opacity: dict, rets: dict | None = None, k=16
             ) -> Simplification:
    """Synthesis, liveness, reduced CFG and reassembly in one go."""
    traces = list(traces)
    preds = []
    for a, st in sorted(opacity.items()):
        if st.status is Opacity.OPAQUE:
            tr = next(t for t in traces if t.occurrences(a))
            preds.append(synthesize(tr, a, k, st))
    tags = propagate_liveness(image, traces, opacity, rets, preds)
    cfg = extract_reduced_cfg(image, traces, tags, opacity, rets)
    bad = check_well_formed(cfg)
    if bad:
        raise ValueError("reduced CFG has dangling nodes: " + ", ".join(hex(a) for a in bad))
    return Simplification(preds, tags, cfg, reassemble(image, cfg))
