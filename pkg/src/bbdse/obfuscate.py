"""Ground-truth generator: opaque predicates and call stack tampering
injected into assembly sources, with a truth sidecar per sample."""

from __future__ import annotations

import json
import random
import re
from dataclasses import dataclass, field
from pathlib import Path

from .assembler import assemble_listing
from .isa import ProgramImage
from .programs import PROGRAMS, BaseProgram, program_outputs
from .tracer import run

FAMILIES = {
    1: "y < 10 or 2 | x(x-1)",
    2: "7y^2 - 1 != x^2",
    3: "2 | (x + x^2)",
    4: "2 | floor(x^2 / 2)",
    5: "4 | (x^2 + (x+1)^2)",
    6: "2 | x(x+1)",
    7: "7y^2 - 1 != x^2 (shift form)",
    8: "2 / (x^2 + 1) != y^2 + 3",
}
SCHEMES = ("PUSH_RET", "PUSH_CALL_RET_RET")

_LOAD_XY = ["MOVI r5, gx", "LOAD r5, [r5+0]", "MOVI r6, gy", "LOAD r6, [r6+0]"]
_USES_Y = {1, 2, 7, 8}

# predicate computation over x=r5, y=r6; the last element names the register
# holding the outcome and whether that register is always nonzero
_FAMILY_CODE = {
    1: (["MOVI r7, 10", "ULT r7, r6, r7", "MOV r6, r5", "SUBI r6, 1", "MUL r6, r5",
         "ANDI r6, 1", "XORI r6, 1", "OR r7, r6"], "r7", True),
    2: (["MUL r6, r6", "MULI r6, 7", "SUBI r6, 1", "MUL r5, r5", "NE r7, r6, r5"], "r7", True),
    3: (["MOV r6, r5", "MUL r6, r5", "ADD r6, r5", "ANDI r6, 1", "XORI r6, 1"], "r6", True),
    4: (["MUL r5, r5", "SHRI r5, 1", "ANDI r5, 1", "XORI r5, 1"], "r5", True),
    5: (["MOV r6, r5", "ADDI r6, 1", "MUL r6, r6", "MUL r5, r5", "ADD r5, r6", "ANDI r5, 3",
         "MOVI r7, 0", "EQ r7, r5, r7"], "r7", False),
    6: (["MOV r6, r5", "ADDI r6, 1", "MUL r6, r5", "ANDI r6, 1", "XORI r6, 1"], "r6", True),
    7: (["MOV r7, r6", "MUL r7, r6", "MOV r6, r7", "SHLI r6, 3", "SUB r6, r7", "SUBI r6, 1",
         "MUL r5, r5", "SUB r6, r5"], "r6", True),
    8: (["MUL r5, r5", "ADDI r5, 1", "MOVI r7, 2", "UDIV r7, r5", "MUL r6, r6", "ADDI r6, 3",
         "NE r7, r7, r6"], "r7", True),
}


class ObfuscationError(ValueError):
    pass


@dataclass(frozen=True)
class ObfuscationRecord:
    kind: str              # "OP" or "TAMPER"
    family: int | None     # OP family id
    scheme: str | None     # TAMPER scheme
    site: int              # conditional jump (OP) or tampered ret (TAMPER)
    dead_lo: int
    dead_hi: int           # exclusive
    seed: int
    target: int | None = None

    def to_line(self) -> str:
        if self.kind == "OP":
            return f"OP {self.family} {self.site:#x} {self.dead_lo:#x} {self.dead_hi:#x}"
        return f"TAMPER {self.scheme} {self.site:#x} {self.target:#x} {self.dead_lo:#x} {self.dead_hi:#x}"


def family_code(family: int) -> tuple[list, str, bool]:
    if family not in _FAMILY_CODE:
        raise ValueError(f"unknown family {family}")
    body, reg, nonzero = _FAMILY_CODE[family]
    loads = _LOAD_XY if family in _USES_Y else _LOAD_XY[:2]
    return loads + body, reg, nonzero


# -- source handling ----------------------------------------------------------

_LABEL_ONLY = re.compile(r"^\s*([A-Za-z_.$][\w.$]*)\s*:\s*(;.*)?$")
_TERMINATING = ("JMP", "JZ", "JNZ", "JMPR", "CALL", "CALLR", "RET", "HALT")


def _code_span(lines: list) -> int:
    """Index of the ``.data`` line (or len(lines))."""
    for n, ln in enumerate(lines):
        if ln.split(";", 1)[0].strip().lower().startswith(".data"):
            return n
    return len(lines)


def _mnemonic(line: str) -> str | None:
    code = line.split(";", 1)[0].strip()
    if not code or code.startswith(".") or _LABEL_ONLY.match(line):
        return None
    if ":" in code.split()[0]:
        code = code.split(":", 1)[1].strip()
        if not code:
            return None
    return code.split()[0].upper()


def _split_labels(source: str) -> list:
    """Lines with ``label: insn`` split in two so insertions can go between."""
    out = []
    for ln in source.splitlines():
        m = re.match(r"^(\s*)([A-Za-z_][\w.$]*)\s*:\s*(\S.*)$", ln)
        if m and not m.group(3).startswith(";"):
            out.append(f"{m.group(2)}:")
            out.append(f"    {m.group(3)}")
        else:
            out.append(ln)
    return out


def _executed_lines(source: str, width: int, inputs: dict) -> tuple[set, set]:
    """Source line numbers (1-based) of instructions executed on ``inputs``,
    and the set of all instruction line numbers."""
    img, listing = assemble_listing(source, width)
    tr = run(img, inputs)
    executed = {st.addr for st in tr.steps}
    by_addr = {e.addr: e.line_no for e in listing if e.kind == "insn"}
    return {by_addr[a] for a in executed if a in by_addr}, set(by_addr.values())


def block_leaders(lines: list) -> list:
    """Indices of instruction lines that start a basic block."""
    end = _code_span(lines)
    leaders = []
    prev_term = True
    labelled = False
    for n in range(end):
        if _LABEL_ONLY.match(lines[n]):
            labelled = True
            continue
        m = _mnemonic(lines[n])
        if m is None:
            continue
        if prev_term or labelled:
            leaders.append(n)
        prev_term = m in _TERMINATING
        labelled = False
    return leaders


def _junk_lines(rng: random.Random, tag: str, labels: list, back: str) -> list:
    """Dead filler: decodable instructions, sometimes trailing reserved
    bytes, then a jump back to live code."""
    regs = [f"r{i}" for i in range(8)] + ["sp"]
    alu = ["ADD", "SUB", "MUL", "XOR", "OR", "AND", "SHL", "SHR"]
    out = []
    for _ in range(rng.randint(8, 14)):
        kind = rng.random()
        if kind < 0.5:
            out.append(f"{rng.choice(alu)} {rng.choice(regs)}, {rng.choice(regs)}")
        elif kind < 0.68:
            out.append(f"MOVI {rng.choice(regs)}, {rng.randrange(1 << 16):#x}")
        elif kind < 0.8:
            out.append(f"LOAD {rng.choice(regs)}, [{rng.choice(regs)}+{rng.randrange(64)}]")
        elif kind < 0.9:
            out.append(f"STORE [{rng.choice(regs)}+{rng.randrange(64)}], {rng.choice(regs)}")
        elif kind < 0.96 and labels:
            op = rng.choice(["JZ", "JNZ"])
            out.append(f"{op} {rng.choice(regs)}, {rng.choice(labels)}")
        elif labels:
            out.append(f"CALL {rng.choice(labels)}")
    if rng.random() < 0.5:
        # reserved opcode followed by random bytes
        n = rng.randint(1, 4)
        vals = [rng.randrange(0xF0, 0x100)] + [rng.randrange(256) for _ in range(n - 1)]
        out.append(".byte " + ", ".join(f"{v:#x}" for v in vals))
    out.append(f"JMP {back}")
    return [f"    {ln} ;@{tag}" for ln in out]


def _code_labels(lines: list) -> list:
    end = _code_span(lines)
    return [m.group(1) for ln in lines[:end] if (m := _LABEL_ONLY.match(ln))]


def _tag_ranges(listing, prefix: str) -> dict:
    """tag -> (lo, hi) over listing entries carrying it."""
    out: dict[str, list] = {}
    for e in listing:
        for t in e.tags:
            if t.startswith(prefix):
                r = out.setdefault(t, [e.addr, e.addr + e.size])
                r[0] = min(r[0], e.addr)
                r[1] = max(r[1], e.addr + e.size)
    return {t: tuple(r) for t, r in out.items()}


def inject_opaque(source: str, family: int, count: int, seed: int, width: int = 32,
                  inputs: dict | None = None) -> tuple[str, list]:
    """Insert ``count`` opaque predicates of ``family`` at executed block starts.

    Returns the new source and its ground-truth records.
    """
    if count == 0:
        return source, []
    if count < 0:
        raise ValueError("count must be non-negative")
    code, reg, nonzero = family_code(family)
    rng = random.Random(f"op:{family}:{seed}")
    lines = _split_labels(source)
    text = "\n".join(lines) + "\n"
    executed, _ = _executed_lines(text, width, inputs or {})
    cands = [n for n in block_leaders(lines) if n + 1 in executed]
    if len(cands) < count:
        raise ObfuscationError(f"only {len(cands)} insertion points for {count} predicates")
    chosen = sorted(rng.sample(cands, count))
    labels = _code_labels(lines)
    tail = []
    insert: dict[int, list] = {}
    for i, n in enumerate(chosen):
        cont = f"__op_cont_{i}"
        block = [f"    {ln} ;@op_{i}" for ln in code]
        if rng.random() < 0.5:
            # dead taken direction: junk placed after the code
            jump = "JZ" if nonzero else "JNZ"
            junk_label = f"__op_junk_{i}"
            block.append(f"    {jump} {reg}, {junk_label} ;@opjump_{i}")
            tail.append(f"{junk_label}:")
            tail += _junk_lines(rng, f"junk_{i}", labels + [junk_label], cont)
        else:
            # dead fallthrough: junk inline
            jump = "JNZ" if nonzero else "JZ"
            block.append(f"    {jump} {reg}, {cont} ;@opjump_{i}")
            block += _junk_lines(rng, f"junk_{i}", labels, cont)
        block.append(f"{cont}:")
        insert[n] = block
    out = []
    end = _code_span(lines)
    for n, ln in enumerate(lines):
        if n == end:
            out += tail
        if n in insert:
            out += insert[n]
        out.append(ln)
    if end == len(lines):
        out += tail
    new_source = "\n".join(out) + "\n"
    _, listing = assemble_listing(new_source, width)
    jumps = _tag_ranges(listing, "opjump_")
    junk = _tag_ranges(listing, "junk_")
    records = [ObfuscationRecord("OP", family, None, jumps[f"opjump_{i}"][0],
                                 *junk[f"junk_{i}"], seed) for i in range(count)]
    return new_source, records


def inject_tampering(source: str, scheme: str, seed: int, count: int = 2, width: int = 32,
                     inputs: dict | None = None) -> tuple[str, list]:
    """Rewrite executed ``JMP label`` instructions into return-based transfers."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    if count == 0:
        return source, []
    rng = random.Random(f"tamper:{scheme}:{seed}")
    lines = _split_labels(source)
    text = "\n".join(lines) + "\n"
    executed, _ = _executed_lines(text, width, inputs or {})
    end = _code_span(lines)
    sites = [n for n in range(end) if _mnemonic(lines[n]) == "JMP" and n + 1 in executed]
    if not sites:
        raise ObfuscationError("no rewritable jump")
    chosen = sorted(rng.sample(sites, min(count, len(sites))))
    labels = _code_labels(lines)
    gadget = "__tamper_gadget"
    out = []
    for n, ln in enumerate(lines):
        if n == end and scheme == "PUSH_CALL_RET_RET":
            out += [f"{gadget}:", "    RET ;@gadget"]
        if n not in chosen:
            out.append(ln)
            continue
        i = chosen.index(n)
        target = ln.split(";", 1)[0].split()[-1]
        out.append(f"    PUSHI {target} ;@tamper_{i}")
        if scheme == "PUSH_CALL_RET_RET":
            out.append(f"    CALL {gadget} ;@tamper_{i}")
        out.append(f"    RET ;@tret_{i}")
        out += _junk_lines(rng, f"tjunk_{i}", labels, target)
    if end == len(lines) and scheme == "PUSH_CALL_RET_RET":
        out += [f"{gadget}:", "    RET ;@gadget"]
    new_source = "\n".join(out) + "\n"
    img, listing = assemble_listing(new_source, width)
    rets = _tag_ranges(listing, "tret_")
    junk = _tag_ranges(listing, "tjunk_")
    records = []
    for i, n in enumerate(chosen):
        target = lines[n].split(";", 1)[0].split()[-1]
        records.append(ObfuscationRecord("TAMPER", None, scheme, rets[f"tret_{i}"][0],
                                         *junk[f"tjunk_{i}"], seed, img.symbols[target]))
    return new_source, records


# -- corpus -------------------------------------------------------------------

@dataclass
class Sample:
    name: str
    program: str
    seed: int
    source: str
    image: ProgramImage
    records: list
    inputs: list                      # canonical input set
    outputs: tuple
    family: int | None = None
    scheme: str | None = None
    listing: list = field(default_factory=list, repr=False)

    def truth_text(self) -> str:
        lines = [f"# sample {self.name} seed {self.seed}"]
        lines += [r.to_line() for r in self.records]
        return "\n".join(lines) + "\n"

    def tagged(self, prefix: str) -> set:
        """Addresses of listing entries carrying a tag starting with ``prefix``."""
        return {e.addr for e in self.listing if any(t.startswith(prefix) for t in e.tags)}

    def junk_addrs(self) -> set:
        return {e.addr for e in self.listing if e.kind == "insn"
                and any(t.startswith(("junk_", "tjunk_")) for t in e.tags)}

    def legit_addrs(self) -> set:
        """Instructions some real run can execute: everything but the junk."""
        return {e.addr for e in self.listing if e.kind == "insn"} - self.junk_addrs()


def _canonical_inputs(prog: BaseProgram, seed: int, width: int, size=None) -> list:
    return [prog.inputs(seed, width, size)]


def make_sample(prog: BaseProgram, seed: int, family: int | None = None, scheme: str | None = None,
                count: int = 4, width: int = 32, size: int | None = None) -> Sample:
    base = prog.source(width, size)
    inputs = _canonical_inputs(prog, seed, width, size)
    if family is not None:
        src, recs = inject_opaque(base, family, count, seed, width, inputs[0])
        name = f"{prog.name}_f{family}_s{seed}"
    elif scheme is not None:
        src, recs = inject_tampering(base, scheme, seed, min(count, 2), width, inputs[0])
        name = f"{prog.name}_{scheme.lower()}_s{seed}"
    else:
        src, recs = base, []
        name = f"{prog.name}_plain_s{seed}"
    if size is not None:
        name += f"_n{size}"
    img, listing = assemble_listing(src, width)
    return Sample(name, prog.name, seed, src, img, recs, inputs, program_outputs(prog, size),
                  family, scheme, listing)


@dataclass
class CorpusConfig:
    seeds: int = 20
    families: tuple = tuple(range(1, 9))
    schemes: tuple = ()
    count: int = 4
    width: int = 32
    first_seed: int = 0


def build_corpus(programs, config: CorpusConfig | None = None, out_dir=None) -> list:
    """Every (program, seed, family) and (program, seed, scheme) sample.

    With ``out_dir`` each sample is also written as ``.s``, ``.img``,
    ``.truth`` and ``.json`` (canonical inputs and designated outputs).
    """
    cfg = config or CorpusConfig()
    progs = [PROGRAMS[p] if isinstance(p, str) else p for p in programs]
    samples = []
    for prog in progs:
        for seed in range(cfg.first_seed, cfg.first_seed + cfg.seeds):
            for fam in cfg.families:
                samples.append(make_sample(prog, seed, family=fam, count=cfg.count, width=cfg.width))
            for sch in cfg.schemes:
                samples.append(make_sample(prog, seed, scheme=sch, count=cfg.count, width=cfg.width))
    if out_dir is not None:
        write_corpus(samples, out_dir)
    return samples


def write_corpus(samples, out_dir) -> None:
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    manifest = []
    for s in samples:
        (d / f"{s.name}.s").write_text(s.source)
        s.image.save(d / f"{s.name}.img")
        (d / f"{s.name}.truth").write_text(s.truth_text())
        meta = {"name": s.name, "program": s.program, "seed": s.seed, "family": s.family,
                "scheme": s.scheme, "inputs": [_jsonable(i) for i in s.inputs],
                "outputs": [list(o) for o in s.outputs]}
        (d / f"{s.name}.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        manifest.append(s.name)
    (d / "corpus.txt").write_text("".join(n + "\n" for n in manifest))


def _jsonable(inputs: dict) -> dict:
    return {k: ({"hex": bytes(v).hex()} if isinstance(v, (bytes, bytearray)) else v)
            for k, v in inputs.items()}


def _from_json(inputs: dict) -> dict:
    return {k: (bytes.fromhex(v["hex"]) if isinstance(v, dict) else v) for k, v in inputs.items()}


def read_truth(path) -> list:
    recs = []
    seed = 0
    for ln in Path(path).read_text().splitlines():
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "#":
            if "seed" in parts:
                seed = int(parts[parts.index("seed") + 1])
            continue
        if parts[0] == "OP":
            recs.append(ObfuscationRecord("OP", int(parts[1]), None, int(parts[2], 0),
                                          int(parts[3], 0), int(parts[4], 0), seed))
        elif parts[0] == "TAMPER":
            recs.append(ObfuscationRecord("TAMPER", None, parts[1], int(parts[2], 0),
                                          int(parts[4], 0), int(parts[5], 0), seed,
                                          int(parts[3], 0)))
        else:
            raise ValueError(f"bad truth line: {ln!r}")
    return recs


def load_sample(path) -> tuple[ProgramImage, list, dict]:
    """Image, truth records and metadata of a written sample (path without suffix)."""
    p = Path(path)
    img = ProgramImage.load(p.with_suffix(".img"))
    recs = read_truth(p.with_suffix(".truth")) if p.with_suffix(".truth").exists() else []
    meta = json.loads(p.with_suffix(".json").read_text()) if p.with_suffix(".json").exists() else {}
    return img, recs, meta


def read_corpus(directory) -> list:
    """Samples listed in ``corpus.txt`` (or every ``.img``) under ``directory``.

    When the ``.s`` source is present it is reassembled to recover the
    listing and must reproduce the stored image byte for byte.
    """
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory {d} not found")
    manifest = d / "corpus.txt"
    names = manifest.read_text().split() if manifest.exists() else sorted(p.stem for p in d.glob("*.img"))
    out = []
    for name in names:
        img, recs, meta = load_sample(d / name)
        listing = []
        src_path = d / f"{name}.s"
        source = ""
        if src_path.exists():
            source = src_path.read_text()
            img2, listing = assemble_listing(source, img.width)
            if bytes(img2.data) != bytes(img.data):
                raise ValueError(f"{name}: source does not reassemble to the stored image")
        inputs = [_from_json(i) for i in meta.get("inputs", [{}])] or [{}]
        outputs = tuple(tuple(o) if isinstance(o, list) else o for o in meta.get("outputs", []))
        out.append(Sample(name, meta.get("program", name), meta.get("seed", 0), source, img, recs,
                          inputs, outputs, meta.get("family"), meta.get("scheme"), listing))
    return out


# -- hand-built samples -------------------------------------------------------

ASPACK_DECOY = """\
; a conditional that looks opaque statically: the immediate of the MOVI is
; patched to 1 on the first pass, so the second pass takes the other branch
_start:
    MOVI r1, 0
again:
patch:
    MOVI r0, 0
    JNZ r0, second
    MOVI r2, 1
    MOVI r3, patch+2
    STORE [r3+0], r2
    ADDI r1, 1
    JMP again
second:
    MOV r0, r1
    HALT
"""

ACPROTECT_CHAIN = """\
; mutually exclusive conditional pair on the same operands
_start:
    MOVI r2, a
    LOAD r0, [r2+0]
    LOAD r1, [r2+{WB}]
    ULT r3, r0, r1
    JNZ r3, out
    UGE r3, r0, r1
    JNZ r3, out
    .byte 0xff, 0x13, 0x37
out:
    HALT
.data
a:
    .word 0, 0
"""

ACPROTECT_INPLACE = """\
; return address adjusted in place by the callee
_start:
    CALL f
    .byte 0xf7, 0xf7, 0xf7, 0xf7, 0xf7, 0xf7, 0xf7, 0xf7, 0xf7
    MOVI r0, 1
    HALT
f:
    LOAD r1, [sp+0]
    ADDI r1, 9
    STORE [sp+0], r1
    RET
"""

# push a target, call, drop the return address, return to the target
TAMPER_GADGET = """\
_start:
    PUSHI target
    CALL g
    .byte 0xf0, 0xf1
g:
    ADDI sp, {WB}
    RET
    .byte 0xf2
target:
    MOVI r0, 42
    HALT
"""


def hand_sample(name: str, width: int = 32) -> str:
    table = {"aspack_decoy": ASPACK_DECOY, "acprotect_chain": ACPROTECT_CHAIN,
             "acprotect_inplace": ACPROTECT_INPLACE, "tamper_gadget": TAMPER_GADGET}
    return table[name].replace("{WB}", str(width // 8))
