"""Command-line driver: ``bbdse <subcommand> ...``.

Exit codes: 0 on success (finding obfuscation is a result, not an error),
1 on operational failure (missing solver, malformed file), 2 on usage errors.
Machine-readable results are line-delimited JSON records.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import __version__
from .assembler import AssemblyError, assemble_listing
from .detect import (Opacity, _aggregate, classify_rets, code_stores, detect_all_opaque,
                     jump_closure, opaque_constant, selfmod_conditional, write_records)
from .disasm import Method, dynamic_disasm, linear_sweep, perfect_set, recursive, score, sparse, to_dot
from .estimators import _merge_opacity
from .isa import ProgramImage
from .obfuscate import (FAMILIES, SCHEMES, CorpusConfig, ObfuscationError, build_corpus,
                        inject_opaque, inject_tampering, read_corpus)
from .programs import PROGRAMS
from .solver import SOLVER_ENV, Solver, SolverError
from .tracer import read_trace, run, write_trace

log = logging.getLogger("bbdse")


class UsageError(Exception):
    pass


def _int(text: str) -> int:
    return int(text, 0)


def _klist(text: str) -> list:
    try:
        ks = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad k list {text!r}") from None
    if not ks or ks[0] <= 0:
        raise argparse.ArgumentTypeError("k values must be positive")
    return ks


def _positive(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("-k", type=_positive, default=16, help="backward bound (default 16)")
    p.add_argument("--timeout-ms", type=_positive, default=5000, help="per-query solver timeout")
    p.add_argument("--width", type=int, choices=(8, 16, 32), default=32)
    p.add_argument("--solver", help=f"SMT-LIB2 solver binary (default ${SOLVER_ENV} or z3 on PATH)")
    p.add_argument("--jobs", type=_positive, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=[m.value for m in Method], default="sparse")
    p.add_argument("--bound-metric", choices=("steps", "defuse"), default="steps")
    p.add_argument("-o", "--output", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _traced(p: argparse.ArgumentParser) -> None:
    p.add_argument("image", help="program image (.img)")
    p.add_argument("--trace", action="append", default=[], help="trace file (repeatable)")
    p.add_argument("--input", action="append", default=[], metavar="NAME=VALUE",
                   help="run the image with this input instead of reading a trace")
    p.add_argument("--inputs-json", help="JSON object of inputs used to run the image")


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="bbdse", description="Backward-bounded DSE toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="cmd", metavar="subcommand")
    sub.required = True

    p = sub.add_parser("asm", parents=[common], help="assemble a source file")
    p.add_argument("source")
    p.add_argument("--listing", help="write the listing here")

    p = sub.add_parser("run", parents=[common], help="execute an image and write its trace")
    _traced(p)
    p.add_argument("--max-steps", type=_positive, default=100_000)

    p = sub.add_parser("obfuscate", parents=[common], help="inject opaque predicates or tampering")
    p.add_argument("source", nargs="?", help="assembly source (omit with --corpus)")
    p.add_argument("--family", type=int, choices=sorted(FAMILIES))
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--count", type=_positive, default=4)
    p.add_argument("--inputs-json", help="inputs used to pick executed insertion points")
    p.add_argument("--corpus", action="store_true", help="build the ground-truth corpus into -o")
    p.add_argument("--programs", default=",".join(PROGRAMS))
    p.add_argument("--seeds", type=_positive, default=20)
    p.add_argument("--families", default="1,2,3,4,5,6,7,8")
    p.add_argument("--schemes", default="", help="comma-separated tampering schemes")

    p = sub.add_parser("analyze-op", parents=[common], help="opaque predicate detection")
    _traced(p)
    p = sub.add_parser("analyze-stack", parents=[common], help="call stack tampering")
    _traced(p)
    p.add_argument("--k-max", type=_positive, default=10_000)
    p = sub.add_parser("analyze-const", parents=[common], help="is a register constant here")
    _traced(p)
    p.add_argument("--at", type=int, required=True, help="trace step index")
    p.add_argument("--reg", required=True)
    p = sub.add_parser("analyze-jumps", parents=[common], help="indirect jump target closure")
    _traced(p)
    p.add_argument("--addr", type=_int, required=True)
    p = sub.add_parser("analyze-selfmod", parents=[common], help="code-region stores")
    _traced(p)

    p = sub.add_parser("disasm", parents=[common], help="disassemble an image")
    _traced(p)
    p.add_argument("--source", help="assembly source with tags, enables metrics")
    p.add_argument("--dot", help="write the CFG in DOT format")

    p = sub.add_parser("simplify", parents=[common], help="reduced CFG and reassembly")
    _traced(p)
    p.add_argument("--dot", help="write the tagged CFG in DOT format")

    p = sub.add_parser("ksweep", parents=[common], help="detection table over a corpus")
    p.add_argument("corpus")
    p.add_argument("--ks", type=_klist, default=[2, 4, 8, 12, 16, 24, 32])
    p.add_argument("--limit", type=_positive, help="only the first N samples")

    p = sub.add_parser("compare-dse", parents=[common], help="forward vs backward on a trace")
    _traced(p)
    p.add_argument("--methods", default="forward,backward,bbdse")

    p = sub.add_parser("report", parents=[common], help="summarise results files")
    p.add_argument("results", nargs="+")
    return ap


# -- helpers ------------------------------------------------------------------

def _parse_value(text: str):
    text = text.strip()
    if text.startswith("["):
        return [int(x, 0) if isinstance(x, str) else x for x in json.loads(text)]
    if "," in text:
        return [int(x, 0) for x in text.split(",")]
    return int(text, 0)


def _inputs(args) -> dict:
    out = {}
    if getattr(args, "inputs_json", None):
        out.update(json.loads(Path(args.inputs_json).read_text()))
    for item in getattr(args, "input", []) or []:
        if "=" not in item:
            raise UsageError(f"--input expects NAME=VALUE, got {item!r}")
        name, value = item.split("=", 1)
        try:
            out[name.strip()] = _parse_value(value)
        except ValueError:
            raise UsageError(f"bad input value {value!r}") from None
    return out


def _load_image(path) -> ProgramImage:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    return ProgramImage.load(p)


def _traces(args, image: ProgramImage) -> list:
    traces = []
    for t in args.trace:
        if not Path(t).exists():
            raise UsageError(f"no such file: {t}")
        traces.append(read_trace(t, image))
    if not traces:
        traces.append(run(image, _inputs(args), max_steps=getattr(args, "max_steps", 100_000)))
    return traces


def _solver(args) -> Solver:
    return Solver(args.solver, args.timeout_ms / 1000)


def _emit(args, records) -> None:
    records = list(records)
    if args.output:
        write_records(records, args.output)
    else:
        for r in records:
            print(json.dumps(r.to_record() if hasattr(r, "to_record") else r, sort_keys=True))


def _summary(text: str) -> None:
    print(text, file=sys.stderr)


# -- subcommands --------------------------------------------------------------

def cmd_asm(args) -> int:
    src = Path(args.source)
    if not src.exists():
        raise UsageError(f"no such file: {args.source}")
    img, listing = assemble_listing(src.read_text(), args.width)
    out = args.output or str(src.with_suffix(".img"))
    img.save(out)
    if args.listing:
        Path(args.listing).write_text("".join(
            f"{e.addr:#06x} {e.kind:4} {e.text}{'  ;@' + ','.join(sorted(e.tags)) if e.tags else ''}\n"
            for e in listing))
    _summary(f"{out}: {len(img.data)} bytes, entry {img.entry:#x}")
    return 0


def cmd_run(args) -> int:
    img = _load_image(args.image)
    tr = run(img, _inputs(args), max_steps=args.max_steps)
    out = args.output or str(Path(args.image).with_suffix(".tr"))
    write_trace(tr, out)
    _summary(f"{out}: {len(tr)} steps{' fault ' + tr.fault if tr.fault else ''}")
    return 0


def cmd_obfuscate(args) -> int:
    if args.corpus:
        if not args.output:
            raise UsageError("--corpus needs -o DIR")
        progs = [p for p in args.programs.split(",") if p]
        bad = [p for p in progs if p not in PROGRAMS]
        if bad:
            raise UsageError(f"unknown programs: {', '.join(bad)}")
        fams = tuple(int(f) for f in args.families.split(",") if f)
        schemes = tuple(s for s in args.schemes.split(",") if s)
        if any(f not in FAMILIES for f in fams) or any(s not in SCHEMES for s in schemes):
            raise UsageError("unknown family or scheme")
        cfg = CorpusConfig(args.seeds, fams, schemes, args.count, args.width, args.seed)
        samples = build_corpus(progs, cfg, args.output)
        _summary(f"{args.output}: {len(samples)} samples")
        return 0
    if not args.source or not Path(args.source).exists():
        raise UsageError("obfuscate needs an existing source file or --corpus")
    if (args.family is None) == (args.scheme is None):
        raise UsageError("pass exactly one of --family or --scheme")
    source = Path(args.source).read_text()
    inputs = json.loads(Path(args.inputs_json).read_text()) if args.inputs_json else {}
    if args.family is not None:
        new, recs = inject_opaque(source, args.family, args.count, args.seed, args.width, inputs)
    else:
        new, recs = inject_tampering(source, args.scheme, args.seed, args.count, args.width, inputs)
    out = Path(args.output or Path(args.source).with_suffix(".obf.s"))
    out.write_text(new)
    img, _ = assemble_listing(new, args.width)
    img.save(out.with_suffix(".img"))
    out.with_suffix(".truth").write_text(
        f"# sample {out.stem} seed {args.seed}\n" + "".join(r.to_line() + "\n" for r in recs))
    _summary(f"{out}: {len(recs)} injected")
    return 0


def cmd_analyze_op(args) -> int:
    img = _load_image(args.image)
    records = []
    with _solver(args) as s:
        for tr in _traces(args, img):
            res = detect_all_opaque(tr, args.k, s, args.timeout_ms / 1000, args.bound_metric)
            records += list(res.values())
    c = Counter(str(r.status) for r in records)
    _emit(args, records)
    _summary(" ".join(f"{k}={v}" for k, v in sorted(c.items())) or "no conditional jumps")
    return 0


def cmd_analyze_stack(args) -> int:
    img = _load_image(args.image)
    records = []
    with _solver(args) as s:
        for tr in _traces(args, img):
            records += list(classify_rets(tr, args.k_max, s, args.timeout_ms / 1000).values())
    _emit(args, records)
    c = Counter(str(r.label) for r in records)
    _summary(" ".join(f"{k}={v}" for k, v in sorted(c.items())) or "no ret executed")
    return 0


def cmd_analyze_const(args) -> int:
    img = _load_image(args.image)
    tr = _traces(args, img)[0]
    if not 0 <= args.at < len(tr):
        raise UsageError(f"--at outside the trace (0..{len(tr) - 1})")
    with _solver(args) as s:
        f = opaque_constant(tr, args.at, args.reg, args.k, s)
    _emit(args, [f])
    return 0


def cmd_analyze_jumps(args) -> int:
    img = _load_image(args.image)
    tr = _traces(args, img)[0]
    with _solver(args) as s:
        try:
            f = jump_closure(tr, args.addr, args.k, s)
        except ValueError as e:
            raise UsageError(str(e)) from None
    _emit(args, [f])
    return 0


def cmd_analyze_selfmod(args) -> int:
    img = _load_image(args.image)
    out = []
    with _solver(args) as s:
        for tr in _traces(args, img):
            lo, hi = img.code_region
            for i in code_stores(tr):
                if any(lo <= a < hi for a in tr.steps[i].effective_addrs):
                    out.append(selfmod_conditional(tr, i, args.k, s))
    _emit(args, out)
    _summary(f"{len(out)} code-region stores")
    return 0


def _analyses(args, img, traces):
    per, rets = [], {}
    with _solver(args) as s:
        for tr in traces:
            per.append(detect_all_opaque(tr, args.k, s, args.timeout_ms / 1000, args.bound_metric))
            for a, rep in classify_rets(tr, 10_000, s, args.timeout_ms / 1000).items():
                if a in rets:
                    rets[a].occurrences += rep.occurrences
                    rets[a].targets |= rep.targets
                else:
                    rets[a] = rep
    for rep in rets.values():
        rep.label = _aggregate(rep)
    return _merge_opacity(per, traces), rets


def cmd_disasm(args) -> int:
    img = _load_image(args.image)
    mode = Method(args.mode)
    if mode is Method.LINEAR:
        res, traces = linear_sweep(img), []
    elif mode is Method.RECURSIVE:
        res, traces = recursive(img), []
    else:
        traces = _traces(args, img)
        if mode is Method.DYNAMIC:
            res = dynamic_disasm(traces)
        else:
            res = sparse(img, traces, *_analyses(args, img, traces))
    if args.dot:
        Path(args.dot).write_text(to_dot(res, name=mode.value))
    records = [{"kind": "insn", "addr": a, "text": str(i)} for a, i in sorted(res.instructions,
                                                                             key=lambda x: x[0])]
    if args.source:
        _, listing = assemble_listing(Path(args.source).read_text(), img.width)
        junk = {e.addr for e in listing if e.kind == "insn"
                and any(t.startswith(("junk_", "tjunk_")) for t in e.tags)}
        legit = {e.addr for e in listing if e.kind == "insn"} - junk
        m = score(res, perfect_set(img, legit, traces))
        records.append(m.to_record())
        _summary(f"{mode}: {m.count} instructions, perfect {m.perfect}, over {m.over}, under {m.under}")
    else:
        _summary(f"{mode}: {len(res)} instructions")
    _emit(args, records)
    return 0


def cmd_simplify(args) -> int:
    from .simplify import simplify
    img = _load_image(args.image)
    traces = _traces(args, img)
    opacity, rets = _analyses(args, img, traces)
    res = simplify(img, traces, opacity, rets, args.k)
    out = Path(args.output or Path(args.image).with_suffix(".reduced.s"))
    out.write_text(res.source)
    if args.dot:
        Path(args.dot).write_text(to_dot(res.cfg, {a: str(t) for a, t in res.tags.items()},
                                         "reduced"))
    for p in res.predicates:
        print(json.dumps(p.to_record(), sort_keys=True))
    _summary(f"{out}: {len(res.cfg)} instructions; "
             + " ".join(f"{k}={v}" for k, v in sorted(res.counts().items())))
    return 0


def cmd_ksweep(args) -> int:
    from .harness import ksweep
    try:
        samples = read_corpus(args.corpus)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None
    if args.limit:
        samples = samples[:args.limit]
    rows = ksweep(samples, args.ks, args.timeout_ms / 1000, args.solver, args.jobs,
                  args.bound_metric)
    _emit(args, [r.to_record() for r in rows])
    _summary(f"{'k':>4} {'det':>6} {'FN':>5} {'FP':>5} {'TO':>4} {'time':>9} {'avg/q':>8}")
    for r in rows:
        _summary(f"{r.k:>4} {r.detected:>6} {r.fn:>5} {r.fp:>5} {r.timeouts:>4} "
                 f"{r.solver_time:>9.3f} {r.avg_query:>8.4f}")
    return 0


def cmd_compare_dse(args) -> int:
    from .harness import compare_dse
    img = _load_image(args.image)
    methods = tuple(m for m in args.methods.split(",") if m)
    if not set(methods) <= {"forward", "backward", "bbdse"}:
        raise UsageError(f"unknown method in {args.methods!r}")
    tr = _traces(args, img)[0]
    with _solver(args) as s:
        res = compare_dse(tr, args.k, args.timeout_ms / 1000, s, methods)
    _emit(args, [r.to_record() for r in res.rows])
    for r in res.rows:
        _summary(f"{r.method:>12} SAT={r.sat} UNSAT={r.unsat} TO={r.timeout} {r.wall:.2f}s")
    return 0


def cmd_report(args) -> int:
    counts: Counter = Counter()
    for path in args.results:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"no such file: {path}")
        for ln in p.read_text().splitlines():
            if ln.strip():
                rec = json.loads(ln)
                counts[(rec.get("kind", "?"), str(rec.get("label", "")))] += 1
    for (kind, label), n in sorted(counts.items()):
        print(f"{kind:12} {label:40} {n}")
    return 0


COMMANDS = {
    "asm": cmd_asm, "run": cmd_run, "obfuscate": cmd_obfuscate,
    "analyze-op": cmd_analyze_op, "analyze-stack": cmd_analyze_stack,
    "analyze-const": cmd_analyze_const, "analyze-jumps": cmd_analyze_jumps,
    "analyze-selfmod": cmd_analyze_selfmod, "disasm": cmd_disasm, "simplify": cmd_simplify,
    "ksweep": cmd_ksweep, "compare-dse": cmd_compare_dse, "report": cmd_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.cmd](args)
    except UsageError as e:
        parser.error(str(e))        # exits with 2
    except (SolverError, AssemblyError, ObfuscationError, ValueError, OSError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
