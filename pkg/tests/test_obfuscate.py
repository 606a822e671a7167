import random

import pytest

from bbdse.assembler import assemble
from bbdse.obfuscate import (FAMILIES, SCHEMES, ObfuscationError, build_corpus, CorpusConfig,
                             family_code, inject_opaque, inject_tampering, make_sample,
                             read_corpus, write_corpus)
from bbdse.programs import PROGRAMS, observe
from bbdse.tracer import run

SRC = PROGRAMS["simple_if"].source(32)
INP = PROGRAMS["simple_if"].inputs(0, 32)


def _predicate_value(family, x, y, width):
    code, reg, _ = family_code(family)
    src = "\n".join(code) + "\nHALT\n.data\ngx:\n.word 0\ngy:\n.word 0\n"
    tr = run(assemble(src, width), {"gx": x, "gy": y})
    return tr.final_regs()[int(reg[1:])]


@pytest.mark.parametrize("family", sorted(FAMILIES))
def test_family_outcome_is_constant(family):
    rng = random.Random(family)
    _, _, nonzero = family_code(family)
    for _ in range(60):
        x, y = rng.randrange(1 << 32), rng.randrange(1 << 32)
        assert (_predicate_value(family, x, y, 32) != 0) == nonzero


def test_family5_divisible_direction_is_dead():
    # plain integer oracle over every 8-bit x
    assert {(x * x + (x + 1) ** 2) % 4 for x in range(256)} == {1}
    _, reg, nonzero = family_code(5)
    assert not nonzero
    assert all(_predicate_value(5, x, 0, 8) == 0 for x in range(256))


def test_family2_mirrors_the_squaring_listing():
    code, _, _ = family_code(2)
    ops = [c.split()[0] for c in code]
    assert ops.count("MUL") == 2 and "MULI" in ops and "SUBI" in ops


def test_count_zero_is_identity():
    assert inject_opaque(SRC, 2, 0, 1) == (SRC, [])
    assert inject_tampering(SRC, "PUSH_RET", 1, count=0) == (SRC, [])


def test_too_many_predicates():
    with pytest.raises(ObfuscationError):
        inject_opaque("HALT\n", 1, 3, 0)


def test_no_rewritable_jump():
    with pytest.raises(ObfuscationError):
        inject_tampering("MOVI r0, 1\nHALT\n", "PUSH_RET", 0)
    with pytest.raises(ValueError):
        inject_tampering(SRC, "BOGUS", 0)


def test_push_ret_shape():
    src, recs = inject_tampering(SRC, "PUSH_RET", 3, count=1, inputs=INP)
    lines = [ln.split(";")[0].split() for ln in src.splitlines()]
    i = next(n for n, l in enumerate(lines) if l and l[0] == "PUSHI")
    assert lines[i + 1] == ["RET"]
    assert recs[0].scheme == "PUSH_RET"


def test_push_call_ret_ret_shape():
    src, recs = inject_tampering(SRC, "PUSH_CALL_RET_RET", 3, count=1, inputs=INP)
    lines = [ln.split(";")[0].split() for ln in src.splitlines()]
    i = next(n for n, l in enumerate(lines) if l and l[0] == "PUSHI")
    assert lines[i + 1][0] == "CALL" and lines[i + 2] == ["RET"]
    g = lines[i + 1][1]
    j = next(n for n, l in enumerate(lines) if l == [f"{g}:"])
    assert lines[j + 1] == ["RET"]


@pytest.mark.parametrize("prog", sorted(PROGRAMS))
@pytest.mark.parametrize("kind", [("f", 2), ("f", 5), ("f", 8), ("s", "PUSH_RET"),
                                  ("s", "PUSH_CALL_RET_RET")])
def test_obfuscation_preserves_outputs(prog, kind):
    p = PROGRAMS[prog]
    kw = {"family": kind[1]} if kind[0] == "f" else {"scheme": kind[1]}
    s = make_sample(p, 4, **kw)
    plain = run(p.image(32), s.inputs[0])
    obf = run(s.image, s.inputs[0])
    assert obf.halted and observe(obf, s.outputs) == observe(plain, s.outputs)


@pytest.mark.parametrize("prog", sorted(PROGRAMS))
def test_dead_regions_never_execute(prog):
    p = PROGRAMS[prog]
    for fam in (1, 3, 6, 7):
        s = make_sample(p, fam, family=fam)
        canon = {st.addr for st in run(s.image, s.inputs[0]).steps}
        assert all(r.site in canon for r in s.records)
        for seed in range(4):
            hit = {st.addr for st in run(s.image, p.inputs(100 + seed, 32)).steps}
            for r in s.records:
                assert not any(r.dead_lo <= a < r.dead_hi for a in hit)


def test_tamper_records_target_and_dead_site():
    s = make_sample(PROGRAMS["dispatch"], 2, scheme="PUSH_RET")
    tr = run(s.image, s.inputs[0])
    for r in s.records:
        outs = {st.jump_target for st in tr.steps if st.addr == r.site}
        assert outs == {r.target}
        assert not any(r.dead_lo <= st.addr < r.dead_hi for st in tr.steps)


def test_corpus_is_deterministic(tmp_path):
    cfg = CorpusConfig(seeds=2, families=(2, 5), schemes=("PUSH_RET",))
    build_corpus(["simple_if"], cfg, tmp_path / "a")
    build_corpus(["simple_if"], cfg, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert len(names) == 6 * 4 + 1
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()


def test_empty_program_list(tmp_path):
    assert build_corpus([], CorpusConfig(seeds=3), tmp_path) == []
    assert read_corpus(tmp_path) == []


def test_corpus_round_trip(tmp_path):
    samples = build_corpus(["dispatch", "bubble_sort"], CorpusConfig(seeds=1, families=(4,),
                                                                     schemes=SCHEMES))
    write_corpus(samples, tmp_path)
    back = read_corpus(tmp_path)
    assert [b.name for b in back] == [s.name for s in samples]
    for a, b in zip(samples, back):
        assert bytes(a.image.data) == bytes(b.image.data)
        assert a.records == b.records
        assert a.inputs == b.inputs and a.outputs == b.outputs
        assert a.junk_addrs() == b.junk_addrs()


def test_missing_corpus_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_corpus(tmp_path / "nope")
