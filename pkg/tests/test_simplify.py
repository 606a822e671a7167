import pytest

from bbdse.assembler import assemble, assemble_listing
from bbdse.detect import Opacity, OpacityStatus
from bbdse.estimators import OpacityDetector, StackTamperingDetector
from bbdse.isa import Op
from bbdse.obfuscate import make_sample
from bbdse.programs import PROGRAMS, observe
from bbdse.simplify import Liveness, check_well_formed, simplify, synthesize
from bbdse.tracer import run

from conftest import requires_solver

pytestmark = requires_solver


def _analyse(img, traces):
    op = OpacityDetector().fit(traces)
    st = StackTamperingDetector().fit(traces)
    return op.reports_, st.reports_


def _simplified(sample):
    tr = run(sample.image, sample.inputs[0])
    opacity, rets = _analyse(sample.image, [tr])
    return tr, opacity, simplify(sample.image, [tr], opacity, rets)


def test_family2_is_recognised():
    s = make_sample(PROGRAMS["simple_if"], 5, family=2)
    _, _, res = _simplified(s)
    assert [p.matched_family for p in res.predicates] == [2] * 4
    text = res.predicates[0].text
    # 7y^2 - 1 against x^2
    assert "gx" in text and "gy" in text and "7" in text


def test_unmatched_predicate_still_has_a_term():
    # x^3 - x is always even; not one of the templates
    src = """
_start:
    MOVI r5, gx
    LOAD r5, [r5+0]
    MOV r6, r5
    MUL r6, r5
    MUL r6, r5
    SUB r6, r5
    ANDI r6, 1
    JNZ r6, bad
    MOVI r0, 1
    HALT
bad:
    .byte 0xff
.data
gx:
    .word 0
"""
    img = assemble(src, 32)
    tr = run(img, {"gx": 12345})
    (site,) = [s.addr for s in tr.steps if s.instr.op is Op.JNZ]
    st = OpacityDetector().fit([tr]).reports_[site]
    assert st.status is Opacity.OPAQUE
    p = synthesize(tr, site, 16, st)
    assert p.matched_family is None and "gx" in p.text
    assert p.contributing == {s.addr for s in tr.steps[:7]}


def test_synthesize_rejects_non_opaque():
    tr = run(assemble("JZ r0, e\nHALT\ne:\nHALT\n", 32))
    with pytest.raises(ValueError):
        synthesize(tr, 0x1000, 16, OpacityStatus(0x1000, Opacity.GENUINE))
    with pytest.raises(ValueError):
        synthesize(tr, 0x2000, 16)


@pytest.mark.parametrize("prog, family", [("bin_search", 1), ("mat_mult", 4), ("dispatch", 7),
                                          ("bubble_sort", 5)])
def test_contributing_set_is_the_injected_code(prog, family):
    s = make_sample(PROGRAMS[prog], 2, family=family)
    _, _, res = _simplified(s)
    spurious = {a for a, t in res.tags.items() if t is Liveness.SPURIOUS}
    assert spurious == s.tagged("op")
    dead = {a for a, t in res.tags.items() if t is Liveness.DEAD}
    assert dead and dead <= s.junk_addrs()


@pytest.mark.parametrize("prog", sorted(PROGRAMS))
def test_plain_programs_stay_alive(prog):
    img = PROGRAMS[prog].image(32)
    tr = run(img, PROGRAMS[prog].inputs(0, 32))
    opacity, rets = _analyse(img, [tr])
    res = simplify(img, [tr], opacity, rets)
    assert set(res.tags.values()) == {Liveness.ALIVE}
    assert len(res.cfg) == len([a for a in res.tags])


@pytest.mark.parametrize("prog", sorted(PROGRAMS))
def test_reduced_program_matches_the_original(prog):
    p = PROGRAMS[prog]
    s = make_sample(p, 6, family=3)
    tr, _, res = _simplified(s)
    _, base = assemble_listing(p.source(32), 32)
    assert len(res.cfg) == sum(e.kind == "insn" for e in base)
    assert check_well_formed(res.cfg) == []
    tr2 = run(assemble(res.source, 32), s.inputs[0])
    assert tr2.halted and observe(tr2, s.outputs) == observe(tr, s.outputs)


def test_opaque_jump_collapses_to_one_edge():
    s = make_sample(PROGRAMS["simple_if"], 0, family=6)
    _, opacity, res = _simplified(s)
    sites = [a for a, st in opacity.items() if st.status is Opacity.OPAQUE]
    assert sites and all(a not in res.cfg.addrs for a in sites)
    # every surviving conditional keeps both edges
    for a, ins in res.cfg.instructions:
        if ins.op.name in ("JZ", "JNZ"):
            assert len({k for s_, _, k in res.cfg.edges if s_ == a}) == 2
