import math
import random

import pytest

from bbdse import terms as T
from bbdse.formula import (branch_condition, concrete_valuation, forward_path_predicate, holds,
                           inline_goal, negate_goal, reg_at, slice_at)
from bbdse.isa import COND_JUMPS
from bbdse.obfuscate import make_sample
from bbdse.programs import PROGRAMS
from bbdse.solver import brute_check
from bbdse.tracer import run

from conftest import SQUARES, SQUARES_JZ, trace_of


def test_goal_right_after_movi():
    tr = trace_of("MOVI r0, 0\nHALT\n")
    f = slice_at(tr, 1, T.cmp("ne", reg_at("r0", 32), T.const(0, 32)), 1)
    assert f.cut_inputs == frozenset()
    assert f.equations == (("r0_0", T.const(0, 32)),)
    assert f.goal is T.cmp("ne", T.var("r0_0", 32), T.const(0, 32))


def _squares(width=32, x=3, y=5):
    return trace_of(SQUARES, width, {"r0": x, "r1": y})


def test_squares_slice_reconstructs_both_sides():
    W = 32
    tr = _squares(W)
    st = tr.steps[SQUARES_JZ]
    f = slice_at(tr, SQUARES_JZ, branch_condition(st, W, taken=True), 16)
    assert f.cut_inputs == {"r0_init", "r1_init"}
    defs = dict(f.equations)
    rng = random.Random(1)
    mask = (1 << W) - 1
    for _ in range(50):
        x, y = rng.randrange(1 << W), rng.randrange(1 << W)
        env = {"r0_init": x, "r1_init": y}
        memo = {}
        for name, rhs in f.equations:
            env[name] = T.evaluate(rhs, env, memo)
        # the two compared sides, independently of the slicer
        assert env[_last_def(defs, "r6")] == (7 * y * y - 1) & mask
        assert env[_last_def(defs, "r5")] == (x * x) & mask


def _last_def(defs, reg):
    return max((n for n in defs if n.startswith(reg + "_")), key=lambda n: int(n.split("_")[1]))


def test_squares_small_k_is_under_constrained():
    tr = _squares(8)
    st = tr.steps[SQUARES_JZ]
    full = slice_at(tr, SQUARES_JZ, branch_condition(st, 8, taken=True), 16)
    short = slice_at(tr, SQUARES_JZ, branch_condition(st, 8, taken=True), 2)
    assert brute_check(full).kind == "UNSAT"
    assert "r0_init" not in short.cut_inputs and len(short.cut_inputs) == 2
    assert brute_check(short).kind == "SAT"


def test_forward_predicate_without_conditionals():
    tr = trace_of("MOVI r1, 4\nADD r0, r1\nHALT\n", inputs={"r0": 1})
    f = forward_path_predicate(tr, len(tr))
    assert f.conditions == ()
    assert holds(f, concrete_valuation(tr, f))


def test_forward_predicate_records_taken_jnz():
    tr = trace_of("ANDI r0, 1\nJNZ r0, t\nHALT\nt:\nHALT\n", inputs={"r0": 3})
    f = forward_path_predicate(tr, len(tr))
    assert len(f.conditions) == 1
    (c,) = f.conditions
    env = concrete_valuation(tr, f)
    assert T.evaluate(c, env) == 1
    env["r0_init"] = 2
    memo = {}
    for name, rhs in f.equations:
        env[name] = T.evaluate(rhs, env, memo)
    assert T.evaluate(c, env) == 0


def test_forward_grows_while_bounded_slice_does_not():
    s = make_sample(PROGRAMS["simple_if"], 0, family=3, size=60)
    tr = run(s.image, s.inputs[0])
    conds = [st.index for st in tr.steps if st.instr.op in COND_JUMPS]
    early, late = conds[5], conds[-5]
    fe, fl = (forward_path_predicate(tr, i) for i in (early, late))
    assert len(fl) > 5 * len(fe)
    assert len(fl) >= (late / early) * len(fe) * 0.5      # roughly linear
    bounded = [len(slice_at(tr, i, branch_condition(tr.steps[i], 32, False), 16)) for i in conds]
    assert max(bounded) <= 2 * 16 + 16


def test_negate_goal():
    tr = _squares()
    a, b = reg_at("r5", 32), reg_at("r6", 32)
    f = slice_at(tr, SQUARES_JZ, T.cmp("eq", a, b), 16)
    g = negate_goal(f)
    assert g.equations == f.equations and g.conditions == f.conditions
    assert g.goal is T.bnot(f.goal)
    assert negate_goal(g).goal is f.goal


def test_k_monotone_unsat():
    s = make_sample(PROGRAMS["bubble_sort"], 1, family=2)
    tr = run(s.image, s.inputs[0])
    occs = [st.index for st in tr.steps if st.instr.op in COND_JUMPS][:40]
    seen_unsat = 0
    for i in occs:
        goal = branch_condition(tr.steps[i], 32, taken=not tr.steps[i].branch_taken)
        verdicts = [_decided(tr, i, goal, k) for k in (2, 4, 8, 16, 32, math.inf)]
        first = next((n for n, v in enumerate(verdicts) if v), None)
        if first is not None:
            seen_unsat += 1
            assert all(verdicts[first:])
    assert seen_unsat


def _decided(tr, i, goal, k):
    # exact for this predicate shape: inlining folds the goal to a constant
    # or the slice is small enough for the independent enumerator
    g = inline_goal(tr, i, goal, k)
    if g.is_const:
        return not g.value
    f = slice_at(tr, i, goal, k)
    bits = sum(f.var_width(n) for n in f.cut_inputs)
    if bits > 24:
        from bbdse.solver import Solver
        with Solver() as s:
            return s.check(f).kind == "UNSAT"
    return brute_check(f).kind == "UNSAT"


@pytest.mark.parametrize("prog", sorted(PROGRAMS))
def test_concrete_valuation_satisfies_slices(prog):
    s = make_sample(PROGRAMS[prog], 2, family=7)
    tr = run(s.image, s.inputs[0])
    rng = random.Random(prog)
    for _ in range(20):
        i = rng.randrange(1, len(tr))
        k = rng.choice([1, 4, 16, 64, math.inf])
        loc = rng.choice(["r0", "r1", "r3", "sp"])
        f = slice_at(tr, i, T.cmp("eq", reg_at(loc, 32), T.const(0, 32)), k)
        env = concrete_valuation(tr, f)
        assert holds(f, env)
        assert T.evaluate(f.goal, env) == (tr.value_before(loc, i) == 0)
