import pytest

from bbdse.assembler import assemble
from bbdse.solver import Solver, default_solver_path
from bbdse.tracer import run

requires_solver = pytest.mark.skipif(default_solver_path() is None, reason="no SMT solver")


@pytest.fixture(scope="session")
def solver():
    s = Solver(timeout=5.0)
    yield s
    s.close()


def trace_of(source: str, width: int = 32, inputs=None, **kw):
    img = assemble(source, width)
    return run(img, inputs or {}, **kw)


# 7y^2 - 1 = x^2 test guarding a jump into junk; x in r0, y in r1
SQUARES = """
_start:
    MOV r6, r1
    MUL r6, r6
    MULI r6, 7
    SUBI r6, 1
    MOV r5, r0
    MUL r5, r5
    NE r7, r6, r5
    JZ r7, trap
    HALT
trap:
    .byte 0xff, 0xfe
"""
SQUARES_JZ = 7
