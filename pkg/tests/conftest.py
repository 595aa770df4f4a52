import random
from fractions import Fraction

import pytest
from hypothesis import strategies as st

from nilwalk.affine import AffineMap, Automorphism
from nilwalk.nilgroup import GroupElement, NilGroupSchema


def make_schemas():
    return {
        "torus2": NilGroupSchema("torus", 2),
        "torus3": NilGroupSchema("torus", 3),
        "heis": NilGroupSchema("heisenberg-polarized", 1),
        "heis-q2": NilGroupSchema("heisenberg-polarized", 1, q=2),
        "heisB": NilGroupSchema("heisenberg-B", 1, B=((0, 1), (-1, 0))),
        "free": NilGroupSchema("free-2step-3gen", 3),
    }


SCHEMAS = make_schemas()

SL2_SQUARES = [[[1, 2], [0, 1]], [[1, 0], [2, 1]], [[1, -2], [0, 1]], [[1, 0], [-2, 1]]]


def elementary(d, i, j, v=1):
    M = [[int(r == c) for c in range(d)] for r in range(d)]
    M[i][j] = v
    return M


def generator_auts(schema):
    """A few automorphisms known to validate, closed under inverses."""
    fam = schema.family
    if fam == "torus":
        d = schema.dim
        mats = [elementary(d, i, j, v) for i in range(d) for j in range(d) if i != j for v in (1, -1)]
        return [Automorphism.torus(schema, M) for M in mats]
    if fam in ("heisenberg-polarized", "heisenberg-B"):
        out = [Automorphism.heisenberg(schema, A, 1) for A in SL2_SQUARES]
        # an integer L column is always admissible
        out.append(Automorphism.heisenberg(schema, [[1, 0], [0, 1]], 1, [1, 0]))
        out.append(Automorphism.heisenberg(schema, [[1, 0], [0, 1]], 1, [-1, 0]))
        return out
    mats = [elementary(3, i, j, v) for i in range(3) for j in range(3) if i != j for v in (1, -1)]
    return [Automorphism.free2step(schema, M) for M in mats]


def random_fraction(rng, lo=-3, hi=3, den=12):
    return Fraction(rng.randint(lo * den, hi * den), rng.randint(1, den))


def random_element(rng, schema, **kw):
    return GroupElement(schema, tuple(random_fraction(rng, **kw) for _ in range(schema.n)))


def random_aut(rng, schema, length=4):
    gens = generator_auts(schema)
    a = Automorphism.identity(schema)
    for _ in range(rng.randint(0, length)):
        a = a.compose(rng.choice(gens))
    return a


def random_affine(rng, schema, length=4):
    return AffineMap(random_aut(rng, schema, length), random_element(rng, schema))


fractions_st = st.fractions(min_value=-5, max_value=5, max_denominator=16)


def element_st(schema):
    return st.lists(fractions_st, min_size=schema.n, max_size=schema.n).map(
        lambda v: GroupElement(schema, tuple(v)))


def aut_st(schema, max_len=5):
    gens = generator_auts(schema)

    def build(word):
        a = Automorphism.identity(schema)
        for i in word:
            a = a.compose(gens[i])
        return a

    return st.lists(st.integers(0, len(gens) - 1), max_size=max_len).map(build)


def affine_st(schema):
    return st.builds(AffineMap, aut_st(schema), element_st(schema))


@pytest.fixture
def rng():
    return random.Random(12345)


# --- acceptance reporting: one line per criterion, shown in the summary ----------

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Call with (number, ok, detail); records the line, then asserts."""
    lines = request.config.stash[ACCEPTANCE]

    def record(num, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}"
        lines.append((num, line))
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
