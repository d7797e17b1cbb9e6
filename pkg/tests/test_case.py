import math
from dataclasses import replace

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from distopf.case import (
    Branch,
    Bus,
    CaseError,
    CaseSemanticError,
    CaseSyntaxError,
    Generator,
    NetworkCase,
    load_case,
    parse_case,
    serialize_case,
    validate_case,
)

TWO_BUS = """\
function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
    1  3  0    0  0  0  1  1  0  230  1  1.1  0.9;
    2  1  100  0  0  0  1  1  0  230  1  1.1  0.9;
];
mpc.gen = [
    1  0  0  0  0  1  100  1  250  0;
];
mpc.branch = [
    1  2  0  0.1  0  0  0  0  0  0  1  -360  360;
];
mpc.gencost = [
    2  0  0  3  0.0001  0  0;
];
"""


def test_two_bus_unit_conversion():
    case = parse_case(TWO_BUS)
    assert case.base_mva == 100.0
    assert case.buses[1].demand == 1.0
    assert case.branches[0].susceptance == pytest.approx(10.0, rel=1e-15)
    assert math.isinf(case.branches[0].flow_limit)
    assert case.ref_bus == 1
    # $/h on MW -> $/h on p.u.: c2 * base^2
    assert case.generators[0].cost == pytest.approx((1.0, 0.0, 0.0))
    assert validate_case(case).ok


def test_ieee14_counts():
    case = load_case("case14")
    assert (case.n_bus, len(case.generators), len(case.branches)) == (14, 5, 20)
    assert case.ref_bus == 1
    assert sum(b.demand for b in case.buses) == pytest.approx(2.59)


@pytest.mark.parametrize("name, counts", [
    ("case118", (118, 54, 186)),
    ("case300", (300, 69, 411)),
    ("rts_gmlc", (73, 158, 120)),
])
def test_bundled_counts(name, counts):
    case = load_case(name)
    assert (case.n_bus, len(case.generators), len(case.branches)) == counts
    assert validate_case(case).ok


def test_dangling_bus_reference_names_row_and_bus():
    text = TWO_BUS.replace("1  2  0  0.1", "1  99  0  0.1")
    with pytest.raises(CaseSemanticError) as err:
        parse_case(text)
    assert err.value.table == "branch" and err.value.row == 1
    assert "99" in str(err.value)


@pytest.mark.parametrize("edit, match", [
    (("0  0.1  0", "0  0  0"), "reactance"),
    (("1  3  0    0", "1  1  0    0"), "no reference"),
    (("2  0  0  3  0.0001  0  0", "1  0  0  2  0  0  100  10"), "piecewise"),
    (("2  0  0  3  0.0001  0  0", "2  0  0  4  1  0.0001  0  0"), "exceeds quadratic"),
])
def test_semantic_errors(edit, match):
    with pytest.raises(CaseSemanticError, match=match):
        parse_case(TWO_BUS.replace(*edit))


def test_syntax_error_has_location():
    text = TWO_BUS.replace("1  2  0  0.1", "1  2  0  0.1 ]]")
    with pytest.raises(CaseSyntaxError) as err:
        parse_case(text)
    assert err.value.line == 12
    assert err.value.column > 0


def test_out_of_service_branch_retained():
    text = TWO_BUS.replace("0  0  0  0  1  -360", "0  0  0  0  0  -360")
    case = parse_case(text)
    assert len(case.branches) == 1 and not case.branches[0].in_service
    assert case.active_branches == ()


def test_rate_a_becomes_limit():
    case = parse_case(TWO_BUS.replace("0  0.1  0  0", "0  0.1  0  50"))
    assert case.branches[0].flow_limit == 0.5


# -- validation ---------------------------------------------------------------

def test_validation_generator_limits():
    case = parse_case(TWO_BUS)
    bad = replace(case, generators=(replace(case.generators[0], p_min=3.0, p_max=2.0),))
    report = validate_case(bad)
    assert len(report) == 1
    f = report.findings[0]
    assert f.kind == "generator_limits" and "generator 1" in f.item


def test_validation_multiple_reference():
    case = parse_case(TWO_BUS)
    bad = replace(case, buses=tuple(replace(b, is_ref=True) for b in case.buses))
    report = validate_case(bad)
    assert [f.message for f in report] == ["multiple reference buses"]


def test_validation_does_not_mutate():
    case = parse_case(TWO_BUS)
    before = serialize_case(case)
    validate_case(case)
    assert serialize_case(case) == before


# -- properties ---------------------------------------------------------------

@pytest.mark.parametrize("name", ["case14", "case118", "case300", "rts_gmlc"])
def test_round_trip_bundled(name):
    case = load_case(name)
    again = parse_case(serialize_case(case), name=case.name)
    assert again.buses == case.buses
    assert again.branches == case.branches
    for a, b in zip(again.generators, case.generators):
        assert (a.bus, a.p_min, a.p_max, a.in_service) == (b.bus, b.p_min, b.p_max, b.in_service)
        assert a.cost == pytest.approx(b.cost, rel=1e-14, abs=0)


finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)
positive = st.floats(1e-3, 1e3, allow_nan=False, allow_infinity=False)


@st.composite
def cases(draw):
    n = draw(st.integers(2, 6))
    base = draw(st.sampled_from([1.0, 10.0, 100.0, 1000.0]))
    ref = draw(st.integers(0, n - 1))
    buses = tuple(Bus(i + 1, draw(finite) / base, i == ref) for i in range(n))
    gens = []
    for _ in range(draw(st.integers(1, 3))):
        lo = draw(st.floats(0, 100)) / base
        gens.append(Generator(draw(st.integers(1, n)), lo, lo + draw(positive) / base,
                              (draw(st.floats(0, 1)), draw(finite), draw(finite)),
                              draw(st.booleans())))
    branches = []
    for _ in range(draw(st.integers(1, 6))):
        f, t = draw(st.integers(1, n)), draw(st.integers(1, n))
        x = draw(st.floats(0.01, 2.0)) * draw(st.sampled_from([1, -1]))
        lim = draw(st.one_of(st.just(math.inf), positive.map(lambda v: v / base)))
        branches.append(Branch(f, t, 1.0 / x, lim, draw(st.booleans())))
    return NetworkCase(base, buses, tuple(gens), tuple(branches))


@settings(max_examples=150, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(cases())
def test_round_trip_property(case):
    again = parse_case(serialize_case(case))
    assert again.base_mva == case.base_mva
    assert len(again.buses) == len(case.buses)
    for a, b in zip(again.buses, case.buses):
        assert a.id == b.id and a.is_ref == b.is_ref
        assert a.demand == pytest.approx(b.demand, rel=1e-14, abs=1e-300)
    for a, b in zip(again.branches, case.branches):
        assert (a.from_bus, a.to_bus, a.in_service) == (b.from_bus, b.to_bus, b.in_service)
        assert a.susceptance == pytest.approx(b.susceptance, rel=1e-14)
        assert a.flow_limit == pytest.approx(b.flow_limit, rel=1e-14)
    for a, b in zip(again.generators, case.generators):
        assert a.cost == pytest.approx(b.cost, rel=1e-14, abs=1e-300)
        assert a.p_max == pytest.approx(b.p_max, rel=1e-14)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e6, 1e6, allow_nan=False), st.sampled_from([1.0, 100.0, 250.0]))
def test_per_unit_consistency(mw, base):
    text = TWO_BUS.replace("mpc.baseMVA = 100", f"mpc.baseMVA = {base!r}")
    text = text.replace("2  1  100  0", f"2  1  {mw!r}  0")
    case = parse_case(text)
    assert case.buses[1].demand == mw / base


@settings(max_examples=400, deadline=None)
@given(st.binary(max_size=400))
def test_parser_total_on_bytes(data):
    try:
        parse_case(data)
    except CaseSyntaxError as err:
        assert err.line >= 1 and err.column >= 1
    except CaseError:
        pass


@settings(max_examples=400, deadline=None)
@given(st.data())
def test_parser_total_on_mutated_text(data):
    pos = data.draw(st.integers(0, len(TWO_BUS)))
    junk = data.draw(st.text(alphabet="[];=,'%.\n 0123456789-eE\"{}()", max_size=8))
    cut = data.draw(st.integers(0, 8))
    text = TWO_BUS[:pos] + junk + TWO_BUS[pos + cut:]
    try:
        parse_case(text)
    except CaseSyntaxError as err:
        assert err.line >= 1 and err.column >= 1
    except CaseError:
        pass
