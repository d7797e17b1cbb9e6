"""MATPOWER case ingestion and the per-unit network data model.

Only the data needed for a lossless DC optimal power flow is kept: active
demand, generator limits and polynomial costs, branch reactance and thermal
rating.  AC quantities (resistance, shunts, tap ratios, voltages) are read so
that the file parses, then discarded.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

__all__ = [
    "Bus",
    "Generator",
    "Branch",
    "NetworkCase",
    "CaseError",
    "CaseSyntaxError",
    "CaseSemanticError",
    "Finding",
    "ValidationReport",
    "parse_case",
    "validate_case",
    "serialize_case",
    "load_case",
    "bundled_case_path",
    "BUNDLED_CASES",
]

# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD = 0, 1, 2
GEN_BUS, PMAX, PMIN, GEN_STATUS = 0, 8, 9, 7
F_BUS, T_BUS, BR_X, RATE_A, BR_STATUS = 0, 1, 3, 5, 10
REF_TYPE = 3

BUNDLED_CASES = {
    "case14": "case14.m",
    "case118": "case118.m",
    "case300": "case300.m",
    "rts_gmlc": "case_RTS_GMLC_quad.m",
}


class CaseError(ValueError):
    """Base class for case ingestion failures."""


class CaseSyntaxError(CaseError):
    def __init__(self, message, line, column):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class CaseSemanticError(CaseError):
    def __init__(self, message, table=None, row=None):
        self.table = table
        self.row = row
        where = f"mpc.{table} row {row}: " if table is not None else ""
        super().__init__(where + message)


@dataclass(frozen=True)
class Bus:
    id: int
    demand: float
    is_ref: bool = False


@dataclass(frozen=True)
class Generator:
    bus: int
    p_min: float
    p_max: float
    cost: tuple[float, float, float]  # (c2, c1, c0) in $/h on p.u. power
    in_service: bool = True


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    susceptance: float
    flow_limit: float = math.inf
    in_service: bool = True


@dataclass(frozen=True)
class NetworkCase:
    """Immutable per-unit network.  Array views are computed lazily."""

    base_mva: float
    buses: tuple[Bus, ...]
    generators: tuple[Generator, ...]
    branches: tuple[Branch, ...]
    name: str = field(default="case", compare=False)

    @cached_property
    def bus_index(self) -> dict[int, int]:
        return {b.id: k for k, b in enumerate(self.buses)}

    @cached_property
    def ref_bus(self) -> int:
        refs = [b.id for b in self.buses if b.is_ref]
        if len(refs) != 1:
            raise CaseSemanticError(f"expected one reference bus, found {len(refs)}")
        return refs[0]

    @cached_property
    def demand(self) -> np.ndarray:
        return np.array([b.demand for b in self.buses], dtype=float)

    @cached_property
    def active_generators(self) -> tuple[int, ...]:
        """Positions (into ``generators``) of in-service units."""
        return tuple(k for k, g in enumerate(self.generators) if g.in_service)

    @cached_property
    def active_branches(self) -> tuple[int, ...]:
        return tuple(k for k, br in enumerate(self.branches) if br.in_service)

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def with_demand_scaled(self, factor: float) -> "NetworkCase":
        buses = tuple(replace(b, demand=b.demand * factor) for b in self.buses)
        return replace(self, buses=buses)


@dataclass(frozen=True)
class Finding:
    kind: str
    message: str
    item: str | None = None


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.findings

    def __bool__(self):
        return self.ok

    def __len__(self):
        return len(self.findings)

    def __iter__(self):
        return iter(self.findings)


# --------------------------------------------------------------------------
# lexer / parser
# --------------------------------------------------------------------------

_PUNCT = set("=[]{};,()'")


class _Tok:
    __slots__ = ("kind", "value", "line", "col")

    def __init__(self, kind, value, line, col):
        self.kind = kind
        self.value = value
        self.line = line
        self.col = col

    def __repr__(self):
        return f"_Tok({self.kind!r}, {self.value!r}, {self.line}:{self.col})"


def _tokenize(text):
    toks = []
    i, n = 0, len(text)
    line, line_start = 1, 0
    prev_sig = None  # last significant token, decides ' as transpose vs string
    while i < n:
        ch = text[i]
        col = i - line_start + 1
        if ch == "\n":
            toks.append(_Tok("nl", None, line, col))
            i += 1
            line += 1
            line_start = i
            continue
        if ch in " \t\r\f\v":
            i += 1
            continue
        if ch == "%" or ch == "#":
            while i < n and text[i] != "\n":
                i += 1
            continue
        if ch == "." and text.startswith("...", i):
            # line continuation: skip to end of line, swallow newline
            while i < n and text[i] != "\n":
                i += 1
            if i < n:
                i += 1
                line += 1
                line_start = i
            continue
        if ch.isalpha() or ch == "_":
            j = i
            while j < n and (text[j].isalnum() or text[j] in "_."):
                j += 1
            word = text[i:j]
            if word.endswith("."):
                raise CaseSyntaxError(f"malformed identifier {word!r}", line, col)
            lw = word.lower()
            if lw in ("inf", "nan"):
                tok = _Tok("num", math.inf if lw == "inf" else math.nan, line, col)
            else:
                tok = _Tok("id", word, line, col)
            toks.append(tok)
            prev_sig = tok
            i = j
            continue
        if ch.isdigit() or (ch == "." and i + 1 < n and text[i + 1].isdigit()) or (
            ch in "+-" and i + 1 < n and (text[i + 1].isdigit() or text[i + 1] == "."
                                          or text[i + 1:i + 4].lower() == "inf")
        ):
            j = i + 1 if ch in "+-" else i
            sign = -1.0 if ch == "-" else 1.0
            if text[j:j + 3].lower() == "inf" and not (j + 3 < n and text[j + 3].isalnum()):
                tok = _Tok("num", sign * math.inf, line, col)
                j += 3
            else:
                k = j
                while k < n and text[k].isdigit():
                    k += 1
                if k < n and text[k] == ".":
                    k += 1
                    while k < n and text[k].isdigit():
                        k += 1
                if k < n and text[k] in "eE":
                    m = k + 1
                    if m < n and text[m] in "+-":
                        m += 1
                    if m < n and text[m].isdigit():
                        while m < n and text[m].isdigit():
                            m += 1
                        k = m
                    else:
                        raise CaseSyntaxError("malformed exponent", line, col)
                lit = text[j:k]
                if not lit or lit == ".":
                    raise CaseSyntaxError(f"malformed number {text[i:k + 1]!r}", line, col)
                tok = _Tok("num", sign * float(lit), line, col)
                j = k
            toks.append(tok)
            prev_sig = tok
            i = j
            continue
        if ch == "'":
            transpose = prev_sig is not None and (
                prev_sig.kind in ("id", "num") or prev_sig.value in ("]", "}", ")"))
            if transpose and toks and toks[-1] is prev_sig:
                toks.append(_Tok("punct", "'", line, col))
                i += 1
                continue
            j = i + 1
            buf = []
            while True:
                if j >= n or text[j] == "\n":
                    raise CaseSyntaxError("unterminated string", line, col)
                if text[j] == "'":
                    if j + 1 < n and text[j + 1] == "'":
                        buf.append("'")
                        j += 2
                        continue
                    break
                buf.append(text[j])
                j += 1
            tok = _Tok("str", "".join(buf), line, col)
            toks.append(tok)
            prev_sig = tok
            i = j + 1
            continue
        if ch == '"':
            j = text.find('"', i + 1)
            if j < 0 or "\n" in text[i:j]:
                raise CaseSyntaxError("unterminated string", line, col)
            tok = _Tok("str", text[i + 1:j], line, col)
            toks.append(tok)
            prev_sig = tok
            i = j + 1
            continue
        if ch in _PUNCT:
            tok = _Tok("punct", ch, line, col)
            toks.append(tok)
            prev_sig = tok
            i += 1
            continue
        raise CaseSyntaxError(f"unexpected character {ch!r}", line, col)
    toks.append(_Tok("eof", None, line, i - line_start + 1))
    return toks


class _Parser:
    def __init__(self, toks):
        self.toks = toks
        self.pos = 0

    def peek(self):
        return self.toks[self.pos]

    def next(self):
        tok = self.toks[self.pos]
        if tok.kind != "eof":
            self.pos += 1
        return tok

    def error(self, tok, msg):
        return CaseSyntaxError(msg, tok.line, tok.col)

    def skip_sep(self):
        while self.peek().kind == "nl" or (self.peek().kind == "punct" and self.peek().value in ";,"):
            self.next()

    def parse(self):
        assigns = {}
        self.skip_sep()
        while self.peek().kind != "eof":
            tok = self.next()
            if tok.kind == "id" and tok.value == "function":
                self.parse_function_header(tok)
            elif tok.kind == "id" and tok.value in ("end", "return"):
                pass
            elif tok.kind == "id":
                if self.peek().kind == "punct" and self.peek().value == "=":
                    self.next()
                    assigns[tok.value] = (self.parse_value(), tok)
                else:
                    raise self.error(self.peek(), f"expected '=' after {tok.value!r}")
            else:
                raise self.error(tok, "expected an assignment")
            end = self.peek()
            if not (end.kind in ("nl", "eof") or (end.kind == "punct" and end.value in ";,")):
                raise self.error(end, "expected end of statement")
            self.skip_sep()
        return assigns

    def parse_function_header(self, start):
        # function mpc = name   |   function name
        tok = self.next()
        if tok.kind != "id":
            raise self.error(tok, "expected identifier after 'function'")
        if self.peek().kind == "punct" and self.peek().value == "=":
            self.next()
            tok = self.next()
            if tok.kind != "id":
                raise self.error(tok, "expected function name")

    def parse_value(self):
        tok = self.peek()
        if tok.kind == "num":
            self.next()
            return tok.value
        if tok.kind == "str":
            self.next()
            return tok.value
        if tok.kind == "punct" and tok.value == "[":
            self.next()
            return self.parse_matrix(tok)
        if tok.kind == "punct" and tok.value == "{":
            self.next()
            return self.parse_cell(tok)
        raise self.error(tok, "expected a number, string, matrix or cell array")

    def parse_matrix(self, open_tok):
        rows, row = [], []
        while True:
            tok = self.next()
            if tok.kind == "num":
                row.append(tok.value)
            elif tok.kind == "punct" and tok.value == ",":
                continue
            elif tok.kind == "nl" or (tok.kind == "punct" and tok.value == ";"):
                if row:
                    rows.append((row, tok.line))
                    row = []
            elif tok.kind == "punct" and tok.value == "]":
                if row:
                    rows.append((row, tok.line))
                break
            elif tok.kind == "eof":
                raise self.error(open_tok, "unterminated matrix")
            else:
                raise self.error(tok, f"unexpected {tok.value!r} inside matrix")
        if self.peek().kind == "punct" and self.peek().value == "'":
            self.next()
            if rows:
                width = len(rows[0][0])
                if any(len(r) != width for r, _ in rows):
                    raise self.error(open_tok, "ragged matrix cannot be transposed")
                rows = [([r[k] for r, _ in rows], rows[0][1]) for k in range(width)]
        widths = {len(r) for r, _ in rows}
        if len(widths) > 1:
            bad = next(line for r, line in rows if len(r) != len(rows[0][0]))
            raise CaseSyntaxError("rows of unequal length in matrix", bad, 1)
        return _Matrix([r for r, _ in rows], open_tok.line)

    def parse_cell(self, open_tok):
        items = []
        while True:
            tok = self.next()
            if tok.kind in ("num", "str"):
                items.append(tok.value)
            elif tok.kind == "nl" or (tok.kind == "punct" and tok.value in ";,"):
                continue
            elif tok.kind == "punct" and tok.value == "}":
                break
            elif tok.kind == "eof":
                raise self.error(open_tok, "unterminated cell array")
            else:
                raise self.error(tok, f"unexpected {tok.value!r} inside cell array")
        if self.peek().kind == "punct" and self.peek().value == "'":
            self.next()
        return items


class _Matrix:
    __slots__ = ("rows", "line")

    def __init__(self, rows, line):
        self.rows = rows
        self.line = line


def _matrix(assigns, key, min_cols):
    if key not in assigns:
        raise CaseSemanticError(f"missing required matrix {key}")
    value, tok = assigns[key]
    if not isinstance(value, _Matrix):
        raise CaseSyntaxError(f"{key} must be a matrix", tok.line, tok.col)
    for r, row in enumerate(value.rows, start=1):
        if len(row) < min_cols:
            raise CaseSemanticError(
                f"expected at least {min_cols} columns, found {len(row)}", key.split(".")[-1], r)
        for v in row:
            if math.isnan(v):
                raise CaseSemanticError("NaN entry", key.split(".")[-1], r)
    return value.rows


def _as_int(v, table, row, what):
    if not math.isfinite(v) or v != int(v):
        raise CaseSemanticError(f"{what} must be an integer, got {v!r}", table, row)
    return int(v)


def parse_case(text: str | bytes, name: str = "case") -> NetworkCase:
    """Parse MATPOWER case text into a per-unit :class:`NetworkCase`.

    Raises :class:`CaseSyntaxError` (with line/column) for malformed text and
    :class:`CaseSemanticError` (naming the offending table row) for data that
    cannot form a DC-OPF network.
    """
    if isinstance(text, (bytes, bytearray)):
        try:
            text = bytes(text).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CaseSyntaxError(f"invalid UTF-8 ({exc.reason})", 1, exc.start + 1) from None
    if "\x00" in text:
        raise CaseSyntaxError("NUL byte in input", 1 + text[:text.index("\x00")].count("\n"), 1)
    assigns = _Parser(_tokenize(text)).parse()

    if "mpc.baseMVA" not in assigns:
        raise CaseSemanticError("missing mpc.baseMVA")
    base, tok = assigns["mpc.baseMVA"]
    if not isinstance(base, float) or not math.isfinite(base) or base <= 0:
        raise CaseSemanticError(f"mpc.baseMVA must be a positive number, got {base!r}")

    bus_rows = _matrix(assigns, "mpc.bus", 3)
    gen_rows = _matrix(assigns, "mpc.gen", 10)
    br_rows = _matrix(assigns, "mpc.branch", 11)
    cost_rows = _matrix(assigns, "mpc.gencost", 4)

    buses = []
    seen = set()
    for r, row in enumerate(bus_rows, start=1):
        bid = _as_int(row[BUS_I], "bus", r, "bus id")
        if bid in seen:
            raise CaseSemanticError(f"duplicate bus id {bid}", "bus", r)
        seen.add(bid)
        if not math.isfinite(row[PD]):
            raise CaseSemanticError("non-finite demand", "bus", r)
        buses.append(Bus(bid, row[PD] / base, _as_int(row[BUS_TYPE], "bus", r, "bus type") == REF_TYPE))
    n_ref = sum(b.is_ref for b in buses)
    if n_ref == 0:
        raise CaseSemanticError("no reference bus (type 3) in mpc.bus")
    if n_ref > 1:
        raise CaseSemanticError("multiple reference buses (type 3) in mpc.bus")

    if len(cost_rows) < len(gen_rows):
        raise CaseSemanticError(
            f"mpc.gencost has {len(cost_rows)} rows for {len(gen_rows)} generators")
    gens = []
    for r, (row, crow) in enumerate(zip(gen_rows, cost_rows), start=1):
        gbus = _as_int(row[GEN_BUS], "gen", r, "generator bus")
        if gbus not in seen:
            raise CaseSemanticError(f"references bus {gbus} which is not in mpc.bus", "gen", r)
        model = _as_int(crow[0], "gencost", r, "cost model")
        if model == 1:
            raise CaseSemanticError("piecewise-linear cost model is not supported", "gencost", r)
        if model != 2:
            raise CaseSemanticError(f"unknown cost model {model}", "gencost", r)
        ncoef = _as_int(crow[3], "gencost", r, "coefficient count")
        if ncoef > 3:
            raise CaseSemanticError(
                f"polynomial of degree {ncoef - 1} exceeds quadratic", "gencost", r)
        if ncoef < 0 or len(crow) < 4 + ncoef:
            raise CaseSemanticError(f"expected {ncoef} cost coefficients", "gencost", r)
        coefs = [0.0] * (3 - ncoef) + list(crow[4:4 + ncoef])
        if not all(math.isfinite(c) for c in coefs):
            raise CaseSemanticError("non-finite cost coefficient", "gencost", r)
        c2, c1, c0 = coefs
        pmin, pmax = row[PMIN], row[PMAX]
        gens.append(Generator(
            bus=gbus,
            p_min=pmin / base,
            p_max=pmax / base,
            cost=(c2 * base * base, c1 * base, c0),
            in_service=row[GEN_STATUS] > 0,
        ))

    branches = []
    for r, row in enumerate(br_rows, start=1):
        f = _as_int(row[F_BUS], "branch", r, "from bus")
        t = _as_int(row[T_BUS], "branch", r, "to bus")
        for b in (f, t):
            if b not in seen:
                raise CaseSemanticError(f"references bus {b} which is not in mpc.bus", "branch", r)
        x = row[BR_X]
        if x == 0 or not math.isfinite(x):
            raise CaseSemanticError(f"reactance must be finite and nonzero, got {x!r}", "branch", r)
        rate = row[RATE_A]
        limit = math.inf if rate == 0 else abs(rate) / base
        branches.append(Branch(f, t, 1.0 / x, limit, row[BR_STATUS] > 0))

    case = NetworkCase(base, tuple(buses), tuple(gens), tuple(branches), name=name)
    report = validate_case(case)
    if not report.ok:
        first = report.findings[0]
        raise CaseSemanticError(first.message + (f" ({first.item})" if first.item else ""))
    return case


def validate_case(case: NetworkCase) -> ValidationReport:
    """Check every structural invariant; never raises, never mutates."""
    out = []
    ids = [b.id for b in case.buses]
    idset = set(ids)
    if len(idset) != len(ids):
        out.append(Finding("duplicate_bus", "duplicate bus ids"))
    n_ref = sum(1 for b in case.buses if b.is_ref)
    if n_ref == 0:
        out.append(Finding("no_reference", "no reference bus"))
    elif n_ref > 1:
        out.append(Finding("multiple_reference", "multiple reference buses"))
    for b in case.buses:
        if not math.isfinite(b.demand):
            out.append(Finding("demand", "non-finite demand", f"bus {b.id}"))
    for k, g in enumerate(case.generators, start=1):
        tag = f"generator {k} at bus {g.bus}"
        if g.bus not in idset:
            out.append(Finding("dangling_reference", f"unknown bus {g.bus}", tag))
        if not g.p_min <= g.p_max:
            out.append(Finding("generator_limits", "p_min exceeds p_max", tag))
        if len(g.cost) != 3 or not all(math.isfinite(c) for c in g.cost):
            out.append(Finding("cost", "cost must be three finite coefficients", tag))
        elif g.cost[0] < 0:
            out.append(Finding("nonconvex_cost", "quadratic cost coefficient is negative", tag))
    for k, br in enumerate(case.branches, start=1):
        tag = f"branch {k} ({br.from_bus}-{br.to_bus})"
        for b in (br.from_bus, br.to_bus):
            if b not in idset:
                out.append(Finding("dangling_reference", f"unknown bus {b}", tag))
        if br.susceptance == 0 or not math.isfinite(br.susceptance):
            out.append(Finding("susceptance", "susceptance must be finite and nonzero", tag))
        if br.in_service and not br.flow_limit > 0:
            out.append(Finding("flow_limit", "flow limit must be positive", tag))
    return ValidationReport(tuple(out))


def _fmt(v: float) -> str:
    if math.isinf(v):
        return "Inf" if v > 0 else "-Inf"
    return repr(float(v))


def serialize_case(case: NetworkCase) -> str:
    """Write ``case`` back out as canonical MATPOWER text.

    Per-unit values are scaled back to MW; unlimited branches get rateA = 0.
    """
    base = case.base_mva
    lines = [
        f"function mpc = {case.name if case.name.isidentifier() else 'case'}",
        "mpc.version = '2';",
        f"mpc.baseMVA = {_fmt(base)};",
        "%\tbus_i\ttype\tPd\tQd\tGs\tBs\tarea\tVm\tVa\tbaseKV\tzone\tVmax\tVmin",
        "mpc.bus = [",
    ]
    for b in case.buses:
        lines.append(f"\t{b.id}\t{3 if b.is_ref else 1}\t{_fmt(b.demand * base)}\t0\t0\t0\t1\t1\t0\t0\t1\t1.1\t0.9;")
    lines += ["];", "mpc.gen = ["]
    for g in case.generators:
        lines.append(
            f"\t{g.bus}\t0\t0\t0\t0\t1\t{_fmt(base)}\t{1 if g.in_service else 0}"
            f"\t{_fmt(g.p_max * base)}\t{_fmt(g.p_min * base)};")
    lines += ["];", "mpc.branch = ["]
    for br in case.branches:
        rate = 0.0 if math.isinf(br.flow_limit) else br.flow_limit * base
        lines.append(
            f"\t{br.from_bus}\t{br.to_bus}\t0\t{_fmt(1.0 / br.susceptance)}\t0"
            f"\t{_fmt(rate)}\t0\t0\t0\t0\t{1 if br.in_service else 0}\t-360\t360;")
    lines += ["];", "mpc.gencost = ["]
    for g in case.generators:
        c2, c1, c0 = g.cost
        lines.append(f"\t2\t0\t0\t3\t{_fmt(c2 / (base * base))}\t{_fmt(c1 / base)}\t{_fmt(c0)};")
    lines += ["];", ""]
    return "\n".join(lines)


def bundled_case_path(name: str) -> Path:
    try:
        fname = BUNDLED_CASES[name]
    except KeyError:
        raise KeyError(f"unknown bundled case {name!r}; choose from {sorted(BUNDLED_CASES)}") from None
    return Path(str(resources.files("distopf") / "data" / "cases" / fname))


def load_case(path_or_name: str | Path) -> NetworkCase:
    """Load a case from a file path or a bundled case name (e.g. ``"case14"``)."""
    if isinstance(path_or_name, str) and path_or_name in BUNDLED_CASES:
        path = bundled_case_path(path_or_name)
        name = path_or_name
    else:
        path = Path(path_or_name)
        name = path.stem
    return parse_case(path.read_text(), name=name)
