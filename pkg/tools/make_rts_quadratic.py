"""Derive a quadratic-cost RTS-GMLC case from MATPOWER's piecewise-linear one.

The distributed solvers only accept smooth convex polynomial costs, so each
piecewise-linear ``gencost`` row of ``case_RTS_GMLC.m`` is replaced by the
least-squares quadratic through its breakpoints (curvature clipped at zero,
in which case the best line is used instead).  Everything else in the file is
copied through untouched.

Usage::

    python tools/make_rts_quadratic.py path/to/case_RTS_GMLC.m \
        src/distopf/data/cases/case_RTS_GMLC_quad.m
"""
import re
import sys

import numpy as np

HEADER = """\
%% -------------------------------------------------------------------------
%% DERIVED FILE: generated by tools/make_rts_quadratic.py from MATPOWER's
%% case_RTS_GMLC.m.  The piecewise-linear generator costs (model 1) were
%% replaced by least-squares convex quadratic fits (model 2, 3 coefficients)
%% through the original breakpoints.  All other data is unchanged.
%% -------------------------------------------------------------------------
"""


def fit_row(row):
    npts = int(row[3])
    pts = np.asarray(row[4:4 + 2 * npts], dtype=float).reshape(npts, 2)
    p, c = pts[:, 0], pts[:, 1]
    if np.ptp(p) == 0.0:
        return 0.0, 0.0, float(c.mean())
    coef, *_ = np.linalg.lstsq(np.vander(p, 3), c, rcond=None)
    if coef[0] < 0.0:
        lin, *_ = np.linalg.lstsq(np.vander(p, 2), c, rcond=None)
        coef = np.array([0.0, lin[0], lin[1]])
    return tuple(float(v) for v in coef)


def convert(text):
    m = re.search(r"mpc\.gencost\s*=\s*\[(.*?)\];", text, re.S)
    if m is None:
        raise SystemExit("no mpc.gencost block found")
    out_rows = []
    for line in m.group(1).splitlines():
        body = line.split("%")[0].strip().rstrip(";").strip()
        if not body:
            continue
        row = [float(v) for v in body.split()]
        if int(row[0]) == 1:
            c2, c1, c0 = fit_row(row)
        else:
            c2, c1, c0 = (list(row[4:]) + [0.0, 0.0, 0.0])[:3]
        out_rows.append("\t2\t%r\t%r\t3\t%r\t%r\t%r;" % (row[1], row[2], c2, c1, c0))
    block = "mpc.gencost = [\n" + "\n".join(out_rows) + "\n];"
    return HEADER + text[:m.start()] + block + text[m.end():]


def main(argv):
    if len(argv) != 3:
        raise SystemExit(__doc__)
    with open(argv[1]) as fh:
        text = fh.read()
    with open(argv[2], "w") as fh:
        fh.write(convert(text))


if __name__ == "__main__":
    main(sys.argv)
