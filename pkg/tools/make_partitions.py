"""Generate the bundled default partition files.

Regions start as contiguous runs of bus numbers.  Any piece of a region that
is disconnected from the region's largest piece is handed to the neighbouring
region it shares the most lines with; this repeats until every region is
connected.  The 14-bus split is {1-5} | {6-14}, the usual two-area cut with three tie
lines (the {1-7} | {8-14} cut leaves bus 8 hanging on a single tie line).

usage: python tools/make_partitions.py OUTDIR
"""
import sys
from collections import Counter
from pathlib import Path

import networkx as nx

from distopf.case import load_case

SPLITS = {
    # case name -> first bus id of every region after the first
    "case118": (22, 70),
    "case300": None,  # equal thirds in file order
}


def graph(case):
    G = nx.Graph()
    G.add_nodes_from(b.id for b in case.buses)
    for k in case.active_branches:
        br = case.branches[k]
        G.add_edge(br.from_bus, br.to_bus)
    return G


def contiguous(case, starts, k=3):
    ids = [b.id for b in case.buses]
    if starts is None:
        n = len(ids)
        cuts = [round(i * n / k) for i in range(1, k)]
    else:
        cuts = [ids.index(s) for s in starts]
    cuts = [0, *cuts, len(ids)]
    return {b: r + 1 for r in range(len(cuts) - 1) for b in ids[cuts[r]:cuts[r + 1]]}


def repair(G, assign):
    while True:
        moved = False
        for r in sorted(set(assign.values())):
            comps = sorted(nx.connected_components(G.subgraph([b for b, a in assign.items() if a == r])),
                           key=lambda c: (-len(c), min(c)))
            for comp in comps[1:]:
                votes = Counter(assign[v] for u in comp for v in G[u] if assign[v] != r)
                if votes:
                    target = max(sorted(votes), key=lambda t: votes[t])
                    for u in comp:
                        assign[u] = target
                    moved = True
        if not moved:
            return assign


def write(path, case_name, assign, note):
    lines = [f"# {note}", f'case = "{case_name}"', "", "[regions]"]
    for r in sorted(set(assign.values())):
        buses = sorted(b for b, a in assign.items() if a == r)
        body = ",\n".join("    " + ", ".join(map(str, buses[i:i + 12])) for i in range(0, len(buses), 12))
        lines.append(f'"{r}" = [\n{body},\n]')
    path.write_text("\n".join(lines) + "\n")


def main(out):
    out = Path(out)
    c14 = load_case("case14")
    write(out / "case14.toml", "case14", {b.id: 1 if b.id <= 5 else 2 for b in c14.buses},
          "two regions: buses 1-5 and 6-14")
    for name, starts in SPLITS.items():
        case = load_case(name)
        assign = repair(graph(case), contiguous(case, starts))
        write(out / f"{name}.toml", name, assign,
              "three regions from contiguous bus-number runs, stranded pieces merged into a neighbour "
              "(generated by tools/make_partitions.py)")
    rts = load_case("rts_gmlc")
    write(out / "rts_gmlc.toml", "rts_gmlc", {b.id: b.id // 100 for b in rts.buses},
          "three regions: the 1xx, 2xx and 3xx bus areas")


if __name__ == "__main__":
    main(sys.argv[1])
