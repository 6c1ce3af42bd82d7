#!/usr/bin/env python3
"""Solve AC-OPF for every sample of a dataset CSV with PYPOWER and write the
reference-cost CSV read by `opflayer eval` and the acceptance run."""

import argparse
import csv
import re
import sys

import numpy as np
from pypower.api import ppoption, runopf


def parse_matrix(text, name):
    m = re.search(r"mpc\." + name + r"\s*=\s*\[(.*?)\];", text, re.S)
    if not m:
        raise SystemExit(f"case file has no mpc.{name}")
    rows = []
    for line in m.group(1).splitlines():
        line = line.split("%")[0].strip().rstrip(";").strip()
        if line:
            rows.append([float(v) for v in line.replace(";", " ").split()])
    return np.array(rows)


def load_case(path):
    text = open(path).read()
    base = float(re.search(r"mpc\.baseMVA\s*=\s*([0-9.eE+-]+)", text).group(1))
    branch = parse_matrix(text, "branch")
    # RATE_A = 0 means unlimited; give such lines the same 1e4 MVA stand-in
    # the C++ model uses (PYPOWER mishandles zero ratings).
    branch[branch[:, 5] <= 0, 5] = 1e4
    return {
        "version": "2",
        "baseMVA": base,
        "bus": parse_matrix(text, "bus"),
        "gen": parse_matrix(text, "gen"),
        "branch": branch,
        "gencost": parse_matrix(text, "gencost"),
    }


def read_dataset(path):
    samples = []
    with open(path) as f:
        rows = (line for line in f if not line.startswith("#"))
        for row in csv.DictReader(rows):
            pd = [float(v) for k, v in row.items() if k.startswith("pd_")]
            qd = [float(v) for k, v in row.items() if k.startswith("qd_")]
            samples.append((int(row["index"]), row["split"], np.array(pd), np.array(qd)))
    return samples


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("case", help="MATPOWER .m case file")
    ap.add_argument("dataset", help="dataset CSV written by `opflayer gen-data`")
    ap.add_argument("output", help="reference CSV to write")
    ap.add_argument("--split", choices=["train", "test", "all"], default="test")
    args = ap.parse_args()

    case = load_case(args.case)
    base = case["baseMVA"]
    opt = ppoption(VERBOSE=0, OUT_ALL=0)
    failed = []
    with open(args.output, "w", newline="") as out:
        out.write("index,cost\n")
        for index, split, pd, qd in read_dataset(args.dataset):
            if args.split != "all" and split != args.split:
                continue
            ppc = {k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in case.items()}
            ppc["bus"][:, 2] = pd * base
            ppc["bus"][:, 3] = qd * base
            result = runopf(ppc, opt)
            if not result["success"]:
                failed.append(index)
                continue
            out.write(f"{index},{result['f']:.10g}\n")
    if failed:
        print(f"OPF did not converge for samples: {failed}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
