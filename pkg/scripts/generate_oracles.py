"""
Oracle Table Generator
======================
Writes extended-precision reference values for the special functions in
logacq.stable_math (plus log_h) to data/oracles.tsv.

Inputs are binary floats of the form ±(m/8)·2^e, written as their exact
decimal expansion so the parsed double equals the evaluated point.
References are evaluated with mpmath at 80 significant digits and written
with 30.

Usage:
    python scripts/generate_oracles.py [--out data/oracles.tsv] [--dps 80]
"""

import argparse
import os
from decimal import Decimal

import mpmath as mp

OUT_PATH = os.path.join(os.path.dirname(__file__), "..", "data", "oracles.tsv")
REFERENCE_DIGITS = 30


def grid(sign: int, emin: int, emax: int, mantissas, limit=None) -> list[float]:
    points = []
    for e in range(emin, emax + 1):
        for m in mantissas:
            v = m * 2.0 ** (e - 3)
            if limit is not None and v > limit:
                continue
            points.append(sign * v)
    return points


def exact_decimal(x: float) -> str:
    s = format(Decimal(x), "f")
    if "." in s:
        s = s.rstrip("0").rstrip(".")
    return s


# ==================== Reference Formulas ====================

def ref_log1mexp(x):
    return mp.log(-mp.expm1(x))


def ref_erfcx(x):
    return mp.exp(x * x) * mp.erfc(x)


def ref_log_ndtr(z):
    return mp.log(mp.ncdf(z))


def ref_logerfc(x):
    return mp.log(mp.erfc(x))


def ref_log_h(z):
    if z < 0:
        # φ(z) - |z|Φ(z) = e^{-z²/2}·(1/√(2π) - |z|·erfcx(|z|/√2)/2)
        a = -z
        bracket = 1 / mp.sqrt(2 * mp.pi) - a * mp.exp(a * a / 2) * mp.erfc(a / mp.sqrt(2)) / 2
        return mp.log(bracket) - z * z / 2
    return mp.log(mp.npdf(z) + z * mp.ncdf(z))


def ref_logsoftplus(x):
    return mp.log(mp.log1p(mp.exp(x)))


TABLES = [
    ("log1mexp", ref_log1mexp, grid(-1, -33, 9, [8, 10, 12, 14], 700)),
    ("erfcx", ref_erfcx, grid(1, -20, 20, [8, 11, 14]) + grid(-1, -20, 4, [8, 11, 14], 26)),
    ("log_ndtr", ref_log_ndtr, grid(-1, -20, 20, [8, 11, 14]) + grid(1, -20, 5, [8, 11, 14], 37)),
    ("logerfc", ref_logerfc, grid(1, -20, 20, [8, 11, 14]) + grid(-1, -20, 4, [8, 11, 14], 26)),
    ("log_h", ref_log_h, grid(-1, -20, 30, [8, 12]) + grid(1, -20, 20, [8, 12])),
    ("logsoftplus", ref_logsoftplus, grid(-1, -20, 9, [8, 11, 14], 700) + grid(1, -20, 20, [8, 11, 14])),
]


def main():
    parser = argparse.ArgumentParser(description="Generate the special-function oracle table")
    parser.add_argument("--out", default=OUT_PATH, help="output TSV path")
    parser.add_argument("--dps", type=int, default=80, help="working decimal digits")
    args = parser.parse_args()

    mp.mp.dps = args.dps
    rows = 0
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("# Extended-precision reference values for logacq.stable_math and logacq.acq_analytic.log_h\n")
        f.write("# Inputs are exact binary floats written in full decimal; references carry 30 significant digits.\n")
        f.write("# Regenerate with scripts/generate_oracles.py\n")
        f.write("# function\tinput\treference\n")
        for name, fn, points in TABLES:
            for x in points:
                value = fn(mp.mpf(x))
                ref = mp.nstr(value, REFERENCE_DIGITS, min_fixed=1, max_fixed=0)
                f.write(f"{name}\t{exact_decimal(x)}\t{ref}\n")
                rows += 1
    print(f"Wrote {rows} rows to {args.out}")


if __name__ == "__main__":
    main()
