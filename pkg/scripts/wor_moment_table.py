#!/usr/bin/env python3
"""Compare the quoted WOR moment coefficients with exhaustive enumeration over epoch orderings."""

from fractions import Fraction

from sgdthermo import diffusion
from sgdthermo.oracle_suite import enumerated_coefficients

KEYS = ("a0", "a0_off", "a1", "a2", "a3", "a4", "a5", "a6")


def frac(x):
    return str(Fraction(x).limit_denominator(10_000))


def main():
    print(f"{'M':>2} {'m':>2} {'coef':>6} {'enumerated':>12} {'quoted':>12} {'complete':>12}")
    for M in range(2, 7):
        for m in [d for d in range(1, M) if M % d == 0]:
            got, _ = enumerated_coefficients(M, m)
            quoted = diffusion.wor_coefficients(m, M)
            exact = diffusion.exact_wor_moments(m, M)
            for k in KEYS:
                if k not in got:
                    continue
                q = getattr(quoted, k, 0.0)
                flag = "" if abs(q - got[k]) < 1e-12 else "  <- differs"
                print(f"{M:>2} {m:>2} {k:>6} {frac(got[k]):>12} {frac(q):>12} {frac(getattr(exact, k)):>12}{flag}")


if __name__ == "__main__":
    main()
