#!/usr/bin/env python3
"""Cross-validate the two comparison-certification routes on random drivers.

For a batch of randomly generated two-dimensional affine driver pairs --
alternating between sound pairs (built to satisfy the componentwise
comparison structure) and broken ones (one structural coefficient pushed
out of range) -- this script runs both certification routes:

* the direct componentwise check on the pair, and
* the viability check of the stacked difference system on the
  product-orthant target that encodes the same ordering,

and reports how often the two verdicts agree with each other and with
the construction.  Any disagreement is printed and makes the script
exit nonzero.
"""

import argparse
import sys
import time

import numpy as np

from bsdelab.conditions import (
    check_comparison_multidim,
    check_viability_condition,
    stacked_reduction,
)
from bsdelab.generators import AffineGen
from bsdelab.stochastic import FiniteMarkMeasure

MARKS = FiniteMarkMeasure([[1.0]], [1.0])
STATE_DIM = 2


def make_pair(rng: np.random.Generator, sound: bool) -> tuple[AffineGen, AffineGen]:
    """Draw a driver pair; ``sound`` controls whether the ordering holds.

    The base driver uses a quasi-monotone state coefficient (nonnegative
    off-diagonals), diagonal Brownian coefficients, and jump coefficients
    above the -1 threshold, so the pair (base + nonnegative shift, base)
    satisfies the comparison structure.  Broken pairs flip exactly one of
    those three properties in the shifted driver.
    """
    a = rng.uniform(-1.0, 1.0, (STATE_DIM, STATE_DIM))
    a[0, 1] = abs(a[0, 1])
    a[1, 0] = abs(a[1, 0])
    b = np.zeros((STATE_DIM, STATE_DIM, 1))
    b[0, 0, 0] = rng.uniform(-1.0, 1.0)
    b[1, 1, 0] = rng.uniform(-1.0, 1.0)
    c = np.zeros((1, STATE_DIM, STATE_DIM))
    c[0, 0, 0] = rng.uniform(-0.95, 1.0)
    c[0, 1, 1] = rng.uniform(-0.95, 1.0)
    shift = rng.uniform(0.0, 1.0, STATE_DIM)
    lower = AffineGen(a, b, c, np.zeros(STATE_DIM), 1, MARKS)
    if sound:
        return AffineGen(a, b, c, shift, 1, MARKS), lower
    a2, b2, c2 = a.copy(), b.copy(), c.copy()
    kind = int(rng.integers(3))
    if kind == 0:
        a2[0, 1] = -2.0  # negative off-diagonal breaks quasi-monotonicity
    elif kind == 1:
        b2[0, 1, 0] = 1.5  # off-diagonal Brownian row breaks the diagonal structure
    else:
        c2[0, 0, 0] = -2.5  # jump coefficient below -1 breaks the jump bound
    return AffineGen(a2, b2, c2, shift, 1, MARKS), lower


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--pairs", type=int, default=100, help="number of driver pairs")
    parser.add_argument("--seed", type=int, default=7, help="seed for drawing the pairs")
    parser.add_argument("--samples-direct", type=int, default=1500,
                        help="sample budget of the componentwise route")
    parser.add_argument("--samples-stacked", type=int, default=2000,
                        help="sample budget of the stacked-system route")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    rng = np.random.default_rng(args.seed)
    agree = correct = 0
    mismatches = []
    started = time.perf_counter()
    for i in range(args.pairs):
        sound = i % 2 == 0
        upper, lower = make_pair(rng, sound)
        direct = check_comparison_multidim(
            upper, lower, n_samples=args.samples_direct, seed=100 + i, c_max=500.0,
        )
        stacked, orthant = stacked_reduction(upper, lower)
        via = check_viability_condition(
            stacked, orthant, n_samples=args.samples_stacked, seed=200 + i, c_max=500.0,
        )
        expect = "certified" if sound else "falsified"
        agree += direct.outcome == via.outcome
        correct += (direct.outcome == expect) + (via.outcome == expect)
        if not (direct.outcome == via.outcome == expect):
            mismatches.append(
                f"pair {i:3d}: direct={direct.outcome}  stacked={via.outcome}  expected {expect}"
            )
    for line in mismatches:
        print(line)
    elapsed = time.perf_counter() - started
    print(
        f"agreement {agree}/{args.pairs}, "
        f"correct verdicts {correct}/{2 * args.pairs}, {elapsed:.1f}s"
    )
    return 0 if agree == args.pairs else 1


if __name__ == "__main__":
    sys.exit(main())
