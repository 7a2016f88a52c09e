"""Max deviation of every deployed architecture from the monolithic loop, across seeds.

    python scripts/equivalence_sweep.py --n 3 --horizon 6 --seeds 5
"""
import argparse
import time

import numpy as np

from slsdeploy.architectures import (OF_BUILDERS, SF_BUILDERS, make_disturbances,
                                     max_relative_deviation, reference_closed_loop, simulate_network)
from slsdeploy.cli import chain_plant
from slsdeploy.realizations import OFSimplified, SFSimplified
from slsdeploy.synthesis import SynthesisSpec, synth_of_youla, synth_sf_h2


def sweep(n, horizon, seeds, steps):
    rows = []
    sf_sys = chain_plant(n)
    sf = synth_sf_h2(sf_sys, SynthesisSpec(horizon)).response
    of_sys = chain_plant(n, outputs=list(range(0, n, 2)))
    phi_uy = synth_of_youla(of_sys, SynthesisSpec(horizon)).response
    cases = [("sf", sf_sys, SFSimplified(sf_sys, sf.phi_u), SF_BUILDERS, sf),
             ("of", of_sys, OFSimplified(of_sys, phi_uy), OF_BUILDERS, phi_uy)]
    for family, sys, ctrl, builders, data in cases:
        for name, build in builders.items():
            worst = 0.0
            t0 = time.perf_counter()
            for seed in range(seeds):
                d = make_disturbances(sys, steps, seed=seed, channels=("d_x", "d_u"))
                ref = reference_closed_loop(sys, ctrl, d, steps)
                worst = max(worst, max_relative_deviation(simulate_network(sys, build(sys, data), d, steps), ref))
            rows.append((family, name, worst, time.perf_counter() - t0))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=3)
    ap.add_argument("--horizon", type=int, default=6)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()
    print(f"{'family':6s} {'architecture':24s} {'max dev':>10s} {'seconds':>8s}")
    for family, name, dev, secs in sweep(args.n, args.horizon, args.seeds, args.steps):
        print(f"{family:6s} {name:24s} {dev:10.2e} {secs:8.2f}")


if __name__ == "__main__":
    np.set_printoptions(precision=4)
    main()
