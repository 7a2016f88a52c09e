"""Longest message hop in the distributed layouts as the response bandwidth grows.

    python scripts/localization_sweep.py --n 7 --bandwidths 1 2 3
"""
import argparse

from slsdeploy.architectures import SF_BUILDERS, make_disturbances, message_hops, simulate_network
from slsdeploy.cli import chain_plant
from slsdeploy.synthesis import InfeasibleError, SparsityPattern, SynthesisSpec, synth_sf_h2


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--n", type=int, default=7)
    ap.add_argument("--horizon", type=int, default=6)
    ap.add_argument("--bandwidths", type=int, nargs="+", default=[1, 2, 3])
    ap.add_argument("--steps", type=int, default=100)
    args = ap.parse_args()
    sys = chain_plant(args.n)
    d = make_disturbances(sys, args.steps, seed=0)
    for bw in args.bandwidths:
        spec = SynthesisSpec(args.horizon, pattern=SparsityPattern.banded(bw, ("phi_x", "phi_u")))
        try:
            res = synth_sf_h2(sys, spec)
        except InfeasibleError as exc:
            print(f"bandwidth {bw}: infeasible ({exc})")
            continue
        for kind in ("naive_distributed", "memconserv_distributed"):
            net = SF_BUILDERS[kind](sys, res.response)
            simulate_network(sys, net, d, args.steps)
            hops = [h for *_, h in message_hops(net)]
            print(f"bandwidth {bw} {kind:24s} objective={res.objective:.5f} "
                  f"messages/step={len(hops) // args.steps} max hop={max(hops):g}")


if __name__ == "__main__":
    main()
