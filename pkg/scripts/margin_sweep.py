"""Robustness margin of a controller designed for A_s, applied to A_s + A_u.

    python scripts/margin_sweep.py --a-s 0.5 --a-u 0.05 0.3 0.6 1.0
"""
import argparse

from slsdeploy.lti import LTISystem
from slsdeploy.stability import certify_unstable_extension
from slsdeploy.synthesis import SynthesisSpec, synth_sf_h2


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--a-s", type=float, default=0.5)
    ap.add_argument("--a-u", type=float, nargs="+", default=[0.05, 0.3, 0.6, 0.8, 1.0])
    ap.add_argument("--horizon", type=int, default=2)
    args = ap.parse_args()
    model = LTISystem.state_feedback([[args.a_s]], [[1.0]])
    resp = synth_sf_h2(model, SynthesisSpec(args.horizon)).response
    print(f"{'A_u':>6s} {'margin':>10s} {'certified':>9s} {'finite':>7s} {'decayed':>7s} {'final':>10s}")
    for a_u in args.a_u:
        full = LTISystem.state_feedback([[args.a_s + a_u]], [[1.0]])
        r = certify_unstable_extension(full, [[args.a_s]], [[a_u]], resp)
        print(f"{a_u:6.3f} {r['margin']:10.6f} {str(r['certified']):>9s} {str(r['finite']):>7s} "
              f"{str(r['decayed']):>7s} {r['final']:10.3e}")


if __name__ == "__main__":
    main()
