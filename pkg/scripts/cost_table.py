"""Published cost formulas next to instrumented measurements for several sizes.

    python scripts/cost_table.py --sizes 2,1,4 3,2,5 4,3,3
"""
import argparse

import numpy as np

from slsdeploy.architectures import SF_BUILDERS
from slsdeploy.costs import measure_costs, predict_sf_costs, reconcile, sf_buffer_difference
from slsdeploy.lti import LTISystem, SpectralSeries
from slsdeploy.synthesis import SystemResponseSF


def dense_response(nx, nu, T, seed=0):
    """Random fully dense response; costs only depend on its support."""
    rng = np.random.default_rng(seed)
    phi_x = SpectralSeries(1, np.concatenate([np.eye(nx)[None], rng.standard_normal((T - 1, nx, nx))]))
    phi_u = SpectralSeries(1, rng.standard_normal((T, nu, nx)))
    return SystemResponseSF(phi_x, phi_u)


def dense_plant(nx, nu, seed=0):
    rng = np.random.default_rng(seed + 1)
    A = rng.uniform(0.1, 0.3, (nx, nx)) / nx
    B = rng.uniform(0.5, 1.0, (nx, nu))
    return LTISystem.state_feedback(A, B)


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--sizes", nargs="+", default=["2,1,4", "3,2,5", "4,3,3", "2,2,5"])
    args = ap.parse_args()
    for size in args.sizes:
        nx, nu, T = map(int, size.split(","))
        sys, resp = dense_plant(nx, nu), dense_response(nx, nu, T)
        print(f"(N_x, N_u, T) = ({nx}, {nu}, {T})")
        buffers = {}
        for kind, build in SF_BUILDERS.items():
            meas = measure_costs(build(sys, resp))
            pred = predict_sf_costs(kind, (nx, nu), T)
            rec = reconcile(pred, meas)
            buffers[kind] = meas.measured["buffer_memory"]
            cells = ", ".join(f"{k}={r['measured']}/{r['published']} {r['status']}" for k, r in rec["rows"].items())
            print(f"  {kind:24s} {cells}")
        diff = buffers["naive_distributed"] - buffers["memconserv_distributed"]
        print(f"  buffer difference measured={diff} formula={sf_buffer_difference(nx, nu, T)}")


if __name__ == "__main__":
    main()
