"""Screen CSTR parameter sets and CL partitions.

For each candidate the script reports the nominal controller's temperature
overshoot under the worst-case constant parameter, and the OL/CL cost ratios
against the oracle on a few constant-random scenarios.  Used to choose the
repo defaults (T_max, heats, kA, partition axes).

    python3 scripts/param_search.py --seeds 3 --steps 40
"""

import argparse
import itertools
import json
import time

import numpy as np

from monompc import models
from monompc.partition import PartitionSpec
from monompc.sim import UncertaintyScenario, batch_compare, closed_loop_run


def evaluate(prm: models.CstrParams, levels, seeds: int, steps: int, N: int) -> dict:
    m = models.build_cstr(prm.n_R, prm)
    ti = list(m.temperature_index)
    wc = closed_loop_run("nominal", m, UncertaintyScenario("worst-case-constant"), steps, N)
    overshoot = float(np.max(wc.states[:, ti] - m.X.hi[ti]))
    part = PartitionSpec.from_levels(levels, m.n_x)
    scen = [UncertaintyScenario("constant-random", seed=s) for s in range(seeds)]
    summ = batch_compare(["ol", "cl"], m, scen, steps, N, partition=part)
    return {
        "T_max": prm.T_max, "heat1": prm.heat1, "kA": prm.kA, "levels": list(levels),
        "nominal_overshoot": overshoot,
        "ol_ratio": summ.rows["ol"]["cost_ratio"], "cl_ratio": summ.rows["cl"]["cost_ratio"],
        "ol_ms": summ.times["ol"], "cl_ms": summ.times["cl"],
    }


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--steps", type=int, default=40)
    ap.add_argument("--N", type=int, default=10)
    ap.add_argument("--T-max", type=float, nargs="+", default=[68.0, 70.0, 72.0])
    ap.add_argument("--heat1", type=float, nargs="+", default=[60_000.0])
    ap.add_argument("--kA", type=float, nargs="+", default=[2.0e4])
    ap.add_argument("--axes", type=int, nargs="+", default=[0, 2],
                    help="state index cut twice by the CL partition (one candidate per value)")
    ap.add_argument("--out", help="write results as JSON lines")
    args = ap.parse_args(argv)

    rows = []
    for T_max, heat1, kA, axis in itertools.product(args.T_max, args.heat1, args.kA, args.axes):
        prm = models.CstrParams(T_max=T_max, heat1=heat1, kA=kA)
        t0 = time.perf_counter()
        r = evaluate(prm, [axis, axis], args.seeds, args.steps, args.N)
        r["seconds"] = time.perf_counter() - t0
        rows.append(r)
        print(f"T_max={T_max:5.1f} heat1={heat1:8.0f} kA={kA:8.0f} axis={axis}: "
              f"nominal overshoot {r['nominal_overshoot']:+.3f} K, OL {r['ol_ratio']:.1f}% "
              f"CL {r['cl_ratio']:.1f}% ({r['seconds']:.0f} s)", flush=True)
    if args.out:
        with open(args.out, "w") as fh:
            for r in rows:
                fh.write(json.dumps(r) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
