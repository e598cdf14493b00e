"""Per-seed speeds of the coupled N-BRW bounds against the N-BBM they ride.

    python3 scripts/paired_bounds.py --n 20 50 --seeds 20 --horizon 200
"""
import argparse

from beeslab.brw_bounds import paired_lower_nbbm, paired_upper_nbbm
from beeslab.statistics import estimate_velocity


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, nargs="+", default=[20, 50])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--horizon", type=int, default=200)
    ap.add_argument("--delta", type=float, default=0.5)
    args = ap.parse_args()
    gens = int(round(args.horizon / args.delta))
    print("N,bound,ordered_pairs,mean_bound_speed,mean_nbbm_speed,violations")
    for n in args.n:
        for name in ("upper", "lower"):
            ok, vb, vx, viol = 0, 0.0, 0.0, 0
            for s in range(args.seeds):
                if name == "upper":
                    run = paired_upper_nbbm(n, 0.0, args.horizon, seed=s)
                else:
                    run = paired_lower_nbbm(n, args.delta, 0.0, gens, seed=s)
                b = estimate_velocity(run.bound).v_hat
                x = estimate_velocity(run.nbbm).v_hat
                ok += (b >= x) if name == "upper" else (b <= x)
                vb += b / args.seeds
                vx += x / args.seeds
                viol += len(run.violations)
            print(f"{n},{name},{ok}/{args.seeds},{vb:.4f},{vx:.4f},{viol}", flush=True)


if __name__ == "__main__":
    main()
