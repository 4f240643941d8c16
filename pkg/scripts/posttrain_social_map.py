"""Pretrain, post-train and evaluate on crossing flows + obstacle field for several seeds."""
import argparse
import json

from crowdflow import experiments as ex

KEYS = ("col_rate", "map_violation_rate", "ade_min", "ade_avg")


def summarise(res: ex.SocialMapResult, variants) -> dict:
    out = {"seed": res.seed, "seconds": res.seconds}
    for name in variants:
        rep = res.post if name == "post" else res.ablations[name]
        out[name] = {k: ex.last_horizon(rep)[k] for k in KEYS}
        out[name]["change"] = {k: res.change(k, name) for k in KEYS}
    out["pre"] = {k: ex.last_horizon(res.pre)[k] for k in KEYS}
    out["horizons"] = {"pre": res.pre["horizons"], "post": res.post["horizons"]}
    return out


def main(ablations=False):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--json", help="write per-seed summaries here")
    args = ap.parse_args()
    variants = ["post"] + (list(ex.ABLATIONS) if ablations else [])
    rows = []
    for seed in args.seeds:
        res = ex.run_social_map(seed, ablations=ablations)
        row = summarise(res, variants)
        rows.append(row)
        pre = row["pre"]
        print(f"seed {seed}  pre col {pre['col_rate']:.2f}% map {pre['map_violation_rate']:.3f}% "
              f"ADE_min {pre['ade_min']:.4f}")
        for name in variants:
            ch = row[name]["change"]
            print(f"  {name:9s} col {ch['col_rate']:+.1%} map {ch['map_violation_rate']:+.1%} "
                  f"ADE_min {ch['ade_min']:+.1%} ADE_avg {ch['ade_avg']:+.1%}")
        print(f"  seconds {json.dumps({k: round(v) for k, v in res.seconds.items()})}", flush=True)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)


if __name__ == "__main__":
    main()
