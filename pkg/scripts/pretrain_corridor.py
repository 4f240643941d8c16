"""Corridor pretraining check: flow ADE_min at 4.8 s against constant velocity."""
import argparse
import json

from crowdflow import experiments as ex


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="write the result here")
    args = ap.parse_args()
    res = ex.run_corridor(args.seed)
    print(f"flow ADE_min {res.ade_flow:.4f}  CV ADE {res.ade_cv:.4f}  ratio {res.ade_flow / res.ade_cv:.3f}  "
          f"train {res.train_seconds:.0f}s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(vars(res), fh, indent=1)


if __name__ == "__main__":
    main()
