import argparse
import json
import sys

from threadpoolctl import threadpool_limits


def main(title, runner, default_cfg, quick_changes):
    ap = argparse.ArgumentParser(description=title)
    ap.add_argument("--out", default="runs", help="directory for checkpoints and the report")
    ap.add_argument("--quick", action="store_true", help="few epochs; smoke test only")
    args = ap.parse_args()
    cfg = default_cfg()
    if args.quick:
        for k, v in quick_changes.items():
            setattr(cfg, k, v)
    with threadpool_limits(1):
        result = runner(cfg)
    result.write(args.out)
    print(result.report, end="")
    print(json.dumps({"seconds": round(result.seconds, 1)}))
    return 0


if __name__ == "__main__":
    sys.exit("import this module from a run_* script")
