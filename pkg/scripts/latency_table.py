"""Print simulated latency and speedup over fp32 for the toy ViT.

    python scripts/latency_table.py [--hw hw.yaml] [--resolutions 256 512 1024] [--fusion off]
"""

import argparse

from qdk.sim.hw import PRECISIONS, HwConfig
from qdk.sim.profile import compare_configs


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--hw", help="hardware YAML (defaults when omitted)")
    p.add_argument("--resolutions", type=int, nargs="+", default=[256, 512, 1024])
    p.add_argument("--fusion", choices=("on", "off"), default="on")
    args = p.parse_args()
    cfg = HwConfig.load(args.hw) if args.hw else HwConfig()
    rows = compare_configs(None, cfg, PRECISIONS, args.resolutions, args.fusion == "on")
    print(f"{'precision':>9} {'res':>5} {'ms':>9} {'fps':>8} {'speedup':>8} {'GMAC/J':>8} {'matmul':>7}")
    for r in rows:
        rep = r.report
        mm = rep.breakdown["matmul"] + rep.breakdown["conv"]
        print(f"{r.precision:>9} {r.resolution:>5} {rep.total_ms:9.3f} {rep.fps:8.1f} {r.speedup:8.2f} "
              f"{rep.power_efficiency_gmac_per_w:8.1f} {mm:7.3f}")


if __name__ == "__main__":
    main()
