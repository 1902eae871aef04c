"""Per-component parameter breakdown of a backbone configuration.

    python3 scripts/param_count.py --config configs/full.toml
"""

import argparse
from collections import defaultdict
from pathlib import Path

from dbcr.backbone import DBCRNet, count_parameters
from dbcr.config import load_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--config", type=Path, default=None)
    args = ap.parse_args()
    cfg = load_config(args.config)
    net = DBCRNet(cfg.model)
    groups = defaultdict(int)
    for name, p in net.named_parameters():
        parts = name.split(".")
        key = parts[0] if not parts[1].isdigit() else f"{parts[0]}[{parts[1]}]"
        groups[key] += p.numel()
    for key, n in groups.items():
        print(f"{key:<16}{n:>12,}")
    print(f"{'total':<16}{count_parameters(net):>12,}")


if __name__ == "__main__":
    main()
