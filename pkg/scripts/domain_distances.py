"""Pairwise FID between the normal images of every domain in a config.

    python3 scripts/domain_distances.py --config configs/synthetic_loo.yaml
    python3 scripts/domain_distances.py --config configs/mvtec_textures.yaml --extractor inception
"""

import argparse
import json
from pathlib import Path

from adgen.config import load_config
from adgen.evaluation import domain_distance_table, inception_features, pooled_features
from adgen.model import build_model, load_checkpoint

from leave_one_out import load_domains


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[])
    p.add_argument("--extractor", choices=["model", "inception"], default="model")
    p.add_argument("--checkpoint", help="model weights for --extractor model (default: untrained, seeded)")
    p.add_argument("--out", default="runs/domain_distances.json")
    args = p.parse_args()

    cfg = load_config(args.config, args.overrides)
    domains = list(load_domains(cfg).values())
    if args.extractor == "inception":
        extractor = inception_features
    else:
        model = load_checkpoint(args.checkpoint)[0] if args.checkpoint else build_model(cfg.model, cfg.train.seed)
        extractor = lambda imgs: pooled_features(imgs, model)  # noqa: E731
    table = domain_distance_table(domains, extractor)
    print(table.format())
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(table.to_dict(), indent=2))


if __name__ == "__main__":
    main()
