"""Loss ablation on one held-out domain: retrain with each loss-weight setting and compare AUROC.

    python3 scripts/ablate_losses.py --config configs/synthetic_loo.yaml --set train.steps=500
"""

import argparse
import json
from dataclasses import replace
from pathlib import Path

from adgen.config import load_config
from adgen.evaluation import evaluate_target
from adgen.model import build_model
from adgen.training import train

from leave_one_out import load_domains

SETTINGS = {
    "cls": (1.0, 0.0, 0.0),
    "cls+att": (1.0, 1.0, 0.0),
    "cls+rank": (1.0, 0.0, 1.0),
    "all": (1.0, 1.0, 1.0),
}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[])
    p.add_argument("--out", default="runs/ablation.json")
    args = p.parse_args()

    cfg = load_config(args.config, args.overrides)
    domains = load_domains(cfg)
    sources = [domains[n] for n in cfg.source_domains()]
    target = domains[cfg.data.target]
    rows = []
    for name, weights in SETTINGS.items():
        model = build_model(cfg.model, cfg.train.seed)
        train(sources, model, replace(cfg.train, loss_weights=weights))
        report = evaluate_target(model, target, cfg.eval.fraction, cfg.eval.seeds[0])
        rows.append({"losses": name, "weights": weights, "image_auc": report.image_auc, "pixel_auc": report.pixel_auc})
        pix = "n/a" if report.pixel_auc is None else f"{report.pixel_auc:.3f}"
        print(f"{name:>9s}  image {report.image_auc:.3f}  pixel {pix}", flush=True)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
