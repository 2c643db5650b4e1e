"""Leave-one-domain-out experiment: hold out each domain in turn, train on the rest, evaluate.

Data come from ``synthetic.domains`` when the config defines them (generated in
memory), otherwise from the MVTec-style tree under ``data.root``.

    python3 scripts/leave_one_out.py --config configs/synthetic_loo.yaml --out runs/loo
    python3 scripts/leave_one_out.py --config configs/synthetic_loo.yaml --targets dots --set train.steps=200
"""

import argparse
import json
import logging
import time
from dataclasses import replace
from pathlib import Path

from adgen.config import load_config, save_config
from adgen.data import load_mvtec_layout
from adgen.evaluation import evaluate_target, sweep_reference_fraction, write_sweep_csv
from adgen.model import build_model
from adgen.training import train


def load_domains(cfg):
    if cfg.synthetic.domains:
        return {d.name: d.generate(cfg.synthetic_size) for d in cfg.synthetic.domains}
    return {name: load_mvtec_layout(cfg.data.root, name, cfg.input_size) for name in cfg.data.domains}


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True)
    p.add_argument("--set", dest="overrides", action="append", default=[])
    p.add_argument("--targets", nargs="*", help="domains to hold out (default: all)")
    p.add_argument("--out", default="runs/leave_one_out")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config, args.overrides)
    domains = load_domains(cfg)
    names = list(domains)
    targets = args.targets or names
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.yaml")

    results = []
    for target in targets:
        run_cfg = replace(cfg, data=replace(cfg.data, domains=tuple(names), target=target))
        sources = [domains[n] for n in run_cfg.source_domains()]
        t0 = time.perf_counter()
        model = build_model(cfg.model, cfg.train.seed)
        train(sources, model, cfg.train, log_path=out / target / "train_log.jsonl", checkpoint_dir=out / target / "checkpoints")
        report = evaluate_target(model, domains[target], cfg.eval.fraction, cfg.eval.seeds[0], run_cfg.to_dict())
        report.save(out / target / "eval_report.json")
        rows = sweep_reference_fraction(model, domains[target], list(cfg.eval.fractions), list(cfg.eval.seeds))
        write_sweep_csv(rows, out / target / "sweep.csv")
        row = {
            "target": target,
            "image_auc": report.image_auc,
            "pixel_auc": report.pixel_auc,
            "sweep": rows,
            "seconds": round(time.perf_counter() - t0, 1),
        }
        results.append(row)
        pix = "n/a" if report.pixel_auc is None else f"{report.pixel_auc:.3f}"
        print(f"{target:>14s}  image {report.image_auc:.3f}  pixel {pix}  ({row['seconds']} s)", flush=True)

    (out / "results.json").write_text(json.dumps(results, indent=2))


if __name__ == "__main__":
    main()
