"""Command-line entry point: ``adgen synth|train|eval|sweep|localize|fid``.

Exit codes: 0 success, 1 internal error, 2 configuration or input error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .config import RunConfig, load_config, save_config
from .data import DomainDataset, ImageSample, load_mvtec_layout, read_image, write_mvtec_layout
from .errors import INPUT_ERRORS, ConfigError
from .inference import build_reference_bank, export_heatmap, query_scores, pixel_map
from .model import build_model, load_checkpoint
from .training import train

log = logging.getLogger("adgen")


def run_dir(config: RunConfig, command: str) -> Path:
    if config.output.run_dir:
        out = Path(config.output.run_dir)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        out = config.output_root() / f"{command}-{stamp}"
        n = 1
        while out.exists():
            out = config.output_root() / f"{command}-{stamp}-{n}"
            n += 1
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "resolved_config.yaml")
    return out


def _require_domains(config: RunConfig) -> None:
    if not config.data.domains:
        raise ConfigError("data.domains is empty")
    if config.data.target and config.data.target not in config.data.domains:
        raise ConfigError(f"data.target {config.data.target!r} not in data.domains")


def _load(config: RunConfig, domain: str) -> DomainDataset:
    return load_mvtec_layout(config.data.root, domain, config.input_size)


def _target(config: RunConfig) -> DomainDataset:
    _require_domains(config)
    if not config.data.target:
        raise ConfigError("data.target must be set")
    return _load(config, config.data.target)


def _checkpoint(path: str | None):
    if not path:
        raise ConfigError("--checkpoint is required")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(config: RunConfig, args) -> Path:
    if not config.synthetic.domains:
        raise ConfigError("synthetic.domains is empty")
    root = Path(args.out or config.data.root)
    for dom in config.synthetic.domains:
        if (root / dom.name).exists():
            raise ConfigError(f"refusing to overwrite existing dataset directory {root / dom.name}")
    for dom in config.synthetic.domains:
        write_mvtec_layout(dom.generate(config.synthetic_size), root)
        log.info("wrote synthetic domain %s under %s", dom.name, root)
    save_config(config, root / "synth_config.yaml")
    return root


def cmd_train(config: RunConfig, args) -> Path:
    _require_domains(config)
    names = config.source_domains()
    if not names:
        raise ConfigError("no source domains left after removing the target")
    sources = [_load(config, d) for d in names]
    out = run_dir(config, "train")

    start, opt_state = 0, None
    if args.resume:
        model, payload = _checkpoint(args.resume)
        if asdict(model.config) != asdict(config.model):
            raise ConfigError("checkpoint model configuration differs from the run configuration")
        start, opt_state = int(payload["step"]), payload["optimizer"]
        if start >= config.train.steps:
            raise ConfigError(f"checkpoint step {start} already reaches train.steps={config.train.steps}")
    else:
        model = build_model(config.model, config.train.seed)

    train(
        sources,
        model,
        config.train,
        log_path=out / "train_log.jsonl",
        checkpoint_dir=out / "checkpoints",
        optimizer_state=opt_state,
        start_step=start,
    )
    log.info("training finished; checkpoint at %s", out / "checkpoints" / "final.pt")
    return out


def cmd_eval(config: RunConfig, args) -> Path:
    model, _ = _checkpoint(args.checkpoint)
    target = _target(config)
    fraction = args.fraction if args.fraction is not None else config.eval.fraction
    seed = config.eval.seeds[0] if config.eval.seeds else 0
    report = ev.evaluate_target(model, target, fraction, seed, config.to_dict())
    out = run_dir(config, "eval")
    report.save(out / "eval_report.json")
    with open(out / "scores.jsonl", "w") as fh:
        for rec in report.per_image:
            fh.write(json.dumps(rec) + "\n")
    print(f"target={target.domain} image_auc={report.image_auc:.4f} pixel_auc="
          + ("n/a" if report.pixel_auc is None else f"{report.pixel_auc:.4f}"))
    return out


def cmd_sweep(config: RunConfig, args) -> Path:
    model, _ = _checkpoint(args.checkpoint)
    target = _target(config)
    fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else list(config.eval.fractions)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(config.eval.seeds)
    rows = ev.sweep_reference_fraction(model, target, fractions, seeds)
    out = run_dir(config, "sweep")
    (out / "sweep.json").write_text(json.dumps({"target": target.domain, "seeds": seeds, "rows": rows}, indent=2))
    ev.write_sweep_csv(rows, out / "sweep.csv")
    ev.plot_sweep(rows, out / "sweep.png", title=f"target: {target.domain}")
    for r in rows:
        print(f"fraction={r['fraction']:.3f} image_auc={r['image_auc']:.4f} pixel_auc={r['pixel_auc']}")
    return out


def cmd_localize(config: RunConfig, args) -> Path:
    model, _ = _checkpoint(args.checkpoint)
    if not args.images:
        raise ConfigError("localize needs at least one --images path")
    target = _target(config)
    pool = target.reference_pool()
    seed = config.eval.seeds[0] if config.eval.seeds else 0
    bank = build_reference_bank(pool, config.eval.fraction, model, np.random.default_rng(seed))
    queries = []
    for p in args.images:
        if not Path(p).is_file():
            raise ConfigError(f"image not found: {p}")
        queries.append(ImageSample(read_image(p, config.input_size), 0, target.domain, None, str(p), "test"))
    out = run_dir(config, "localize")
    strides = model.config.extractor.strides
    with open(out / "scores.jsonl", "w") as fh:
        for i, (q, sc) in enumerate(zip(queries, query_scores(queries, bank, model))):
            amap = pixel_map(sc, strides, q.size)
            export_heatmap(amap, q, out / f"{i:03d}_{Path(q.path).stem}", smooth_sigma=config.eval.heatmap_smooth)
            fh.write(json.dumps({"path": q.path, "score": sc.image_score()}) + "\n")
    return out


def cmd_fid(config: RunConfig, args) -> Path:
    _require_domains(config)
    domains = [_load(config, d) for d in config.data.domains]
    kind = args.extractor or config.eval.fid_extractor
    if kind == "model":
        if args.checkpoint:
            model, _ = _checkpoint(args.checkpoint)
        else:
            model = build_model(config.model, config.train.seed)
        extractor = lambda imgs: ev.pooled_features(imgs, model)  # noqa: E731
    elif kind == "inception":
        extractor = ev.inception_features
    else:
        raise ConfigError(f"unknown FID extractor {kind!r}; expected 'model' or 'inception'")
    table = ev.domain_distance_table(domains, extractor)
    out = run_dir(config, "fid")
    (out / "fid_table.json").write_text(json.dumps(table.to_dict(), indent=2))
    text = table.format()
    (out / "fid_table.txt").write_text(text + "\n")
    print(text)
    return out


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "localize": cmd_localize,
    "fid": cmd_fid,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adgen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set train.steps=100 (repeatable)")
        p.add_argument("--run-dir", help="write outputs here instead of a timestamped directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "synth":
            p.add_argument("--out", help="dataset root (default: data.root)")
        if name == "train":
            p.add_argument("--resume", help="checkpoint to continue from")
            p.add_argument("--steps", type=int)
            p.add_argument("--seed", type=int)
        if name in ("eval", "sweep", "localize", "fid"):
            p.add_argument("--checkpoint")
        if name in ("eval", "sweep", "localize", "fid", "train"):
            p.add_argument("--target", help="override data.target")
        if name == "eval":
            p.add_argument("--fraction", type=float)
        if name == "sweep":
            p.add_argument("--fractions", help="comma-separated, e.g. 0.1,0.5,1.0")
            p.add_argument("--seeds", help="comma-separated seeds")
        if name == "localize":
            p.add_argument("--images", nargs="+")
        if name == "fid":
            p.add_argument("--extractor", choices=["model", "inception"])
    return parser


def _flag_overrides(args) -> list[str]:
    out = list(args.overrides)
    for flag, key in (("steps", "train.steps"), ("seed", "train.seed"), ("target", "data.target"), ("run_dir", "output.run_dir")):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={json.dumps(value)}")
    return out


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config, _flag_overrides(args))
        out = COMMANDS[args.command](config, args)
    except INPUT_ERRORS as exc:
        print(f"adgen {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"adgen {args.command}: internal error: {exc}", file=sys.stderr)
        return 1
    print(f"outputs: {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
