"""``milr`` command line: synth-data, train-backbone, train-milr, explain, calibrate.

All artifacts of a run go to ``<output_dir>/<run_id>/``. Each command also
writes a copy of its effective configuration and a JSON manifest that lists
every file it produced.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_encoder
from .config import RunConfig, load_config
from .data import generate_dataset, load_dataset, load_image_folder, save_dataset
from .errors import ConfigError, MilrError
from .estimators import calibrate_infonce, calibrate_vib, write_calibration_csv
from .milr import MilrState, explain_sample, stage1_collect, train_milr
from .nn import freeze
from .protonet import train_protonet
from .viz import render_sample, write_maps_csv

DATASET_FILE = "dataset.milrdata"
BACKBONE_FILE = "backbone.ckpt"
MILR_FILE = "milr.ckpt"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(cfg: RunConfig, command: str, artifacts: list[Path]) -> Path:
    run_dir = cfg.run_dir
    config_copy = run_dir / f"config_{command}.ini"
    config_copy.write_text(cfg.to_ini())
    files = [config_copy, *artifacts]
    manifest = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": config_copy.name,
        "artifacts": [{"path": str(p.relative_to(run_dir)), "sha256": _sha256(p)} for p in files],
    }
    path = run_dir / f"manifest_{command}.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _require(path: Path, hint: str) -> Path:
    if not path.is_file():
        raise ConfigError(f"missing input {path} ({hint})")
    return path


def cmd_synth_data(cfg: RunConfig) -> list[Path]:
    d = cfg.dataset
    if d.image_folder:
        dataset = load_image_folder(d.image_folder, d.image_size)
    else:
        dataset = generate_dataset(d.n_classes, d.samples_per_class, d.image_size, d.noise_level, cfg.seed)
    return [save_dataset(dataset, cfg.run_dir / DATASET_FILE)]


def cmd_train_backbone(cfg: RunConfig) -> list[Path]:
    dataset = load_dataset(_require(cfg.run_dir / DATASET_FILE, "run synth-data first"))
    enc_cfg = cfg.encoder
    enc_cfg.input_channels = dataset.images.shape[1]
    ckpt, log = cfg.run_dir / BACKBONE_FILE, cfg.run_dir / "backbone_log.csv"
    train_protonet(dataset, cfg.protonet, cfg.seed, enc_cfg.validate(), checkpoint_path=ckpt, log_path=log)
    return [ckpt, log]


def cmd_train_milr(cfg: RunConfig, backbone: Path | None = None) -> list[Path]:
    dataset = load_dataset(_require(cfg.run_dir / DATASET_FILE, "run synth-data first"))
    backbone = _require(backbone or cfg.run_dir / BACKBONE_FILE, "run train-backbone first")
    frozen = freeze(load_encoder(backbone))
    ckpt, log = cfg.run_dir / MILR_FILE, cfg.run_dir / "milr_log.csv"
    train_milr(dataset, frozen, cfg.milr, cfg.seed, log_path=log, checkpoint_path=ckpt)
    return [ckpt, log]


def explain_ids(cfg: RunConfig, n_total: int) -> list[int]:
    v = cfg.viz
    if v.sample_ids:
        bad = [i for i in v.sample_ids if not 0 <= i < n_total]
        if bad:
            raise ConfigError(f"viz.sample_ids {bad} outside the dataset (size {n_total})")
        return list(v.sample_ids)
    rng = np.random.default_rng([cfg.seed, 3])
    return sorted(int(i) for i in rng.choice(n_total, min(v.n_samples, n_total), replace=False))


def cmd_explain(cfg: RunConfig, backbone: Path | None = None, milr_ckpt: Path | None = None) -> list[Path]:
    dataset = load_dataset(_require(cfg.run_dir / DATASET_FILE, "run synth-data first"))
    frozen = freeze(load_encoder(_require(backbone or cfg.run_dir / BACKBONE_FILE, "run train-backbone first")))
    state = MilrState.load(_require(milr_ckpt or cfg.run_dir / MILR_FILE, "run train-milr first"))
    cache = stage1_collect(frozen, dataset.images)
    written, all_maps = [], []
    for sid in explain_ids(cfg, len(dataset)):
        maps = explain_sample(state, cache, sid, cfg.viz.contrast_batches, cfg.viz.contrast_size, cfg.seed)
        written += render_sample(dataset.images[sid], maps, cfg.run_dir / str(sid), cfg.viz.blend)
        all_maps += [maps[k] for k in ("total", "decision", "redundant")]
    written.append(write_maps_csv(cfg.run_dir / "maps.csv", all_maps))
    return written


def cmd_calibrate(cfg: RunConfig) -> list[Path]:
    c = cfg.calibrate
    results = []
    for rho in c.rhos:
        results.append(calibrate_infonce(rho, steps=c.steps, seed=cfg.seed))
        results.append(calibrate_vib(rho, steps=c.vib_steps, seed=cfg.seed))
    return [write_calibration_csv(cfg.run_dir / "calibration.csv", results)]


COMMANDS = ("synth-data", "train-backbone", "train-milr", "explain", "calibrate", "pipeline")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file (all keys optional)")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", help="override run.output_dir")
    common.add_argument("--run-id", help="override run.run_id")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override any configuration key; repeatable")

    parser = argparse.ArgumentParser(prog="milr", description="Mutual-information explanations for a few-shot encoder.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="generate (or ingest) the dataset")
    p = sub.add_parser("train-backbone", parents=[common], help="train the prototypical encoder")
    p.add_argument("--episodes", type=int, help="override protonet.episodes")
    p = sub.add_parser("train-milr", parents=[common], help="train critic, bottleneck head and mask")
    p.add_argument("--backbone", type=Path, help="encoder checkpoint (default: run directory)")
    p.add_argument("--episodes", type=int, help="override milr.episodes")
    p.add_argument("--alpha", type=float, help="override milr.alpha_weight")
    p.add_argument("--beta", type=float, help="override milr.beta_weight")
    p = sub.add_parser("explain", parents=[common], help="render maps for selected samples")
    p.add_argument("--backbone", type=Path)
    p.add_argument("--milr", type=Path, help="MI-LR checkpoint (default: run directory)")
    p.add_argument("--samples", help="comma-separated sample ids; overrides viz.sample_ids")
    p.add_argument("--blend", type=float, help="override viz.blend")
    p = sub.add_parser("calibrate", parents=[common], help="estimator calibration on Gaussian pairs")
    p.add_argument("--rho", help="comma-separated correlations; overrides calibrate.rhos")
    p.add_argument("--steps", type=int, help="override calibrate.steps")
    sub.add_parser("pipeline", parents=[common], help="synth-data, train-backbone, train-milr and explain in order")
    return parser


def _overrides(args: argparse.Namespace) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}

    def put(section, key, value):
        if value is not None:
            out.setdefault(section, {})[key] = str(value)

    for item in args.set:
        name, sep, value = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not (sep and dot and section and key):
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        put(section, key, value.strip())
    put("run", "seed", args.seed)
    put("run", "output_dir", args.out)
    put("run", "run_id", args.run_id)
    cmd = args.command
    if cmd == "train-backbone":
        put("protonet", "episodes", args.episodes)
    elif cmd == "train-milr":
        put("milr", "episodes", args.episodes)
        put("milr", "alpha_weight", args.alpha)
        put("milr", "beta_weight", args.beta)
    elif cmd == "explain":
        put("viz", "sample_ids", args.samples)
        put("viz", "blend", args.blend)
    elif cmd == "calibrate":
        put("calibrate", "rhos", args.rho)
        put("calibrate", "steps", args.steps)
    return out


def run(args: argparse.Namespace) -> list[Path]:
    cfg = load_config(args.config, _overrides(args))
    try:
        cfg.run_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {cfg.run_dir}: {exc.strerror}") from None
    steps = {
        "synth-data": lambda: cmd_synth_data(cfg),
        "train-backbone": lambda: cmd_train_backbone(cfg),
        "train-milr": lambda: cmd_train_milr(cfg, getattr(args, "backbone", None)),
        "explain": lambda: cmd_explain(cfg, getattr(args, "backbone", None), getattr(args, "milr", None)),
        "calibrate": lambda: cmd_calibrate(cfg),
    }
    order = ["synth-data", "train-backbone", "train-milr", "explain"] if args.command == "pipeline" else [args.command]
    manifests = []
    for name in order:
        manifests.append(_write_manifest(cfg, name, steps[name]()))
    return manifests


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        for manifest in run(args):
            print(manifest)
    except (MilrError, OSError, configparser.Error) as exc:
        msg = " ".join(str(exc).split())
        print(f"milr {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
