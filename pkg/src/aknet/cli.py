"""Command-line entry point.

    aknet generate   --config cfg.json --seed 7 --out runs/g
    aknet train      --stage 1 --out runs/g
    aknet train      --stage 2 --out runs/g
    aknet evaluate   --sow-source oracle --out runs/g
    aknet experiment gaussian-grid --seed 7 --out runs/g
    aknet inspect    runs/g/checkpoints/aknet.bin
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .datasets import MAGIC as DATASET_MAGIC
from .datasets import load_dataset
from .hypercm import HyperParams
from .kgain import GainNetParams
from .params import MAGIC as CKPT_MAGIC
from .params import load_checkpoint, save_checkpoint
from .training import Stage, pseudo_stationary, train_stage1, train_stage2

# Parameter-count targets by system size (gain network, hypernetwork).
TABLE1_TARGETS = {(2, 2): (10_000, 1_000), (10, 10): (330_000, 6_000)}


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file (keys of ExperimentConfig)")
    common.add_argument("--seed", type=int, help="master seed for every random stream")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="aknet", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="write training and test datasets")
    g.add_argument("--experiment", choices=harness.EXPERIMENTS)

    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)

    e = sub.add_parser("evaluate", parents=[common], help="score KF and AKNet on the test set")
    e.add_argument("--sow-source", choices=("oracle", "corr", "grid"))
    e.add_argument("--checkpoint", type=Path)

    x = sub.add_parser("experiment", parents=[common], help="run a full experiment")
    x.add_argument("name", choices=harness.EXPERIMENTS)
    x.add_argument("--sow-source", choices=("oracle", "corr", "grid"))
    x.add_argument("--no-train", action="store_true",
                   help="fail instead of training when no checkpoint exists")

    i = sub.add_parser("inspect", help="print parameter counts or dataset summary")
    i.add_argument("path", type=Path)
    return p


def _config(args, **extra) -> harness.ExperimentConfig:
    overrides = {"seed": args.seed, **extra}
    if getattr(args, "out", None) is not None:
        overrides["out"] = str(args.out)
    return harness.ExperimentConfig.load(args.config, **overrides)


def _cmd_generate(args) -> int:
    cfg = _config(args, experiment=args.experiment)
    paths = harness.generate_data(cfg, cfg.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def _cmd_train(args) -> int:
    cfg = _config(args)
    out = Path(cfg.out)
    data_path = out / "data" / "train.akd"
    if not data_path.exists():
        raise FileNotFoundError(f"{data_path} missing; run `aknet generate` first")
    data = load_dataset(data_path)
    model = harness.build_model(cfg)
    ck = out / "checkpoints"
    ck.mkdir(parents=True, exist_ok=True)
    if args.stage == 1:
        theta = GainNetParams.init(model.m, model.n, cfg.hidden, rng=cfg.rng(5, 1))
        theta, report = train_stage1(model, pseudo_stationary(data),
                                     cfg.train_config(Stage.THETA), theta)
        save_checkpoint(ck / "theta.bin", {"theta": theta})
        report.write_csv(out / "stage1_report.csv")
    else:
        if not (ck / "theta.bin").exists():
            raise FileNotFoundError(f"{ck / 'theta.bin'} missing; run `aknet train --stage 1` first")
        theta = load_checkpoint(ck / "theta.bin")["theta"]
        psi = HyperParams.init(theta.sites, cfg.hyper_width, rng=cfg.rng(5, 2))
        psi, report = train_stage2(model, data, theta, cfg.train_config(Stage.PSI), psi)
        save_checkpoint(ck / "aknet.bin", {"theta": theta, "psi": psi})
        report.write_csv(out / "stage2_report.csv")
    print(report.summary())
    return 0


def _cmd_evaluate(args) -> int:
    cfg = _config(args, sow_source=args.sow_source,
                  checkpoint=str(args.checkpoint) if args.checkpoint else None)
    out = Path(cfg.out)
    test_path = out / "data" / "test.akd"
    if not test_path.exists():
        raise FileNotFoundError(f"{test_path} missing; run `aknet generate` first")
    cfg.allow_training = False
    model = harness.build_model(cfg)
    theta, psi, _ = harness.obtain_trained(cfg, model, out)
    table = harness.evaluate_saved(cfg, model, load_dataset(test_path), theta, psi)
    harness._write_outputs(cfg, out, table, None, 0.0)
    print(table.report())
    return 0


def _cmd_experiment(args) -> int:
    cfg = _config(args, experiment=args.name, sow_source=args.sow_source)
    if args.no_train:
        cfg.allow_training = False
    table = harness.run_experiment(cfg)
    print(table.report())
    return 0


def _cmd_inspect(args) -> int:
    head = args.path.read_bytes()[:8]
    if head == CKPT_MAGIC:
        stores = load_checkpoint(args.path)
        total = {}
        for ns, store in stores.items():
            total[ns] = store.count()
            print(f"[{ns}] {store.count()} parameters  {store.hyper}")
            for name, size in store.breakdown().items():
                print(f"    {name:16s} {size:8d}")
        theta = stores.get("theta")
        if theta is not None and "m" in theta.hyper:
            key = (theta.hyper["m"], theta.hyper["n"])
            if key in TABLE1_TARGETS:
                t_theta, t_psi = TABLE1_TARGETS[key]
                print(f"targets for {key[0]}x{key[1]}: gain network ~{t_theta}, "
                      f"hypernetwork ~{t_psi}")
            if "psi" in total:
                print(f"hypernetwork / gain network = {total['psi'] / total['theta']:.3f}")
        return 0
    if head == DATASET_MAGIC:
        ds = load_dataset(args.path)
        print(f"{len(ds)} trajectories, T={ds.T}, m={ds.m}, n={ds.n}, "
              f"family={ds.family.value}, split={ds.split}")
        for (q2, r2), idx in ds.groups().items():
            print(f"    q2={q2:<10.4g} r2={r2:<10.4g} sow={np.median(ds.sow[idx]):<10.4g} "
                  f"n={len(idx)}")
        return 0
    print(f"{args.path}: unrecognised file", file=sys.stderr)
    return 2


def main(argv=None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {
        "generate": _cmd_generate,
        "train": _cmd_train,
        "evaluate": _cmd_evaluate,
        "experiment": _cmd_experiment,
        "inspect": _cmd_inspect,
    }[args.command]
    try:
        return handler(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"aknet {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
